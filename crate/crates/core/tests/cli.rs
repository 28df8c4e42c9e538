use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use popmech::energy::init_params;
use popmech::trainer::load_checkpoint;

const SMALL_SDE: &[&str] = &["--n", "16", "--set", "sde.num_train=4", "--set", "sde.num_test=2"];
const SMALL_MODEL: &[&str] = &[
    "--set",
    "energy.hidden=8",
    "--set",
    "energy.blocks=1",
    "--set",
    "energy.heads=2",
    "--set",
    "energy.ff_inner=16",
    "--set",
    "train.loss.max_iters=20",
];

fn popmech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popmech"))
        .args(args)
        .env("POPMECH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = popmech(args);
    assert!(
        out.status.success(),
        "popmech {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-sde", "--out", s(dir), "--seed", "7"];
    args.extend_from_slice(SMALL_SDE);
    args.extend_from_slice(extra);
    ok(&args);
}

fn train_small(data: &Path, out: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", epochs];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    ok(&args)
}

fn snapshot_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn gen_sde_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-sde", "--potential", "quadratic", "--seed", "7", "--n", "30", "--out", s(&a)]);
    ok(&["gen-sde", "--potential", "quadratic", "--seed", "7", "--n", "30", "--out", s(&b)]);
    for split in ["train", "test"] {
        let (x, y) = (snapshot_bytes(&a.join(split)), snapshot_bytes(&b.join(split)));
        assert_eq!(x.len(), 10);
        assert_eq!(x, y);
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("train/manifest.json")).unwrap()).unwrap();
    assert!(m["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    assert_eq!(m["provenance"]["seed"], 7);
}

#[test]
fn gen_boids_writes_train_and_forecast_frames() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-boids", "--n", "20", "--frames-train", "3", "--frames-test", "2", "--out", s(tmp.path())]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("test/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["times"].as_array().unwrap().len(), 2);
    assert_eq!(m["velocities"], true);
}

#[test]
fn config_errors_exit_2_with_a_path() {
    let out = popmech(&["gen-sde", "--potential", "rosenbrock"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/sde/potential"));
    let out = popmech(&["gen-sde", "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/train"));
    assert_eq!(popmech(&["train"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = popmech(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn zero_epochs_checkpoints_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_small(&data, &[]);
    train_small(&data, &run, "0", &["--seed", "3"]);
    let (state, hash) = load_checkpoint(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(state.params, init_params(&state.params.arch, 3).unwrap());
    assert_eq!(state.ema, state.params);
    assert!(hash.is_some());
}

#[test]
fn resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_small(&data, &[]);
    train_small(&data, &run, "2", &[]);
    let out = train_small(&data, &run, "4", &["--resume"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gamma"));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 1, 2, 3]);
}

#[test]
fn eval_rollout_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_small(&data, &[]);
    train_small(&data, &run, "2", &[]);
    let ckpt = s(&run);
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--data", s(&data), "--checkpoint", ckpt, "--out", s(e), "--protocol", "forecast", "--protocol", "interpolate"]);
    }
    for f in ["forecast_all.csv", "forecast_all.json", "interpolate_all.csv", "interpolate_all.json"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("interpolate_all.json")).unwrap()).unwrap();
    assert_eq!(report["v_mode"], "carried");
    assert_eq!(report["entries"].as_array().unwrap().len(), 2);

    let base = tmp.path().join("base");
    ok(&["eval", "--data", s(&data), "--baseline", "frozen", "--out", s(&base), "--set", "eval.formats=[\"csv\"]"]);
    assert!(base.join("forecast_all.csv").exists());
    assert!(!base.join("forecast_all.json").exists());

    let roll = tmp.path().join("roll");
    ok(&["rollout", "--data", s(&data), "--checkpoint", ckpt, "--out", s(&roll)]);
    assert!(roll.join("diagnostics.json").exists());
    let traj = popmech::datagen::load_dataset(&roll.join("trajectory")).unwrap();
    assert_eq!(traj.len(), 6);

    let agg = tmp.path().join("agg");
    let out = ok(&["report", "--runs", s(&e1), s(&e2), "--out", s(&agg)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean over times then seeds") && text.contains("pooled"), "{text}");
    assert!(agg.join("aggregate.json").exists());
}

#[test]
fn eval_refuses_mismatched_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, data3, run) = (tmp.path().join("d2"), tmp.path().join("d3"), tmp.path().join("run"));
    gen_small(&data, &[]);
    gen_small(&data3, &["--set", "sde.dim=3"]);
    train_small(&data, &run, "0", &[]);
    let out = popmech(&["eval", "--data", s(&data3), "--checkpoint", s(&run), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));
}

#[test]
fn seed_fan_out_uses_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-sde", "--n", "10", "--seeds", "1,2", "--out", s(tmp.path())]);
    for seed in ["seed_1", "seed_2"] {
        assert!(tmp.path().join(seed).join("train/manifest.json").exists());
    }
    assert_ne!(
        snapshot_bytes(&tmp.path().join("seed_1/train")),
        snapshot_bytes(&tmp.path().join("seed_2/train"))
    );
}

#[test]
fn help_lists_flags_and_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--data", "--epochs", "--seed", "--resume", "--config", "--set", "--seeds", "--out", "[default: 1000]"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-sde", "gen-boids", "train", "rollout", "eval", "report"] {
        assert!(text.contains(cmd));
    }
}
