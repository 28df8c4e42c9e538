mod common;

use common::{brute_force_w1, dist, two_point_divergence};
use popmech::divergence::{
    assignment, estimate_blur, exact_w1, sinkhorn_divergence, sinkhorn_divergence_arrays, DivergenceConfig, GradMode,
};
use popmech_autodiff::{check_grad, Array, AutodiffError, GradCheck, Graph, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, d: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cfg(p: u32, blur: f64) -> DivergenceConfig {
    DivergenceConfig {
        p,
        max_iters: 2000,
        tol: 1e-12,
        ..DivergenceConfig::default()
    }
    .with_blur(blur)
}

#[test]
fn identical_clouds_have_zero_divergence() {
    let x = cloud(20, 2, 1);
    for grad in [GradMode::Full, GradMode::Envelope] {
        let g = Graph::new();
        let c = DivergenceConfig { grad, ..cfg(2, 0.1) };
        let (s, rep) = sinkhorn_divergence(g.constant(x.clone()), None, g.constant(x.clone()), None, &c).unwrap();
        assert!(s.item().abs() <= 1e-9, "{}", s.item());
        assert!(rep.converged);
    }
}

#[test]
fn single_points_cost_half_squared_distance() {
    let a = Array::from_rows(&[[0.0, 0.0]]).unwrap();
    let b = Array::from_rows(&[[0.6, -0.8]]).unwrap();
    let (s, _) = sinkhorn_divergence_arrays(&a, &b, &cfg(2, 0.01)).unwrap();
    assert!((s - 0.5).abs() <= 1e-6, "{s}");
}

#[test]
fn two_by_two_matches_direct_minimization() {
    let (a, b) = ([0.0, 1.0], [0.25, 0.75]);
    let blur = 0.05;
    let oracle = two_point_divergence(a, b, blur);
    let xa = Array::new(vec![2, 1], a.to_vec()).unwrap();
    let xb = Array::new(vec![2, 1], b.to_vec()).unwrap();
    let (s, rep) = sinkhorn_divergence_arrays(&xa, &xb, &cfg(2, blur)).unwrap();
    assert!(rep.converged);
    assert!((s - oracle).abs() <= 1e-6, "{s} vs {oracle}");
}

#[test]
fn divergence_is_symmetric_and_nonnegative() {
    for seed in 0..6 {
        let a = cloud(7 + seed as usize, 2, seed);
        let b = cloud(11, 2, 100 + seed);
        for p in [1, 2] {
            let c = cfg(p, 0.2);
            let (ab, _) = sinkhorn_divergence_arrays(&a, &b, &c).unwrap();
            let (ba, _) = sinkhorn_divergence_arrays(&b, &a, &c).unwrap();
            assert!((ab - ba).abs() <= 1e-9, "{ab} {ba}");
            assert!(ab >= -1e-9);
        }
    }
}

#[test]
fn weights_must_sum_to_one() {
    let g = Graph::new();
    let a = g.constant(cloud(3, 2, 0));
    let b = g.constant(cloud(3, 2, 1));
    let w = Array::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
    assert!(sinkhorn_divergence(a, Some(&w), b, None, &cfg(2, 0.1)).is_err());
    let w = Array::new(vec![3], vec![0.2, 0.3, 0.5]).unwrap();
    assert!(sinkhorn_divergence(a, Some(&w), b, None, &cfg(2, 0.1)).is_ok());
}

#[test]
fn iteration_cap_is_flagged_not_fatal() {
    let c = DivergenceConfig { max_iters: 1, ..cfg(2, 0.01) };
    let (s, rep) = sinkhorn_divergence_arrays(&cloud(10, 2, 0), &cloud(10, 2, 1), &c).unwrap();
    assert!(s.is_finite());
    assert!(!rep.converged);
}

#[test]
fn gradient_passes_check_grad() {
    let b = cloud(6, 2, 9);
    let c = cfg(2, 0.3);
    let report = check_grad(
        move |g: &Graph, v: &[Var<'_>]| {
            let xb = g.constant(b.clone());
            sinkhorn_divergence(v[0], None, xb, None, &c)
                .map(|(s, _)| s)
                .map_err(|e| AutodiffError::InvalidArgument { op: "sinkhorn", msg: e.to_string() })
        },
        &[cloud(5, 2, 4)],
        GradCheck { tolerance: 1e-4, ..GradCheck::default() },
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err);
}

#[test]
fn w1_matches_exhaustive_search() {
    for seed in 0..5 {
        let a = cloud(6, 2, seed);
        let b = cloud(6, 2, 50 + seed);
        let w = exact_w1(&a, &b).unwrap();
        assert!(w.exact);
        assert!((w.value - brute_force_w1(&a, &b)).abs() <= 1e-12);
    }
}

#[test]
fn w1_of_identical_and_translated_clouds() {
    let a = cloud(30, 2, 3);
    assert_eq!(exact_w1(&a, &a).unwrap().value, 0.0);
    let b = a.zip_map(&Array::new(vec![30, 2], [0.3, -0.4].repeat(30)).unwrap(), |p, q| p + q).unwrap();
    assert!((exact_w1(&a, &b).unwrap().value - 0.5).abs() <= 1e-12);
}

#[test]
fn w1_triangle_inequality() {
    for seed in 0..10 {
        let n = 4 + 3 * seed as usize;
        let (a, b, c) = (cloud(n, 2, seed), cloud(n, 2, seed + 20), cloud(n, 2, seed + 40));
        let ab = exact_w1(&a, &b).unwrap().value;
        let bc = exact_w1(&b, &c).unwrap().value;
        let ac = exact_w1(&a, &c).unwrap().value;
        assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn assignment_finds_the_anti_diagonal() {
    let cost = Array::from_rows(&[[5.0, 1.0, 9.0], [1.0, 5.0, 9.0], [9.0, 9.0, 0.0]]).unwrap();
    assert_eq!(assignment(&cost), vec![1, 0, 2]);
}

#[test]
fn unequal_sizes_fall_back_to_entropic_estimate() {
    let a = cloud(8, 2, 1);
    let b = Array::new(vec![16, 2], [a.data(), a.data()].concat()).unwrap();
    let w = exact_w1(&a, &b).unwrap();
    assert!(!w.exact);
    assert!(w.value.abs() < 1e-2, "{}", w.value);
    assert!(exact_w1(&a, &cloud(8, 3, 0)).is_err());
}

#[test]
fn small_blur_p1_approaches_w1() {
    for seed in 0..3 {
        let a = cloud(8, 2, seed);
        let b = cloud(8, 2, 10 + seed);
        let both = Array::new(vec![16, 2], [a.data(), b.data()].concat()).unwrap();
        let mut diam: f64 = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                diam = diam.max(dist(both.row(i), both.row(j)));
            }
        }
        let c = DivergenceConfig {
            max_iters: 20_000,
            tol: 1e-9,
            ..cfg(1, 1e-3 * diam)
        };
        let (s, _) = sinkhorn_divergence_arrays(&a, &b, &c).unwrap();
        let w = exact_w1(&a, &b).unwrap().value;
        assert!((s - w).abs() <= 0.01 * w, "{s} vs {w}");
    }
}

#[test]
fn blur_estimates() {
    let two = Array::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
    assert!((estimate_blur(&two).unwrap() - 0.1).abs() < 1e-15);
    let same = Array::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
    assert_eq!(estimate_blur(&same).unwrap(), 1e-3);
    assert!(estimate_blur(&Array::from_rows(&[[1.0, 1.0]]).unwrap()).is_err());
}

#[test]
fn blur_of_a_large_gaussian_cloud_tracks_the_full_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1000;
    let data: Vec<f64> = (0..2 * n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let x = Array::new(vec![n, 2], data).unwrap();
    let mut d = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            d.push(dist(x.row(i), x.row(j)));
        }
    }
    d.sort_by(f64::total_cmp);
    let full = 0.05 * 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]);
    let est = estimate_blur(&x).unwrap();
    assert!((est - full).abs() <= 0.03 * full, "{est} vs {full}");
}
