use popmech_autodiff::{check_grad, Array, AutodiffError, GradCheck, GradOptions, Graph, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn add_elementwise() {
    let g = Graph::new();
    let x = g.constant(arr(&[2], &[1.0, 2.0]));
    let y = g.constant(arr(&[2], &[3.0, 4.0]));
    assert_eq!(x.add(y).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::new();
    let x = g.constant(arr(&[1, 3], &[0.0, 0.0, 0.0]));
    let s = x.softmax(1).unwrap();
    for v in s.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn logsumexp_large_inputs() {
    let g = Graph::new();
    let x = g.param(arr(&[1, 2], &[1000.0, 1000.0]));
    let l = x.logsumexp(1).unwrap();
    // 1000 + ln 2, evaluated with the shift-by-max identity in f64.
    let expected = 1000.0 + std::f64::consts::LN_2;
    assert!((l.item() - expected).abs() < 1e-12, "{}", l.item());
    let d = g.grad(l.sum(), &[x], GradOptions::default()).unwrap();
    assert_eq!(d[0].value().data(), &[0.5, 0.5]);
}

#[test]
fn derivative_of_square() {
    let g = Graph::new();
    let x = g.param(Array::scalar(3.0));
    let y = x.square();
    let d = g.grad(y, &[x], GradOptions::default()).unwrap();
    assert_eq!(d[0].item(), 6.0);
}

#[test]
fn second_derivative_of_cube() {
    let g = Graph::new();
    let x = g.param(Array::scalar(2.0));
    let y = x.powf(3.0).unwrap();
    let d = g.grad(y, &[x], GradOptions::create_graph()).unwrap()[0];
    let dd = g.grad(d, &[x], GradOptions::default()).unwrap()[0];
    assert_eq!(dd.item(), 12.0);
}

#[test]
fn gradient_of_softmax_norm_at_symmetric_point() {
    let g = Graph::new();
    let x = g.param(arr(&[2], &[0.0, 0.0]));
    let f = x.softmax(0).unwrap().square().sum();
    let d = g.grad(f, &[x], GradOptions::default()).unwrap();
    assert_eq!(d[0].value().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_output_is_rejected() {
    let g = Graph::new();
    let x = g.param(arr(&[2], &[1.0, 2.0]));
    let y = x.exp();
    assert!(matches!(
        g.grad(y, &[x], GradOptions::default()),
        Err(AutodiffError::NonScalarOutput(_))
    ));
}

#[test]
fn unreachable_input_needs_allow_unused() {
    let g = Graph::new();
    let x = g.param(Array::scalar(1.0));
    let z = g.param(Array::scalar(5.0));
    let y = x.square();
    assert!(matches!(
        g.grad(y, &[x, z], GradOptions::default()),
        Err(AutodiffError::Unreachable(_))
    ));
    let d = g
        .grad(y, &[x, z], GradOptions::default().allow_unused())
        .unwrap();
    assert_eq!(d[1].item(), 0.0);
}

#[test]
fn shape_mismatch_names_the_op() {
    let g = Graph::new();
    let a = g.constant(Array::zeros(vec![2, 3]));
    let b = g.constant(Array::zeros(vec![3, 2]));
    let err = a.add(b).unwrap_err();
    assert!(err.to_string().contains("add"), "{err}");
    assert!(a.matmul(a).is_err());
    // Leading-axis broadcast is allowed, trailing is not.
    let bias = g.constant(Array::zeros(vec![3]));
    assert!(a.add(bias).is_ok());
    let col = g.constant(Array::zeros(vec![2]));
    assert!(a.add(col).is_err());
}

#[test]
fn domain_errors() {
    let g = Graph::new();
    let x = g.constant(arr(&[2], &[1.0, -1.0]));
    assert!(matches!(x.ln(), Err(AutodiffError::Domain { .. })));
    assert!(matches!(x.sqrt(), Err(AutodiffError::Domain { .. })));
    assert!(matches!(x.powf(0.5), Err(AutodiffError::Domain { .. })));
    assert!(x.powf(3.0).is_ok());
}

#[test]
fn constant_function_has_zero_gradient() {
    let report = check_grad(
        |g, _| Ok(g.scalar(4.2)),
        &[arr(&[3], &[1.0, 2.0, 3.0])],
        GradCheck::default(),
    )
    .unwrap();
    assert!(report.analytic[0].data().iter().all(|v| *v == 0.0));
    assert!(report.passed());
}

#[test]
fn sum_of_squares_check() {
    let report = check_grad(
        |_, v| Ok(v[0].square().sum()),
        &[arr(&[2], &[1.0, -2.0])],
        GradCheck {
            tolerance: 1e-7,
            ..GradCheck::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err);
}

/// Every op-kind, composed into a scalar, against central differences.
fn op_suite<'g>(g: &'g Graph, v: &[Var<'g>]) -> popmech_autodiff::Result<Var<'g>> {
    let (a, b, c) = (v[0], v[1], v[2]); // a, b: [3,4]; c: [4,2]
    let ab = a.mul(b)?.add(a.sub(b)?)?.div(b.square().add_scalar(1.0))?.neg();
    let m = a.matmul(c)?.tanh(); // [3,2]
    let r = ab.reshape(&[4, 3])?.transpose()?; // [3,4]
    let cat = Var::concat(&[r, m], 1)?; // [3,6]
    let sl = cat.slice(1, 2, 3)?; // [3,3]
    let sm = sl.softmax(1)?.mul(sl.logsumexp(1)?.reshape(&[3, 1])?.broadcast_to(&[3, 3])?)?;
    let ln = sm.layer_norm(1e-5)?.silu()?;
    let pos = a.square().add_scalar(0.5);
    let lg = pos.ln()?.add(pos.sqrt()?)?.add(pos.powf(1.5)?)?;
    let cl = a.clamp_min(-0.3).exp().sigmoid();
    let bias = g.constant(Array::new(vec![4], vec![0.1, 0.2, 0.3, 0.4])?);
    let broad = cl.add(bias)?.mean_axis(0, false)?; // [4]
    let d = a.sq_dist(b)?; // [3,3]
    let total = ln
        .sum()
        .add(lg.mean())?
        .add(broad.sum_axis(0, true)?.sum())?
        .add(d.sqrt()?.sum().scale(0.1))?
        .add(m.sum_to(&[2])?.sum())?;
    Ok(total)
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let pts = vec![
            random(&mut rng, &[3, 4], -1.0, 1.0),
            random(&mut rng, &[3, 4], -1.0, 1.0),
            random(&mut rng, &[4, 2], -1.0, 1.0),
        ];
        let r = check_grad(op_suite, &pts, GradCheck { floor: 1e-6, ..GradCheck::default() }).unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_err);
    }
}

#[test]
fn second_order_op_suite_matches_finite_differences() {
    // G(a) = ‖∇ₐf(a, b, c)‖²; its gradient needs the recorded backward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let c0 = random(&mut rng, &[4, 2], -1.0, 1.0);
    let big_g = |a: &Array, want_grad: bool| -> (f64, Option<Array>) {
        let g = Graph::new();
        let av = g.param(a.clone());
        let y = op_suite(&g, &[av, g.constant(b0.clone()), g.constant(c0.clone())]).unwrap();
        let da = g.grad(y, &[av], GradOptions::create_graph()).unwrap()[0];
        let gn = da.square().sum();
        let grad = want_grad.then(|| {
            (*g.grad(gn, &[av], GradOptions::default()).unwrap()[0].value()).clone()
        });
        (gn.item(), grad)
    };
    let analytic = big_g(&a0, true).1.unwrap();
    let h = 1e-5;
    for i in 0..a0.len() {
        let mut p = a0.clone();
        p.data_mut()[i] += h;
        let fp = big_g(&p, false).0;
        p.data_mut()[i] -= 2.0 * h;
        let fm = big_g(&p, false).0;
        let num = (fp - fm) / (2.0 * h);
        let an = analytic.data()[i];
        let rel = (num - an).abs() / an.abs().max(num.abs()).max(1e-6);
        assert!(rel < 1e-5, "component {i}: analytic {an} numeric {num}");
    }
}

#[test]
fn hessian_vector_product_of_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5;
    let a = random(&mut rng, &[n, n], -1.0, 1.0);
    let x0 = random(&mut rng, &[n, 1], -1.0, 1.0);
    let v0 = random(&mut rng, &[n, 1], -1.0, 1.0);
    let g = Graph::new();
    let av = g.constant(a.clone());
    let x = g.param(x0);
    let v = g.constant(v0.clone());
    let q = x.t_matmul(av.matmul(x).unwrap()).unwrap().sum();
    let dq = g.grad(q, &[x], GradOptions::create_graph()).unwrap()[0];
    let hv = g
        .grad(dq.mul(v).unwrap().sum(), &[x], GradOptions::default())
        .unwrap()[0];
    for i in 0..n {
        let expected: f64 = (0..n)
            .map(|j| (a.data()[i * n + j] + a.data()[j * n + i]) * v0.data()[j])
            .sum();
        assert!((hv.value().data()[i] - expected).abs() < 1e-10);
    }
}

#[test]
fn overflow_safe_softmax_and_logsumexp() {
    let g = Graph::new();
    let x = g.param(arr(&[2, 3], &[1000.0, -1000.0, 999.0, -1000.0, 1000.0, 0.0]));
    let s = x.softmax(1).unwrap();
    let l = x.logsumexp(1).unwrap();
    assert!(s.value().is_finite() && l.value().is_finite());
    let f = s.square().sum().add(l.sum()).unwrap();
    let d = g.grad(f, &[x], GradOptions::default()).unwrap();
    assert!(d[0].value().is_finite());
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts = vec![
            random(&mut rng, &[3, 4], -1.0, 1.0),
            random(&mut rng, &[3, 4], -1.0, 1.0),
            random(&mut rng, &[4, 2], -1.0, 1.0),
        ];
        let g = Graph::new();
        let vars: Vec<_> = pts.into_iter().map(|p| g.param(p)).collect();
        let y = op_suite(&g, &vars).unwrap();
        let d = g.grad(y, &vars, GradOptions::default()).unwrap();
        let mut bits = vec![y.item().to_bits()];
        for v in d {
            bits.extend(v.value().data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_match_finite_differences(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        which in 0usize..6,
    ) {
        let pt = vec![Array::new(vec![2, 3], xs).unwrap()];
        let opts = GradCheck { floor: 1e-6, ..GradCheck::default() };
        let r = check_grad(move |_, v| {
            let x = v[0];
            let y = match which {
                0 => x.tanh(),
                1 => x.silu()?,
                2 => x.exp(),
                3 => x.softmax(1)?.square(),
                4 => x.layer_norm(1e-3)?.powf(3.0)?,
                _ => x.logsumexp(0)?.square(),
            };
            Ok(y.sum())
        }, &pt, opts).unwrap();
        prop_assert!(r.passed(), "op {} rel err {}", which, r.max_rel_err);
    }

    #[test]
    fn matmul_grads_match_finite_differences(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let pt = vec![Array::new(vec![2, 3], a).unwrap(), Array::new(vec![3, 2], b).unwrap()];
        let opts = GradCheck { floor: 1e-6, ..GradCheck::default() };
        let r = check_grad(|_, v| {
            let p = v[0].matmul(v[1])?;
            let q = v[0].t_matmul(v[0])?;
            let r = v[1].matmul_t(v[1])?;
            p.square().sum().add(q.mul(r)?.sum())
        }, &pt, opts).unwrap();
        prop_assert!(r.passed(), "rel err {}", r.max_rel_err);
    }
}
