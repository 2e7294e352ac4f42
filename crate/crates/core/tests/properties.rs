use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilin_core::certify::{certified_radius, CertificationConfig};
use tilin_core::maxpool::{maxpool_relax, verify_plane_sound, PoolCase};
use tilin_core::model::ActivationKind;
use tilin_core::oracle::{
    box_quadrature, line_exact_violation, random_network,
    relaxation_area, relaxation_grid_violation, RandomNetSpec,
};
use tilin_core::propagate::{compute_all_bounds, Norm, PerturbationBall};
use tilin_core::relaxation::{
    activation_slope, activation_value, relax, sshape_bounds, AnchorPolicy, LineRule, ScalarLine,
};

fn kind() -> impl Strategy<Value = ActivationKind> {
    prop::sample::select(ActivationKind::ALL.to_vec())
}

fn s_kind() -> impl Strategy<Value = ActivationKind> {
    prop::sample::select(ActivationKind::S_SHAPED.to_vec())
}

fn norm() -> impl Strategy<Value = Norm> {
    prop::sample::select(Norm::ALL.to_vec())
}

fn interval() -> impl Strategy<Value = (f64, f64, f64)> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.0..=1.0f64).prop_map(|(a, b, t)| {
        let (l, u) = if a <= b { (a, b) } else { (b, a) };
        (l, u, l + t * (u - l))
    })
}

fn window(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-5.0..5.0f64, 0.0..4.0f64), 1..=max_n).prop_map(|v| {
        let l: Vec<f64> = v.iter().map(|p| p.0).collect();
        let u: Vec<f64> = v.iter().map(|p| p.0 + p.1).collect();
        (l, u)
    })
}

fn max(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn scalar_relaxation_is_sound((l, u, m) in interval(), kind in kind()) {
        let r = sshape_bounds(kind, l, u, m);
        prop_assert!(relaxation_grid_violation(kind, &r, 1000) <= 1e-9);
        prop_assert!(line_exact_violation(kind, &r.upper, l, u, true) <= 1e-9);
        prop_assert!(line_exact_violation(kind, &r.lower, l, u, false) <= 1e-9);
    }

    #[test]
    fn anchor_lines_touch_the_curve((l, u, m) in interval(), kind in kind()) {
        let r = sshape_bounds(kind, l, u, m);
        let f = |x| activation_value(kind, x);
        for (line, rule) in [(r.upper, r.upper_rule), (r.lower, r.lower_rule)] {
            match rule {
                LineRule::TangentAtAnchor => prop_assert!((line.eval(r.anchor) - f(r.anchor)).abs() <= 1e-9),
                LineRule::TangentThroughLower { point } => {
                    prop_assert!((line.eval(l) - f(l)).abs() <= 1e-9);
                    prop_assert!((line.eval(point) - f(point)).abs() <= 1e-9);
                }
                LineRule::TangentThroughUpper { point } => {
                    prop_assert!((line.eval(u) - f(u)).abs() <= 1e-9);
                    prop_assert!((line.eval(point) - f(point)).abs() <= 1e-9);
                }
                LineRule::Chord => {
                    prop_assert!((line.eval(l) - f(l)).abs() <= 1e-9);
                    prop_assert!((line.eval(u) - f(u)).abs() <= 1e-9);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn midpoint_lines_are_minimal_at_the_midpoint(
        (l, u, _) in interval(),
        kind in s_kind(),
        ts in prop::collection::vec(-0.25..1.25f64, 64),
    ) {
        prop_assume!(u - l > 1e-6);
        let r = relax(kind, l, u, 0.0, AnchorPolicy::Midpoint);
        let m = r.anchor;
        let f = |x| activation_value(kind, x);
        for t in ts {
            let d = l + t * (u - l);
            let tangent = ScalarLine::through(d, f(d), activation_slope(kind, d));
            let mut cands = vec![tangent];
            if d > l && d <= u {
                cands.push(ScalarLine::through(l, f(l), (f(d) - f(l)) / (d - l)));
            }
            if d < u && d >= l {
                cands.push(ScalarLine::through(u, f(u), (f(u) - f(d)) / (u - d)));
            }
            for c in cands {
                if line_exact_violation(kind, &c, l, u, true) <= 0.0 {
                    prop_assert!(r.upper.eval(m) <= c.eval(m) + 1e-9);
                }
                if line_exact_violation(kind, &c, l, u, false) <= 0.0 {
                    prop_assert!(-r.lower.eval(m) <= -c.eval(m) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn maxpool_plane_is_vertex_sound((l, u) in window(9)) {
        let p = maxpool_relax(&l, &u);
        prop_assert!(verify_plane_sound(&p.coeffs, p.intercept, &l, &u).unwrap());
        prop_assert!(p.coeffs.iter().all(|a| (0.0..=1.0).contains(a)));
        if let Some((i, j)) = p.case.diagonal_pair() {
            let mut c1 = l.clone();
            c1[i] = u[i];
            let mut c2 = l.clone();
            c2[j] = u[j];
            for corner in [c1, c2] {
                prop_assert!((p.upper_at(&corner) - max(&corner)).abs() <= 1e-12, "{:?}", p.case);
            }
        }
        if let PoolCase::Dominant { i } = p.case {
            prop_assert!((p.upper_at(&u) - u[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn maxpool_lower_is_best_selector_at_midpoint((l, u) in window(9)) {
        let p = maxpool_relax(&l, &u);
        let mid: Vec<f64> = l.iter().zip(&u).map(|(a, b)| 0.5 * (a + b)).collect();
        prop_assert!(mid.iter().all(|&v| v <= mid[p.lower_index]));
        prop_assert!(p.lower_at(&mid) <= max(&mid));
    }

    #[test]
    fn quadrature_matches_midpoint_identity(
        (l, u) in window(4),
        a in prop::collection::vec(-3.0..3.0f64, 4),
        b in -3.0..3.0f64,
    ) {
        let n = l.len();
        let plane = |x: &[f64]| x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>() + b;
        let mid: Vec<f64> = l.iter().zip(&u).map(|(p, q)| 0.5 * (p + q)).collect();
        let volume: f64 = l.iter().zip(&u).map(|(p, q)| q - p).product();
        let integral = box_quadrature(plane, &l, &u, 3);
        prop_assert!((integral - volume * plane(&mid[..n])).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagation_contains_sampled_activations(
        seed in any::<u64>(),
        kind in kind(),
        norm in norm(),
        depth in 1usize..=3,
        pool in any::<bool>(),
        eps in prop::sample::select(vec![0.01, 0.1, 0.5]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = RandomNetSpec {
            input_dim: 3,
            hidden: vec![6; depth],
            classes: 3,
            kind,
            pool,
            weight_scale: 2.0,
        };
        let net = random_network(&spec, &mut rng).unwrap();
        let ball = PerturbationBall::new(vec![0.3, -0.2, 0.1], eps, norm).unwrap();
        for policy in [AnchorPolicy::Forward, AnchorPolicy::Midpoint] {
            let (bounds, _) = compute_all_bounds(&net, &ball, policy).unwrap();
            let report = tilin_core::oracle::soundness_check(&net, &bounds, &ball, 2_000, seed, 1e-7).unwrap();
            prop_assert!(report.passed(), "{:?}", report);
        }
    }

    #[test]
    fn first_layer_bounds_grow_with_radius(
        seed in any::<u64>(),
        kind in kind(),
        norm in norm(),
        e1 in 0.0..0.5f64,
        extra in 0.0..0.5f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = RandomNetSpec {
            input_dim: 3,
            hidden: vec![5, 5],
            classes: 2,
            kind,
            pool: false,
            weight_scale: 2.0,
        };
        let net = random_network(&spec, &mut rng).unwrap();
        let small = PerturbationBall::new(vec![0.2, 0.1, -0.4], e1, norm).unwrap();
        let large = PerturbationBall::new(vec![0.2, 0.1, -0.4], e1 + extra, norm).unwrap();
        for policy in [AnchorPolicy::Forward, AnchorPolicy::Midpoint] {
            let (b1, _) = compute_all_bounds(&net, &small, policy).unwrap();
            let (b2, _) = compute_all_bounds(&net, &large, policy).unwrap();
            prop_assert!(b2[0].contains_bounds(&b1[0], 1e-12));
            // Deeper layers need not nest, but the wider bounds stay sound on
            // the smaller ball.
            let report = tilin_core::oracle::soundness_check(&net, &b2, &small, 500, seed, 1e-7).unwrap();
            prop_assert!(report.passed());
        }
    }

    #[test]
    fn affine_networks_are_exact(seed in any::<u64>(), norm in norm(), eps in 0.0..2.0f64) {
        use ndarray::Array2;
        use rand::Rng;
        use tilin_core::model::{Affine, Layer, Network};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let (w1, w2) = (mat(4, 3), mat(2, 4));
        let (b1, b2) = (mat(4, 1).column(0).to_owned(), mat(2, 1).column(0).to_owned());
        let net = Network::new(3, vec![
            Layer::Affine(Affine::new(w1.clone(), b1.clone()).unwrap()),
            Layer::Affine(Affine::new(w2.clone(), b2.clone()).unwrap()),
        ]).unwrap();
        let x0 = [0.5, -0.1, 0.2];
        let ball = PerturbationBall::new(x0.to_vec(), eps, norm).unwrap();
        let (bounds, _) = compute_all_bounds(&net, &ball, AnchorPolicy::Forward).unwrap();
        let a = w2.dot(&w1);
        let c = w2.dot(&b1) + &b2;
        for i in 0..2 {
            let row: Vec<f64> = a.row(i).to_vec();
            let centre: f64 = row.iter().zip(&x0).map(|(p, q)| p * q).sum::<f64>() + c[i];
            let spread = eps * norm.dual().of(&row);
            prop_assert!((bounds[1].upper[i] - (centre + spread)).abs() <= 1e-12);
            prop_assert!((bounds[1].lower[i] - (centre - spread)).abs() <= 1e-12);
        }
    }

    #[test]
    fn policies_agree_when_anchor_is_the_midpoint(seed in any::<u64>(), kind in kind(), norm in norm()) {
        // One hidden layer fed by a symmetric ball: the hidden pre-activation
        // interval is centred on its forward value, so both anchors coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = RandomNetSpec {
            input_dim: 3,
            hidden: vec![6],
            classes: 3,
            kind,
            pool: false,
            weight_scale: 2.0,
        };
        let net = random_network(&spec, &mut rng).unwrap();
        let ball = PerturbationBall::new(vec![0.25, -0.5, 0.75], 0.125, norm).unwrap();
        let (_, fwd) = compute_all_bounds(&net, &ball, AnchorPolicy::Forward).unwrap();
        let (_, mid) = compute_all_bounds(&net, &ball, AnchorPolicy::Midpoint).unwrap();
        let (Some(tilin_core::propagate::LayerRelaxation::Activation { neurons: a, .. }),
             Some(tilin_core::propagate::LayerRelaxation::Activation { neurons: b, .. })) =
            (fwd.get(1), mid.get(1)) else { panic!("missing activation cache") };
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x.anchor - y.anchor).abs() <= 1e-12);
            prop_assert!(x.upper_rule.same_branch(&y.upper_rule));
            prop_assert!(x.lower_rule.same_branch(&y.lower_rule));
        }
    }

    #[test]
    fn search_trace_is_consistent(seed in any::<u64>(), kind in kind(), norm in norm()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = RandomNetSpec {
            input_dim: 3,
            hidden: vec![5],
            classes: 3,
            kind,
            pool: false,
            weight_scale: 2.0,
        };
        let net = random_network(&spec, &mut rng).unwrap();
        let x0 = [0.1, 0.4, -0.3];
        let t = net.predict(&x0).unwrap();
        let config = CertificationConfig { norm, ..Default::default() };
        let report = certified_radius(&net, &x0, t, 0, &config).unwrap();
        prop_assert_eq!(report.trace.len(), 15);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for entry in &report.trace {
            let competitor = entry.max_gamma_u.unwrap();
            prop_assert_eq!(entry.robust, entry.gamma_l_t >= competitor);
            let log_eps = entry.eps.ln();
            if entry.robust {
                prop_assert!(log_eps >= lo);
                lo = log_eps;
            } else {
                prop_assert!(log_eps <= hi);
                hi = log_eps;
            }
            prop_assert!(lo < hi);
        }
        let proven = report.trace.iter().filter(|e| e.robust).map(|e| e.eps).fold(0.0, f64::max);
        prop_assert_eq!(report.eps_cert, proven);
        let again = certified_radius(&net, &x0, t, 0, &config).unwrap();
        prop_assert_eq!(again.trace, report.trace);
    }
}

#[test]
fn relaxation_shrinks_quadratically() {
    for kind in ActivationKind::S_SHAPED {
        for centre in [-1.3, 0.7, 2.1] {
            // Largest gap between either line and f over the interval.
            let deviation = |w: f64| {
                let (l, u) = (centre - w / 2.0, centre + w / 2.0);
                let r = sshape_bounds(kind, l, u, centre);
                (0..=200)
                    .map(|i| {
                        let x = l + w * i as f64 / 200.0;
                        let f = activation_value(kind, x);
                        (r.upper.eval(x) - f).abs().max((r.lower.eval(x) - f).abs())
                    })
                    .fold(0.0, f64::max)
            };
            let (d2, d3, d4) = (deviation(1e-2), deviation(1e-3), deviation(1e-4));
            for ratio in [d2 / d3, d3 / d4] {
                assert!((80.0..=125.0).contains(&ratio), "{kind} at {centre}: {ratio}");
            }
        }
    }
}

#[test]
fn midpoint_area_beats_parallel_chords() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    use rand::Rng;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-8.0..8.0);
        let b: f64 = rng.random_range(-8.0..8.0);
        let (l, u) = if a < b { (a, b) } else { (b, a) };
        if u - l < 1e-3 {
            continue;
        }
        let kind = ActivationKind::Sigmoid;
        let r = relax(kind, l, u, 0.0, AnchorPolicy::Midpoint);
        let k = (activation_value(kind, u) - activation_value(kind, l)) / (u - l);
        // Parallel chord pair: shift the chord up and down to the extreme gaps.
        let gaps: Vec<f64> = (0..=1000)
            .map(|i| {
                let x = l + (u - l) * i as f64 / 1000.0;
                activation_value(kind, x) - k * x
            })
            .collect();
        let mut pair = r;
        pair.upper = ScalarLine::new(k, gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        pair.lower = ScalarLine::new(k, gaps.iter().copied().fold(f64::INFINITY, f64::min));
        if relaxation_grid_violation(kind, &pair, 1000) <= 0.0 {
            assert!(relaxation_area(&r) <= relaxation_area(&pair) + 1e-9, "[{l}, {u}]");
        }
    }
}

#[test]
fn adaptive_lines_break_nesting_across_radii() {
    // A hidden ReLU whose interval midpoint turns negative at the larger
    // radius switches its lower line from x to 0, which tightens the output
    // upper bound: the larger radius does not yield a superset.
    let mut rng = ChaCha8Rng::seed_from_u64(13_663_090_140_023_571_391);
    let spec = RandomNetSpec {
        input_dim: 3,
        hidden: vec![5, 5],
        classes: 2,
        kind: ActivationKind::Relu,
        pool: false,
        weight_scale: 2.0,
    };
    let net = random_network(&spec, &mut rng).unwrap();
    let centre = vec![0.2, 0.1, -0.4];
    let small = PerturbationBall::new(centre.clone(), 0.403_353_890_858_844_65, Norm::L1).unwrap();
    let large = PerturbationBall::new(centre, 0.583_825_100_501_325_7, Norm::L1).unwrap();
    let (b1, _) = compute_all_bounds(&net, &small, AnchorPolicy::Midpoint).unwrap();
    let (b2, _) = compute_all_bounds(&net, &large, AnchorPolicy::Midpoint).unwrap();
    assert!(b2[4].upper[1] < b1[4].upper[1]);
    for (ball, bounds) in [(&small, &b1), (&large, &b2)] {
        let report = tilin_core::oracle::soundness_check(&net, bounds, ball, 20_000, 3, 1e-7).unwrap();
        assert!(report.passed());
    }
}
