use paired_surface::simulation::{simulate_dataset, test_function_f1, test_function_f2, SimConfig, Truth};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// With the surfaces and errors switched off the responses are the
/// intercepts plus the subject effects, so their moments are checkable.
#[test]
fn subject_effect_moments() {
    let cfg = SimConfig {
        m: 1000,
        n: 2,
        surface_scale: 0.0,
        sigma_eps: 1e-9,
        ..SimConfig::default()
    };
    let ds = simulate_dataset(&cfg, 3).unwrap();
    let (mut u1, mut u2) = (Vec::new(), Vec::new());
    for s in ds.subjects() {
        let o = &ds.observations()[s.rows().start];
        let z = (o.group != 1) as u8 as f64;
        u1.push(o.y1 - (cfg.intercepts[0] + z * cfg.intercepts[1]));
        u2.push(o.y2 - (cfg.intercepts[2] + z * cfg.intercepts[3]));
    }
    let (v1, v2, c) = (cov(&u1, &u1), cov(&u2, &u2), cov(&u1, &u2));
    assert!((v1 - 4.0).abs() < 0.6, "var u1 {v1}");
    assert!((v2 - 9.0).abs() < 1.3, "var u2 {v2}");
    let r = c / (v1 * v2).sqrt();
    assert!((r - 0.5).abs() < 0.08, "corr {r}");
}

/// Within-visit error correlation is zero and the outcome-2 error scale is
/// delta times the outcome-1 scale.
#[test]
fn error_moments() {
    let cfg = SimConfig {
        m: 400,
        n: 10,
        surface_scale: 0.0,
        sigma1: 1e-9,
        sigma2: 1e-9,
        ..SimConfig::default()
    };
    let ds = simulate_dataset(&cfg, 4).unwrap();
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    for o in ds.observations() {
        let z = (o.group != 1) as u8 as f64;
        e1.push(o.y1 - (cfg.intercepts[0] + z * cfg.intercepts[1]));
        e2.push(o.y2 - (cfg.intercepts[2] + z * cfg.intercepts[3]));
    }
    let (v1, v2) = (cov(&e1, &e1), cov(&e2, &e2));
    assert!((v1.sqrt() - 2.0).abs() < 0.06, "sd e1 {}", v1.sqrt());
    assert!((v2.sqrt() / v1.sqrt() - 0.8).abs() < 0.04);
    assert!((cov(&e1, &e2) / (v1 * v2).sqrt()).abs() < 0.05);
}

#[test]
fn group_specific_truth_swaps_surfaces() {
    let cfg = SimConfig {
        m: 10,
        n: 5,
        truth: Truth::GroupSpecificSurfaces,
        sigma1: 1e-9,
        sigma2: 1e-9,
        sigma_eps: 1e-9,
        ..SimConfig::default()
    };
    let ds = simulate_dataset(&cfg, 0).unwrap();
    let obs = ds.observations();
    let n = obs.len() as f64;
    let m1 = obs.iter().map(|o| test_function_f1(o.w, o.h)).sum::<f64>() / n;
    let m2 = obs.iter().map(|o| test_function_f2(o.w, o.h)).sum::<f64>() / n;
    for o in obs {
        let (f1, f2) = (test_function_f1(o.w, o.h) - m1, test_function_f2(o.w, o.h) - m2);
        let base1 = cfg.intercepts[0] + if o.group == 1 { 0.0 } else { cfg.intercepts[1] };
        let expect = if o.group == 1 { f1 } else { f2 };
        assert!((o.y1 - base1 - expect).abs() < 1e-6);
    }
}

#[test]
fn replicates_differ_but_repeat() {
    let cfg = SimConfig::default();
    let a = simulate_dataset(&cfg, 1).unwrap();
    let b = simulate_dataset(&cfg, 1).unwrap();
    let c = simulate_dataset(&cfg, 2).unwrap();
    assert_eq!(a.observations(), b.observations());
    assert_ne!(a.observations()[0].y1, c.observations()[0].y1);
}
