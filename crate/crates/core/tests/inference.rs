mod common;

use paired_surface::cli::regular_grid;
use paired_surface::design::{null_and_full_specs, Criterion, ModelSpec};
use paired_surface::inference::{adjusted_lrt, BootstrapSampler};
use paired_surface::lmm::{fit, fit_with, FitOptions, Fitter};
use paired_surface::data::{LongitudinalDataset, Observation};
use paired_surface::design::assemble;
use paired_surface::simulation::{simulate_dataset, SimConfig};

fn small_null_data() -> LongitudinalDataset {
    let cfg = SimConfig {
        m: 16,
        n: 6,
        basis_k: 8,
        ..SimConfig::default()
    };
    simulate_dataset(&cfg, 0).unwrap()
}

#[test]
fn bootstrap_sample_invariants() {
    let ds = small_null_data();
    let (null_spec, _) = null_and_full_specs(&ModelSpec::group_specific(2).with_k(8)).unwrap();
    let opts = FitOptions {
        criterion: Some(Criterion::Ml),
        intervals: false,
        ..FitOptions::default()
    };
    let null = fit_with(&ds, &null_spec, &opts).unwrap();
    let sampler = BootstrapSampler::new(&null, &ds, 42);
    let s = sampler.sample(3);
    let n = ds.len();
    assert_eq!(s, sampler.sample(3));
    assert_ne!(s.y, sampler.sample(4).y);
    for (i, span) in ds.subjects().iter().enumerate() {
        let drawn = null.subject_effects[s.subject_draws[i]];
        for r in span.rows() {
            for l in 0..2 {
                let k = l * n + r;
                assert!(s.multipliers[k] == 1.0 || s.multipliers[k] == -1.0);
                // both outcomes of a subject take the same drawn pair
                let resid = s.y[k] - null.fitted_mu[l][r] - drawn[l];
                assert!((resid.abs() - null.residuals[l][r].abs()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lrt_invariant_to_axis_rescaling() {
    let ds = small_null_data();
    let spec = ModelSpec::group_specific(2).with_k(8);
    let a = adjusted_lrt(&ds, &spec, 1).unwrap();
    let b = adjusted_lrt(&ds.scale_w(1000.0), &spec, 1).unwrap();
    assert_eq!(a.nu, b.nu);
    assert!((a.statistic - b.statistic).abs() < 1e-4 * (1.0 + a.statistic.abs()), "{} vs {}", a.statistic, b.statistic);
}

#[test]
fn edf_decreases_with_smoothing() {
    let ds = common::random_dataset(12, 6, 2, 5);
    let design = assemble(&ds, &ModelSpec::group_specific(2).with_k(10)).unwrap();
    let fitter = Fitter::new(design.clone()).unwrap();
    let mut tau = common::random_tau(&design, false, 2);
    let mut last = f64::INFINITY;
    for log_lam in [-6.0, -2.0, 0.0, 2.0, 6.0, 12.0] {
        tau.log_lambda.iter_mut().for_each(|l| *l = log_lam);
        tau.log_varphi.iter_mut().for_each(|l| *l = log_lam);
        let opts = FitOptions {
            fixed: Some(tau.clone()),
            intervals: false,
            ..FitOptions::default()
        };
        let edf = fitter.fit(&opts).unwrap().total_edf();
        assert!(edf < last, "{edf} >= {last}");
        last = edf;
    }
    // heavy smoothing leaves the null spaces: 3 per surface
    assert!((last - 12.0).abs() < 0.05, "{last}");
}

#[test]
fn plane_is_recovered_within_standard_errors() {
    let mut obs = Vec::new();
    let mut k = 0u64;
    let mut next = || {
        k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (k >> 11) as f64 / (1u64 << 53) as f64
    };
    for i in 0..40 {
        let shift = next() - 0.5;
        for j in 0..6 {
            let (w, h) = (next(), next());
            obs.push(Observation {
                subject_id: format!("p{i:02}"),
                visit_index: j + 1,
                time: j as f64,
                y1: 1.0 + 2.0 * w + 3.0 * h + shift + 0.3 * (next() - 0.5),
                y2: -1.0 + w - h + shift + 0.3 * (next() - 0.5),
                w,
                h,
                parametric: Vec::new(),
                group: 1 + i % 2,
            });
        }
    }
    let ds = LongitudinalDataset::new(obs, Vec::new()).unwrap();
    let model = fit(&ds, &ModelSpec::group_specific(2).with_k(10)).unwrap();
    let grid = regular_grid([0.2, 0.8, 0.2, 0.8], 5);
    for g in 1..=2 {
        let pred = model.predict_surface(g, 1, &grid).unwrap();
        let inside = pred
            .iter()
            .filter(|p| (p.fit - (1.0 + 2.0 * p.w + 3.0 * p.h)).abs() <= 3.0 * p.se)
            .count();
        assert!(inside >= 23, "group {g}: {inside}/25 within 3 SE");
        assert!(pred.iter().all(|p| !p.extrapolated));
    }
    assert!(model.predict_surface(3, 1, &grid).is_err());
    assert!(model.predict_surface(1, 3, &grid).is_err());
}

#[test]
fn grid_layout() {
    let g = regular_grid([0.0, 1.0, 10.0, 20.0], 2);
    assert_eq!(g, vec![[0.0, 10.0], [1.0, 10.0], [0.0, 20.0], [1.0, 20.0]]);
}
