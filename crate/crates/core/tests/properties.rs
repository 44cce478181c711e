use proptest::prelude::*;

use paired_surface::cli::regular_grid;
use paired_surface::inference::{chisq_sf, edf_to_basis_size, mixture_chisq_sf};
use paired_surface::simulation::clopper_pearson;
use paired_surface::tps::tps_radial;

proptest! {
    #[test]
    fn mixture_lies_between_components(x in 0.01f64..400.0, nu in 1usize..120) {
        let (lo, mid, hi) = (chisq_sf(x, nu), mixture_chisq_sf(x, nu), chisq_sf(x, nu + 1));
        prop_assert!(lo <= mid + 1e-15 && mid <= hi + 1e-15);
    }

    #[test]
    fn basis_size_respects_floor(edf in 0.0f64..60.0) {
        let (k, floored) = edf_to_basis_size(edf, 3);
        prop_assert!(k >= 4);
        prop_assert_eq!(floored, (edf + 0.5).floor() < 4.0);
        if !floored {
            prop_assert!((k as f64 - edf).abs() <= 0.5);
        }
    }

    #[test]
    fn interval_covers_estimate(trials in 1usize..500, frac in 0.0f64..=1.0) {
        let s = ((trials as f64) * frac).round() as usize;
        let (lo, hi) = clopper_pearson(s, trials, 0.95);
        let p = s as f64 / trials as f64;
        prop_assert!(lo <= p && p <= hi);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }

    #[test]
    fn grid_size(res in 1usize..30) {
        prop_assert_eq!(regular_grid([0.0, 1.0, 0.0, 1.0], res).len(), res * res);
    }

    #[test]
    fn kernel_sign(r in 0.0f64..10.0) {
        let v = tps_radial(r).unwrap();
        let sign_ok = if r < 1.0 { v <= 0.0 } else { v >= 0.0 };
        prop_assert!(sign_ok);
    }
}
