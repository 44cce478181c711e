//! Brute-force references shared by the integration tests. Everything here
//! forms dense matrices explicitly and inverts them with LU, independently
//! of the library's factorizations.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use paired_surface::data::{LongitudinalDataset, Observation};
use paired_surface::design::AssembledDesign;
use paired_surface::lmm::VarianceComponents;

/// Small irregular dataset; times are jittered so CAR(1) gaps vary.
pub fn random_dataset(m: usize, n: usize, groups: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    for i in 0..m {
        let shift: f64 = rng.random_range(-1.0..1.0);
        let mut t = 0.0;
        for j in 0..n {
            t += rng.random_range(0.5..1.5);
            let w: f64 = rng.random();
            let h: f64 = rng.random();
            obs.push(Observation {
                subject_id: format!("s{i:03}"),
                visit_index: j + 1,
                time: t,
                y1: 3.0 * w * w + h + shift + rng.random_range(-0.5..0.5),
                y2: (2.0 * h).sin() + w + 0.5 * shift + rng.random_range(-0.5..0.5),
                w,
                h,
                parametric: vec![rng.random_range(60.0..90.0)],
                group: 1 + (i * groups) / m,
            });
        }
    }
    LongitudinalDataset::new(obs, vec!["hr".into()]).unwrap()
}

pub fn random_tau(design: &AssembledDesign, car1: bool, seed: u64) -> VarianceComponents {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = |o| design.penalized_smooths().filter(|s| s.outcome == o).count();
    let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let log_lambda = draw(per(0));
    let log_varphi = draw(per(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    VarianceComponents {
        log_lambda,
        log_varphi,
        sigma1_sq: rng.random_range(0.3..2.0),
        sigma2_sq: rng.random_range(0.3..2.0),
        rho: rng.random_range(-0.8..0.8),
        sigma_eps_sq: rng.random_range(0.2..1.5),
        delta: rng.random_range(0.6..1.4),
        ar_corr: car1.then(|| rng.random_range(0.05..0.8)),
    }
}

/// Error covariance `R` (2N x 2N).
pub fn dense_r(design: &AssembledDesign, tau: &VarianceComponents) -> DMatrix<f64> {
    let n = design.n_obs();
    let mut corr = DMatrix::zeros(n, n);
    for s in &design.subjects {
        for a in s.rows() {
            for b in s.rows() {
                let phi = tau.ar_corr.unwrap_or(0.0);
                corr[(a, b)] = phi.powf((design.times[a] - design.times[b]).abs());
            }
        }
    }
    let scale = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, tau.delta * tau.delta]);
    scale.kronecker(&corr) * tau.sigma_eps_sq
}

/// Subject part `Z_u (Sigma_u x I_m) Z_u'`.
pub fn dense_subject_part(design: &AssembledDesign, tau: &VarianceComponents) -> DMatrix<f64> {
    let su = tau.sigma_u();
    let su = DMatrix::from_row_slice(2, 2, &[su[0][0], su[0][1], su[1][0], su[1][1]]);
    let m = design.num_subjects();
    let g = su.kronecker(&DMatrix::<f64>::identity(m, m));
    let z = design.subject_matrix();
    &z * g * z.transpose()
}

pub fn dense_v(design: &AssembledDesign, tau: &VarianceComponents) -> DMatrix<f64> {
    let mut v = dense_r(design, tau) + dense_subject_part(design, tau);
    let zs = design.spline_matrix();
    if zs.ncols() > 0 {
        let mut lam_inv = DVector::zeros(zs.ncols());
        for (s, lam) in design.penalized_smooths().zip(tau.smoothing()) {
            for j in s.penalized_cols.clone() {
                lam_inv[j] = 1.0 / lam;
            }
        }
        v += &zs * DMatrix::from_diagonal(&lam_inv) * zs.transpose();
    }
    v
}

pub fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().try_inverse().expect("invertible")
}

pub fn log_det(a: &DMatrix<f64>) -> f64 {
    let d = a.clone().lu().determinant();
    assert!(d > 0.0);
    d.ln()
}

pub struct DenseFit {
    pub theta: DVector<f64>,
    pub reml: f64,
    pub ml: f64,
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn dense_fit(design: &AssembledDesign, tau: &VarianceComponents) -> DenseFit {
    let v = dense_v(design, tau);
    let vi = inv(&v);
    let x = design.fixed_matrix();
    let y = &design.y;
    let xvx = x.transpose() * &vi * &x;
    let theta = inv(&xvx) * x.transpose() * &vi * y;
    let r = y - &x * &theta;
    let quad = (r.transpose() * &vi * &r)[(0, 0)];
    let ld = log_det(&v);
    let reml = -0.5 * (ld + log_det(&xvx) + quad);
    let ml = -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + quad);
    let vir = &vi * &r;
    let su = tau.sigma_u();
    let su = DMatrix::from_row_slice(2, 2, &[su[0][0], su[0][1], su[1][0], su[1][1]]);
    let m = design.num_subjects();
    let g = su.kronecker(&DMatrix::<f64>::identity(m, m));
    let uvec = g * design.subject_matrix().transpose() * &vir;
    let u = DMatrix::from_fn(m, 2, |i, l| uvec[l * m + i]);
    let zs = design.spline_matrix();
    let mut b = zs.transpose() * &vir;
    for (s, lam) in design.penalized_smooths().zip(tau.smoothing()) {
        for j in s.penalized_cols.clone() {
            b[j] /= lam;
        }
    }
    DenseFit { theta, reml, ml, u, b }
}

/// EDF per surface from the influence-matrix trace with the splines moved
/// into the penalty.
pub fn dense_edf(design: &AssembledDesign, tau: &VarianceComponents) -> Vec<f64> {
    let v0 = dense_r(design, tau) + dense_subject_part(design, tau);
    let v0i = inv(&v0);
    let x = design.fixed_matrix();
    let zs = design.spline_matrix();
    let (p, q) = (x.ncols(), zs.ncols());
    let mut xc = DMatrix::zeros(x.nrows(), p + q);
    xc.columns_mut(0, p).copy_from(&x);
    xc.columns_mut(p, q).copy_from(&zs);
    let mut s = DMatrix::zeros(p + q, p + q);
    for (sm, lam) in design.penalized_smooths().zip(tau.smoothing()) {
        for j in sm.penalized_cols.clone() {
            s[(p + j, p + j)] = lam;
        }
    }
    let a = xc.transpose() * &v0i * &xc;
    let f = inv(&(&a + &s)) * &a;
    design
        .smooths
        .iter()
        .map(|sm| {
            let fixed: f64 = sm.fixed_cols.iter().map(|&c| f[(c, c)]).sum();
            let pen: f64 = sm.penalized_cols.clone().map(|j| f[(p + j, p + j)]).sum();
            fixed + pen
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
