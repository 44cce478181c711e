//! Marginal covariance of the stacked responses and the criteria defined
//! directly in terms of it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{LmmError, VarianceComponents};
use crate::design::AssembledDesign;

/// Something that can solve with and take the log-determinant of a
/// symmetric positive definite matrix.
pub trait Covariance {
    fn dim(&self) -> usize;
    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64>;
    fn log_det(&self) -> f64;

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let out = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(out.as_slice())
    }

    fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.solve_vec(x))
    }
}

/// A dense matrix held through its Cholesky factor.
pub struct DenseCovariance {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl DenseCovariance {
    pub fn new(v: DMatrix<f64>) -> Result<Self, LmmError> {
        let chol = v
            .cholesky()
            .ok_or_else(|| LmmError::NonPositiveDefinite("dense covariance".into()))?;
        let log_det = chol_log_det(&chol);
        Ok(Self { chol, log_det })
    }
}

impl Covariance for DenseCovariance {
    fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    fn log_det(&self) -> f64 {
        self.log_det
    }
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

struct SubjectBlock {
    rows: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
}

struct SplinePart {
    z: DMatrix<f64>,
    /// `W^{-1} Z_s`
    winv_z: DMatrix<f64>,
    /// Cholesky of `Lambda + Z_s' W^{-1} Z_s`
    inner: Cholesky<f64, Dyn>,
}

/// `V = W + Z_s Lambda^{-1} Z_s'` with `W` block diagonal over subjects,
/// solved through the per-subject factors and the Woodbury identity.
pub struct CovarianceOperator {
    dim: usize,
    blocks: Vec<SubjectBlock>,
    spline: Option<SplinePart>,
    log_det: f64,
}

impl CovarianceOperator {
    fn solve_w(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for block in &self.blocks {
            let local = b.select_rows(&block.rows);
            let x = block.chol.solve(&local);
            for (k, &r) in block.rows.iter().enumerate() {
                out.row_mut(r).copy_from(&x.row(k));
            }
        }
        out
    }

    /// Materializes `V`; intended for checks on small problems.
    pub fn dense(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim, self.dim))
            .try_inverse()
            .expect("inverse of a positive definite matrix")
    }
}

impl Covariance for CovarianceOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.solve_w(b);
        match &self.spline {
            None => x,
            Some(sp) => {
                let inner = sp.inner.solve(&sp.z.tr_mul(&x));
                x - &sp.winv_z * inner
            }
        }
    }

    fn log_det(&self) -> f64 {
        self.log_det
    }
}

fn check_counts(design: &AssembledDesign, tau: &VarianceComponents) -> Result<(), LmmError> {
    let per_outcome = |o| design.penalized_smooths().filter(|s| s.outcome == o).count();
    if tau.log_lambda.len() != per_outcome(0) || tau.log_varphi.len() != per_outcome(1) {
        return Err(LmmError::InvalidVariance(format!(
            "expected {} + {} smoothing parameters, found {} + {}",
            per_outcome(0),
            per_outcome(1),
            tau.log_lambda.len(),
            tau.log_varphi.len()
        )));
    }
    tau.validate()
}

/// Builds the marginal covariance operator of the stacked responses.
pub fn marginal_covariance(
    design: &AssembledDesign,
    tau: &VarianceComponents,
) -> Result<CovarianceOperator, LmmError> {
    check_counts(design, tau)?;
    let n = design.n_obs();
    let su = tau.sigma_u();
    let scale = [tau.sigma_eps_sq, tau.sigma_eps_sq * tau.delta * tau.delta];
    let phi = tau.ar_corr.unwrap_or(0.0);
    let mut blocks = Vec::with_capacity(design.num_subjects());
    let mut log_det = 0.0;
    for span in &design.subjects {
        let rows: Vec<usize> = span.rows().chain(span.rows().map(|r| r + n)).collect();
        let ni = span.len;
        let mut w = DMatrix::zeros(2 * ni, 2 * ni);
        for a in 0..2 * ni {
            for b in 0..2 * ni {
                let (oa, ob) = (a / ni, b / ni);
                let mut v = su[oa][ob];
                if oa == ob {
                    let dt = (design.times[span.start + a % ni] - design.times[span.start + b % ni]).abs();
                    v += scale[oa] * phi.powf(dt);
                }
                w[(a, b)] = v;
            }
        }
        let chol = w.cholesky().ok_or_else(|| {
            LmmError::NonPositiveDefinite(format!("subject block {}", blocks.len()))
        })?;
        log_det += chol_log_det(&chol);
        blocks.push(SubjectBlock { rows, chol });
    }
    let mut op = CovarianceOperator {
        dim: 2 * n,
        blocks,
        spline: None,
        log_det,
    };
    if design.num_penalized() > 0 {
        let lambdas = tau.smoothing();
        let z = design.spline_matrix();
        let winv_z = op.solve_w(&z);
        let mut inner = z.tr_mul(&winv_z);
        for (s, lam) in design.penalized_smooths().zip(&lambdas) {
            for j in s.penalized_cols.clone() {
                inner[(j, j)] += lam;
                op.log_det -= lam.ln();
            }
        }
        let inner = inner
            .cholesky()
            .ok_or_else(|| LmmError::NonPositiveDefinite("spline Woodbury core".into()))?;
        op.log_det += chol_log_det(&inner);
        op.spline = Some(SplinePart { z, winv_z, inner });
    }
    Ok(op)
}

/// `(X' V^{-1} X)^{-1} X' V^{-1} y`.
pub fn gls_fixed_effects<C: Covariance + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &C,
) -> Result<DVector<f64>, LmmError> {
    Ok(gls_parts(x, y, v)?.0)
}

fn gls_parts<C: Covariance + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &C,
) -> Result<(DVector<f64>, f64, f64), LmmError> {
    let vinv_x = v.solve(x);
    let xvx = x.tr_mul(&vinv_x);
    let chol = xvx.cholesky().ok_or(LmmError::RankDeficientX)?;
    let diag = chol.l_dirty().diagonal();
    if diag.min() <= 1e-7 * diag.max() {
        return Err(LmmError::RankDeficientX);
    }
    let theta = chol.solve(&vinv_x.tr_mul(y));
    let r = y - x * &theta;
    Ok((theta, v.quad_form(&r), chol_log_det(&chol)))
}

/// `-1/2 {log|V| + log|X' V^{-1} X| + r' V^{-1} r}` at the GLS estimate.
pub fn reml_value<C: Covariance + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &C,
) -> Result<f64, LmmError> {
    let (_, quad, log_det_xvx) = gls_parts(x, y, v)?;
    Ok(-0.5 * (v.log_det() + log_det_xvx + quad))
}

/// Gaussian log-likelihood at the GLS estimate.
pub fn ml_value<C: Covariance + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &C,
) -> Result<f64, LmmError> {
    let (_, quad, _) = gls_parts(x, y, v)?;
    let n = y.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + v.log_det() + quad))
}

pub fn reml_criterion(design: &AssembledDesign, tau: &VarianceComponents) -> Result<f64, LmmError> {
    let v = marginal_covariance(design, tau)?;
    reml_value(&design.fixed_matrix(), &design.y, &v)
}

pub fn ml_criterion(design: &AssembledDesign, tau: &VarianceComponents) -> Result<f64, LmmError> {
    let v = marginal_covariance(design, tau)?;
    ml_value(&design.fixed_matrix(), &design.y, &v)
}

/// GLS fixed effects and the BLUPs `Sigma_eta Z' V^{-1} (y - X theta)`.
/// Returns `(theta, subject effects (m x 2), penalized coefficients)`.
pub fn blups(
    design: &AssembledDesign,
    tau: &VarianceComponents,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), LmmError> {
    let v = marginal_covariance(design, tau)?;
    let x = design.fixed_matrix();
    let theta = gls_fixed_effects(&x, &design.y, &v)?;
    let r = v.solve_vec(&(&design.y - &x * &theta));
    let n = design.n_obs();
    let su = tau.sigma_u();
    let mut u = DMatrix::zeros(design.num_subjects(), 2);
    for (i, span) in design.subjects.iter().enumerate() {
        let s1: f64 = span.rows().map(|j| r[j]).sum();
        let s2: f64 = span.rows().map(|j| r[n + j]).sum();
        u[(i, 0)] = su[0][0] * s1 + su[0][1] * s2;
        u[(i, 1)] = su[1][0] * s1 + su[1][1] * s2;
    }
    let mut b = design.spline_matrix().tr_mul(&r);
    for (s, lam) in design.penalized_smooths().zip(tau.smoothing()) {
        for j in s.penalized_cols.clone() {
            b[j] /= lam;
        }
    }
    Ok((theta, u, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gls_weighted_mean() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![3.0, 5.0]);
        let v = DenseCovariance::new(DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(gls_fixed_effects(&x, &y, &v).unwrap()[0], 4.0, epsilon = 1e-14);
        let v = DenseCovariance::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])))
            .unwrap();
        assert_relative_eq!(gls_fixed_effects(&x, &y, &v).unwrap()[0], 3.4, epsilon = 1e-14);
    }

    #[test]
    fn criteria_on_two_points() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let v = DenseCovariance::new(DMatrix::identity(2, 2)).unwrap();
        let ones = DVector::from_vec(vec![1.0, 1.0]);
        assert_relative_eq!(reml_value(&x, &ones, &v).unwrap(), -0.5 * 2f64.ln(), epsilon = 1e-12);
        let y = DVector::from_vec(vec![0.0, 2.0]);
        assert_relative_eq!(
            reml_value(&x, &y, &v).unwrap(),
            -0.5 * (2f64.ln() + 2.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(ml_value(&x, &ones, &v).unwrap(), -1.8378770664093453, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_cross_product() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let v = DenseCovariance::new(DMatrix::identity(2, 2)).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(gls_fixed_effects(&x, &y, &v), Err(LmmError::RankDeficientX)));
    }
}
