//! Low-rank bivariate thin plate regression splines.
//!
//! A surface is represented as
//!
//! ```text
//! f(u) = a0 + a1 u1 + a2 u2 + sum_k delta_k eta(|u - x_k|),   T' delta = 0
//! ```
//!
//! where `u` is the covariate pair after per-axis standardization, `x_k` are
//! knots and `T` holds `(1, x_k1, x_k2)` rows. The side constraint is absorbed
//! with an orthonormal basis `N` of the null space of `T'`, so `delta = N z`
//! and the roughness `J(f) = delta' E delta = z' S z / 2` with `S = 2 N' E N`.
//! Finally `z = L^{-T} b` where `S = L L'`, so the penalized coordinates `b`
//! carry the identity penalty `J(f) = b'b / 2`.
//!
//! Columns of an evaluated basis are ordered null space first
//! (`1, u1, u2`; the constant is dropped for centered bases) followed by the
//! penalized columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::f64::consts::PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis dimension {0} is below the minimum of 4")]
    DimensionTooSmall(usize),
    #[error("need at least {needed} distinct covariate pairs, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("covariate pairs are collinear or constant; thin plate system is singular")]
    DegenerateGeometry,
    #[error("penalty matrix is numerically rank deficient")]
    SingularPenalty,
    #[error("negative distance {0} passed to the radial kernel")]
    NegativeDistance(f64),
    #[error("coefficient vector has length {found}, basis has {expected} columns")]
    LengthMismatch { expected: usize, found: usize },
}

/// Thin plate kernel for two dimensions and second-order penalty,
/// `r^2 log(r) / (8 pi)` with the limit value 0 at the origin.
pub fn tps_radial(r: f64) -> Result<f64, BasisError> {
    if r < 0.0 || r.is_nan() {
        return Err(BasisError::NegativeDistance(r));
    }
    Ok(eta(r))
}

#[inline]
pub(crate) fn eta(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * PI)
    }
}

/// Which coordinates the non-null columns are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Penalty is the identity (`J = b'b/2`); used for penalized smooths.
    IdentityPenalty,
    /// Constraint-absorbed radial coordinates `z`; better conditioned when
    /// the columns enter as ordinary fixed effects.
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Centering {
    mean_point: [f64; 2],
    mean_radial: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceBasis {
    knots: Vec<[f64; 2]>,
    shift: [f64; 2],
    scale: [f64; 2],
    /// Orthonormal basis of `{delta : T' delta = 0}`, K x (K-3).
    constraint_null: DMatrix<f64>,
    /// Full-rank penalty `S` on the constrained coordinates.
    penalty: DMatrix<f64>,
    /// `L^{-T}`, maps identity-penalty coordinates to constrained ones.
    transform: DMatrix<f64>,
    centering: Option<Centering>,
}

impl SurfaceBasis {
    pub fn num_knots(&self) -> usize {
        self.knots.len()
    }

    /// Knots in standardized coordinates, in selection order.
    pub fn knots(&self) -> &[[f64; 2]] {
        &self.knots
    }

    pub fn shift_scale(&self) -> ([f64; 2], [f64; 2]) {
        (self.shift, self.scale)
    }

    pub fn is_centered(&self) -> bool {
        self.centering.is_some()
    }

    /// Number of columns of an evaluated basis.
    pub fn basis_dim(&self) -> usize {
        self.null_dim() + self.penalized_dim()
    }

    pub fn null_dim(&self) -> usize {
        if self.is_centered() {
            2
        } else {
            3
        }
    }

    pub fn penalized_dim(&self) -> usize {
        self.knots.len() - 3
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.shift[0]) / self.scale[0],
            (p[1] - self.shift[1]) / self.scale[1],
        ]
    }

    fn radial_row(&self, u: [f64; 2]) -> DVector<f64> {
        DVector::from_iterator(
            self.knots.len(),
            self.knots.iter().map(|k| eta(dist(u, *k))),
        )
    }

    /// Evaluates the basis in the identity-penalty parameterization.
    pub fn eval_basis(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        self.eval(points, Parameterization::IdentityPenalty)
    }

    pub fn eval(&self, points: &[[f64; 2]], param: Parameterization) -> DMatrix<f64> {
        let nd = self.null_dim();
        let pd = self.penalized_dim();
        let map = match param {
            Parameterization::IdentityPenalty => &self.constraint_null * &self.transform,
            Parameterization::Constrained => self.constraint_null.clone(),
        };
        let mut out = DMatrix::zeros(points.len(), nd + pd);
        let mut radial = DMatrix::zeros(points.len(), self.knots.len());
        for (i, p) in points.iter().enumerate() {
            let u = self.normalize(*p);
            for (k, knot) in self.knots.iter().enumerate() {
                radial[(i, k)] = eta(dist(u, *knot));
            }
            match &self.centering {
                None => {
                    out[(i, 0)] = 1.0;
                    out[(i, 1)] = u[0];
                    out[(i, 2)] = u[1];
                }
                Some(c) => {
                    out[(i, 0)] = u[0] - c.mean_point[0];
                    out[(i, 1)] = u[1] - c.mean_point[1];
                }
            }
        }
        if let Some(c) = &self.centering {
            for mut row in radial.row_iter_mut() {
                row -= c.mean_radial.transpose();
            }
        }
        out.columns_mut(nd, pd).copy_from(&(radial * map));
        out
    }

    /// Roughness `J(f)` of the surface with the given coefficients
    /// (identity-penalty parameterization), computed through `S`.
    pub fn roughness(&self, coeffs: &[f64]) -> Result<f64, BasisError> {
        if coeffs.len() != self.basis_dim() {
            return Err(BasisError::LengthMismatch {
                expected: self.basis_dim(),
                found: coeffs.len(),
            });
        }
        let b = DVector::from_column_slice(&coeffs[self.null_dim()..]);
        let z = &self.transform * b;
        Ok(0.5 * z.dot(&(&self.penalty * &z)))
    }

    /// Expresses a coefficient vector as `(polynomial, delta)` in standardized
    /// coordinates: `f(u) = p0 + p1 u1 + p2 u2 + sum delta_k eta(|u - x_k|)`.
    pub fn radial_representation(&self, coeffs: &[f64]) -> ([f64; 3], Vec<f64>) {
        let nd = self.null_dim();
        let b = DVector::from_column_slice(&coeffs[nd..]);
        let delta = &self.constraint_null * (&self.transform * b);
        let poly = match &self.centering {
            None => [coeffs[0], coeffs[1], coeffs[2]],
            Some(c) => {
                let offset = -coeffs[0] * c.mean_point[0]
                    - coeffs[1] * c.mean_point[1]
                    - c.mean_radial.dot(&delta);
                [offset, coeffs[0], coeffs[1]]
            }
        };
        (poly, delta.iter().copied().collect())
    }

    /// Sum-to-zero version over `points`: the constant column is removed and
    /// every remaining column is shifted to have mean zero on `points`.
    pub fn center_constraint(&self, points: &[[f64; 2]]) -> SurfaceBasis {
        let n = points.len().max(1) as f64;
        let mut mean_point = [0.0; 2];
        let mut mean_radial = DVector::zeros(self.knots.len());
        for p in points {
            let u = self.normalize(*p);
            mean_point[0] += u[0] / n;
            mean_point[1] += u[1] / n;
            mean_radial += self.radial_row(u) / n;
        }
        let mut out = self.clone();
        out.centering = Some(Centering {
            mean_point,
            mean_radial,
        });
        out
    }

    /// Same knots and normalization with the first `k` knots only. Knot
    /// selection is greedy, so this equals `build_basis(points, k)` on the
    /// original points and the spanned function spaces are nested.
    pub fn truncated(&self, k: usize) -> Result<SurfaceBasis, BasisError> {
        let knots: Vec<[f64; 2]> = self.knots[..k.min(self.knots.len())].to_vec();
        let mut out = from_knots(knots, self.shift, self.scale)?;
        if let Some(c) = &self.centering {
            out.centering = Some(Centering {
                mean_point: c.mean_point,
                mean_radial: c.mean_radial.rows(0, out.knots.len()).into_owned(),
            });
        }
        Ok(out)
    }
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Builds a rank-`k` thin plate basis from covariate pairs.
///
/// Covariates are standardized per axis (mean 0, unit sd). Knots are a
/// farthest-point subsample of the distinct pairs, seeded at the pair
/// closest to the centroid; all ties break by lexicographic order, so the
/// result depends only on the multiset of input points.
pub fn build_basis(points: &[[f64; 2]], k: usize) -> Result<SurfaceBasis, BasisError> {
    if k < 4 {
        return Err(BasisError::DimensionTooSmall(k));
    }
    let mut sorted: Vec<[f64; 2]> = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let n = sorted.len() as f64;
    let mut shift = [0.0; 2];
    let mut scale = [0.0; 2];
    for axis in 0..2 {
        let mean = sorted.iter().map(|p| p[axis]).sum::<f64>() / n;
        let ss = sorted.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>();
        shift[axis] = mean;
        scale[axis] = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    }
    sorted.dedup();
    if sorted.len() < k {
        return Err(BasisError::TooFewPoints {
            needed: k,
            found: sorted.len(),
        });
    }
    if !(scale[0] > 0.0 && scale[1] > 0.0) {
        return Err(BasisError::DegenerateGeometry);
    }
    let unique: Vec<[f64; 2]> = sorted
        .iter()
        .map(|p| [(p[0] - shift[0]) / scale[0], (p[1] - shift[1]) / scale[1]])
        .collect();
    let knots = farthest_points(&unique, k);
    from_knots(knots, shift, scale)
}

fn farthest_points(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let first = points
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = a.1[0].hypot(a.1[1]);
            let db = b.1[0].hypot(b.1[1]);
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist(*p, points[first])).collect();
    while chosen.len() < k {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, d) in min_d.iter().enumerate() {
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        chosen.push(best);
        let b = points[best];
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(dist(*p, b));
        }
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

fn from_knots(
    knots: Vec<[f64; 2]>,
    shift: [f64; 2],
    scale: [f64; 2],
) -> Result<SurfaceBasis, BasisError> {
    let k = knots.len();
    if k < 4 {
        return Err(BasisError::DimensionTooSmall(k));
    }
    let t = DMatrix::from_fn(k, 3, |i, j| match j {
        0 => 1.0,
        1 => knots[i][0],
        _ => knots[i][1],
    });
    let sv = t.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-9 * smax) {
        return Err(BasisError::DegenerateGeometry);
    }
    // Householder Q' applied to the identity; rows 3.. span null(T').
    let qr = t.qr();
    let mut qt = DMatrix::<f64>::identity(k, k);
    qr.q_tr_mul(&mut qt);
    let constraint_null = qt.rows(3, k - 3).transpose();

    let e = DMatrix::from_fn(k, k, |i, j| eta(dist(knots[i], knots[j])));
    let mut penalty = constraint_null.transpose() * &e * &constraint_null * 2.0;
    penalty = (&penalty + penalty.transpose()) * 0.5;

    let eig = penalty.clone().symmetric_eigenvalues();
    let (emax, emin) = (eig.max(), eig.min());
    if !(emin > 1e-12 * emax.abs()) {
        return Err(BasisError::SingularPenalty);
    }
    let chol = penalty
        .clone()
        .cholesky()
        .ok_or(BasisError::SingularPenalty)?;
    let lt = chol.l().transpose();
    let transform = lt
        .solve_upper_triangular(&DMatrix::identity(k - 3, k - 3))
        .ok_or(BasisError::SingularPenalty)?;
    Ok(SurfaceBasis {
        knots,
        shift,
        scale,
        constraint_null,
        penalty,
        transform,
        centering: None,
    })
}
