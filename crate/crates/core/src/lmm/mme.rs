//! Criterion evaluation through the mixed-model equations.
//!
//! Everything is expressed relative to `sigma_eps^2`: the relative subject
//! covariance `Sigma* = Sigma_u / sigma_eps^2`, the relative penalties
//! `lambda*_k = lambda_k sigma_eps^2` and `R* = diag(1, delta^2) x Corr`.
//! Columns of the combined coefficient vector `c` are ordered penalized
//! first, then fixed, so the leading `q x q` block of the Schur matrix
//! `M` is the random-effect part needed by ML.
//!
//! Subject effects are absorbed per subject (2 x 2 blocks), leaving
//!
//! ```text
//! M   = C' R*^{-1} C + diag(Lambda*, 0) - sum_i B_i' A_i^{-1} B_i
//! Q*  = y' R*^{-1} y - sum_i r_i' A_i^{-1} r_i - rhs' M^{-1} rhs
//! D   = log|R*| + m log|Sigma*| - sum_k q_k log lambda*_k + sum_i log|A_i| + log|M_t|
//! ```
//!
//! with `M_t = M` for REML and its leading block for ML. The profiled
//! criteria are `-2 l = F log(Q*/F) + D + F` (+ `n log 2 pi` for ML) with
//! `F = n - p` (REML) or `n` (ML).
//!
//! CAR(1) errors are handled by whitening each subject's rows with the
//! innovations `(x_j - a_j x_{j-1}) / sqrt(1 - a_j^2)`, `a_j = phi^(t_j - t_{j-1})`.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::covariance::chol_log_det;
use super::LmmError;
use crate::design::{AssembledDesign, Criterion};

/// Column bookkeeping for the combined coefficient vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n_obs: usize,
    pub m: usize,
    pub q: usize,
    pub p: usize,
    /// Local column (penalized then fixed, per outcome) to global index.
    pub idx: [Vec<usize>; 2],
    /// Global ranges of the penalized surfaces, in smoothing-parameter order.
    pub smooth_ranges: Vec<Range<usize>>,
    pub spans: Vec<Range<usize>>,
    pub times: Vec<f64>,
    /// Per outcome and subject, the local columns with a nonzero entry in
    /// that subject's rows; `None` when most columns are touched anyway.
    pub support: [Option<Vec<Vec<usize>>>; 2],
}

impl Layout {
    pub fn new(design: &AssembledDesign) -> Self {
        let q = design.num_penalized();
        let p = design.num_fixed();
        let idx = [0, 1].map(|o| {
            let pen = design.penalized_offset(o)..design.penalized_offset(o) + design.penalized_dim(o);
            let fixed = q + design.fixed_offset(o)..q + design.fixed_offset(o) + design.fixed_dim(o);
            pen.chain(fixed).collect::<Vec<_>>()
        });
        Self {
            n_obs: design.n_obs(),
            m: design.num_subjects(),
            q,
            p,
            idx,
            smooth_ranges: design.penalized_smooths().map(|s| s.penalized_cols.clone()).collect(),
            spans: design.subjects.iter().map(|s| s.rows()).collect(),
            times: design.times.clone(),
            support: [None, None],
        }
    }

    /// Records which columns of `raw` each subject touches, so that
    /// cross-products can skip the zero blocks of group-specific designs.
    pub fn with_support(mut self, raw: &[DMatrix<f64>; 2]) -> Self {
        for l in 0..2 {
            let x = &raw[l];
            let sup: Vec<Vec<usize>> = self
                .spans
                .iter()
                .map(|span| {
                    (0..x.ncols())
                        .filter(|&k| span.clone().any(|r| x[(r, k)] != 0.0))
                        .collect()
                })
                .collect();
            let touched: usize = sup.iter().map(|c| c.len()).sum();
            // dense products win unless subjects use a small share of columns
            if 2 * touched < self.m * x.ncols() {
                self.support[l] = Some(sup);
            }
        }
        self
    }

    pub fn c(&self) -> usize {
        self.q + self.p
    }

    pub fn n(&self) -> usize {
        2 * self.n_obs
    }

    /// Raw per-outcome column blocks `[penalized | fixed]`.
    pub fn raw_columns(design: &AssembledDesign) -> [DMatrix<f64>; 2] {
        [0, 1].map(|o| {
            let b = &design.blocks[o];
            let mut out = DMatrix::zeros(design.n_obs(), b.penalized.ncols() + b.fixed.ncols());
            out.columns_mut(0, b.penalized.ncols()).copy_from(&b.penalized);
            out.columns_mut(b.penalized.ncols(), b.fixed.ncols()).copy_from(&b.fixed);
            out
        })
    }

    /// Whitens the rows of `x` in place; returns `sum log|Corr_i|`.
    pub fn whiten(&self, x: &mut DMatrix<f64>, phi: Option<f64>) -> Result<f64, LmmError> {
        let Some(phi) = phi else { return Ok(0.0) };
        let mut log_det = 0.0;
        // (row, a_j, 1 / sqrt(1 - a_j^2)) for every non-leading row
        let mut steps = Vec::with_capacity(self.n_obs);
        for span in &self.spans {
            for j in span.start + 1..span.end {
                let a = phi.powf(self.times[j] - self.times[j - 1]);
                let v = 1.0 - a * a;
                if v <= 1e-14 {
                    return Err(LmmError::NonPositiveDefinite("CAR(1) correlation".into()));
                }
                log_det += v.ln();
                steps.push((j, a, 1.0 / v.sqrt()));
            }
        }
        for mut col in x.column_iter_mut() {
            for &(j, a, inv_s) in steps.iter().rev() {
                col[j] = (col[j] - a * col[j - 1]) * inv_s;
            }
        }
        Ok(log_det)
    }
}

/// Statistics that depend on the design and the correlation parameter.
pub(crate) struct DesignStats {
    pub phi: Option<f64>,
    pub cw: [DMatrix<f64>; 2],
    pub ones: DVector<f64>,
    pub s: [DMatrix<f64>; 2],
    pub a: [DMatrix<f64>; 2],
    pub d: DVector<f64>,
    pub log_det_corr: f64,
}

impl DesignStats {
    pub fn new(lay: &Layout, raw: &[DMatrix<f64>; 2], phi: Option<f64>) -> Result<Self, LmmError> {
        let mut cw = raw.clone();
        let mut log_det_corr = 0.0;
        for x in cw.iter_mut() {
            log_det_corr = lay.whiten(x, phi)?;
        }
        let mut ones = DMatrix::from_element(lay.n_obs, 1, 1.0);
        lay.whiten(&mut ones, phi)?;
        let ones = ones.column(0).into_owned();
        let s = [0, 1].map(|l| match &lay.support[l] {
            None => cw[l].tr_mul(&cw[l]),
            Some(sup) => sparse_cross(lay, &cw[l], sup),
        });
        let a = [0, 1].map(|l| {
            let mut a = DMatrix::<f64>::zeros(lay.m, cw[l].ncols());
            for (k, col) in cw[l].column_iter().enumerate() {
                for (i, span) in lay.spans.iter().enumerate() {
                    a[(i, k)] = span.clone().map(|j| ones[j] * col[j]).sum();
                }
            }
            a
        });
        let d = DVector::from_iterator(
            lay.m,
            lay.spans.iter().map(|sp| sp.clone().map(|j| ones[j] * ones[j]).sum()),
        );
        Ok(Self {
            phi,
            cw,
            ones,
            s,
            a,
            d,
            log_det_corr,
        })
    }
}

/// `X'X` accumulated subject by subject over the touched columns only.
fn sparse_cross(lay: &Layout, x: &DMatrix<f64>, support: &[Vec<usize>]) -> DMatrix<f64> {
    let c = x.ncols();
    let mut out = DMatrix::zeros(c, c);
    for (span, cols) in lay.spans.iter().zip(support) {
        let xi = DMatrix::from_fn(span.len(), cols.len(), |r, k| x[(span.start + r, cols[k])]);
        let gi = xi.tr_mul(&xi);
        for (a, &ca) in cols.iter().enumerate() {
            for (b, &cb) in cols.iter().enumerate() {
                out[(ca, cb)] += gi[(a, b)];
            }
        }
    }
    out
}

/// Response-dependent statistics for one correlation parameter.
pub(crate) struct ResponseStats {
    pub t: [DVector<f64>; 2],
    pub yy: [f64; 2],
    pub e: [DVector<f64>; 2],
}

impl ResponseStats {
    pub fn new(lay: &Layout, ds: &DesignStats, y: &[DVector<f64>; 2]) -> Result<Self, LmmError> {
        let yw = [0, 1].map(|l| {
            let mut m = DMatrix::from_column_slice(lay.n_obs, 1, y[l].as_slice());
            lay.whiten(&mut m, ds.phi).map(|_| m.column(0).into_owned())
        });
        let [y0, y1] = yw;
        let yw = [y0?, y1?];
        Ok(Self {
            t: [0, 1].map(|l| ds.cw[l].tr_mul(&yw[l])),
            yy: [0, 1].map(|l| yw[l].norm_squared()),
            e: [0, 1].map(|l| {
                DVector::from_iterator(
                    lay.m,
                    lay.spans
                        .iter()
                        .map(|sp| sp.clone().map(|j| ds.ones[j] * yw[l][j]).sum()),
                )
            }),
        })
    }
}

/// Relative variance parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RelParams {
    pub s1: f64,
    pub s2: f64,
    pub rho: f64,
    pub delta: f64,
    pub lam: Vec<f64>,
}

pub(crate) struct Evaluation {
    /// `D` as defined in the module docs.
    pub d_term: f64,
    pub q_star: f64,
    /// `n - p` (REML) or `n` (ML).
    pub f: f64,
    pub kind: Criterion,
    pub n: usize,
    pub chol: Cholesky<f64, Dyn>,
    /// Combined coefficients (penalized then fixed).
    pub coef: DVector<f64>,
    /// Subject effects, m x 2.
    pub u: DMatrix<f64>,
    /// Gradients of `D` and `Q*` with respect to
    /// `[log s1, log s2, atanh rho, log delta, log lambda*_k ...]`.
    pub grad: Option<(Vec<f64>, Vec<f64>)>,
}

impl Evaluation {
    /// `-2 l` with `sigma_eps^2` profiled out.
    pub fn profiled_m2ll(&self) -> f64 {
        let base = self.f * (self.q_star / self.f).ln() + self.d_term + self.f;
        base + self.constant()
    }

    /// `-2 l` at a given `sigma_eps^2`.
    pub fn m2ll_at(&self, sigma_sq: f64) -> f64 {
        self.f * sigma_sq.ln() + self.d_term + self.q_star / sigma_sq + self.constant()
    }

    fn constant(&self) -> f64 {
        match self.kind {
            Criterion::Ml => self.n as f64 * (2.0 * std::f64::consts::PI).ln(),
            Criterion::Reml => 0.0,
        }
    }

    pub fn sigma_sq(&self) -> f64 {
        self.q_star / self.f
    }

    /// Gradient of the profiled `-2 l`.
    pub fn profiled_gradient(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|(gd, gq)| {
            gd.iter()
                .zip(gq)
                .map(|(d, q)| d + self.f * q / self.q_star)
                .collect()
        })
    }

    pub fn m2ll_is_finite(&self) -> bool {
        self.q_star > 0.0 && self.profiled_m2ll().is_finite()
    }
}

fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&j| v[j]))
}

pub(crate) fn evaluate(
    lay: &Layout,
    ds: &DesignStats,
    rs: &ResponseStats,
    par: &RelParams,
    kind: Criterion,
    want_grad: bool,
) -> Result<Evaluation, LmmError> {
    let m = lay.m;
    let (s1, s2, rho) = (par.s1, par.s2, par.rho);
    let root = (s1 * s2).sqrt();
    let c12 = rho * root;
    let det_s = s1 * s2 - c12 * c12;
    if !(det_s > 0.0 && det_s.is_finite()) {
        return Err(LmmError::NonPositiveDefinite("subject covariance".into()));
    }
    let sinv = [[s2 / det_s, -c12 / det_s], [-c12 / det_s, s1 / det_s]];
    let dd = par.delta * par.delta;
    let scale = [1.0, 1.0 / dd];

    // Absorb the subject effects.
    let mut ainv = Vec::with_capacity(m);
    let mut v = DMatrix::zeros(m, 2);
    let mut log_det_a = 0.0;
    let mut r_quad = 0.0;
    for i in 0..m {
        let a00 = ds.d[i] + sinv[0][0];
        let a11 = ds.d[i] / dd + sinv[1][1];
        let a01 = sinv[0][1];
        let det = a00 * a11 - a01 * a01;
        log_det_a += det.ln();
        let w = [a11 / det, -a01 / det, a00 / det];
        let r0 = rs.e[0][i];
        let r1 = rs.e[1][i] / dd;
        v[(i, 0)] = w[0] * r0 + w[1] * r1;
        v[(i, 1)] = w[1] * r0 + w[2] * r1;
        r_quad += r0 * v[(i, 0)] + r1 * v[(i, 1)];
        ainv.push(w);
    }

    let c = lay.c();
    let mut mm = DMatrix::zeros(c, c);
    for l in 0..2 {
        let idx = &lay.idx[l];
        for (jj, &gj) in idx.iter().enumerate() {
            for (kk, &gk) in idx.iter().enumerate() {
                mm[(gj, gk)] = ds.s[l][(jj, kk)] * scale[l];
            }
        }
    }
    for (l1, l2, wk) in [(0, 0, 0), (0, 1, 1), (1, 1, 2)] {
        let mut aw = ds.a[l2].clone();
        for i in 0..m {
            aw.row_mut(i).scale_mut(ainv[i][wk] * scale[l1] * scale[l2]);
        }
        let prod = ds.a[l1].tr_mul(&aw);
        for (jj, &gj) in lay.idx[l1].iter().enumerate() {
            for (kk, &gk) in lay.idx[l2].iter().enumerate() {
                mm[(gj, gk)] -= prod[(jj, kk)];
                if l1 != l2 {
                    mm[(gk, gj)] -= prod[(jj, kk)];
                }
            }
        }
    }
    let mut log_lam = 0.0;
    for (range, &lam) in lay.smooth_ranges.iter().zip(&par.lam) {
        for j in range.clone() {
            mm[(j, j)] += lam;
        }
        log_lam += range.len() as f64 * lam.ln();
    }

    let mut rhs = DVector::zeros(c);
    for l in 0..2 {
        let local = &rs.t[l] * scale[l] - ds.a[l].tr_mul(&v.column(l)) * scale[l];
        for (jj, &gj) in lay.idx[l].iter().enumerate() {
            rhs[gj] = local[jj];
        }
    }

    let chol = mm
        .cholesky()
        .ok_or_else(|| LmmError::NonPositiveDefinite("mixed-model equations".into()))?;
    let ldiag = chol.l_dirty().diagonal();
    let log_det_full = chol_log_det(&chol);
    let log_det_q = 2.0 * ldiag.rows(0, lay.q).iter().map(|x| x.ln()).sum::<f64>();
    let coef = chol.solve(&rhs);
    let q_star = rs.yy[0] + rs.yy[1] / dd - r_quad - rhs.dot(&coef);

    let cl = [gather(&coef, &lay.idx[0]), gather(&coef, &lay.idx[1])];
    let ac = [&ds.a[0] * &cl[0], &ds.a[1] * &cl[1]];
    let mut u = DMatrix::zeros(m, 2);
    for i in 0..m {
        let g0 = ac[0][i];
        let g1 = ac[1][i] / dd;
        let w = ainv[i];
        u[(i, 0)] = v[(i, 0)] - (w[0] * g0 + w[1] * g1);
        u[(i, 1)] = v[(i, 1)] - (w[1] * g0 + w[2] * g1);
    }

    let n = lay.n();
    let log_r = 2.0 * ds.log_det_corr + n as f64 * par.delta.ln();
    let (f, log_det_m) = match kind {
        Criterion::Reml => ((n - lay.p) as f64, log_det_full),
        Criterion::Ml => (n as f64, log_det_q),
    };
    let d_term = log_r + m as f64 * det_s.ln() - log_lam + log_det_a + log_det_m;

    let grad = if want_grad {
        let t = match kind {
            Criterion::Reml => c,
            Criterion::Ml => lay.q,
        };
        Some(gradient(
            lay, ds, rs, par, &chol, t, &ainv, &u, &cl, &ac, &coef, sinv, dd,
        ))
    } else {
        None
    };

    Ok(Evaluation {
        d_term,
        q_star,
        f,
        kind,
        n,
        chol,
        coef,
        u,
        grad,
    })
}

#[allow(clippy::too_many_arguments)]
fn gradient(
    lay: &Layout,
    ds: &DesignStats,
    rs: &ResponseStats,
    par: &RelParams,
    chol: &Cholesky<f64, Dyn>,
    t: usize,
    ainv: &[[f64; 3]],
    u: &DMatrix<f64>,
    cl: &[DVector<f64>; 2],
    ac: &[DVector<f64>; 2],
    coef: &DVector<f64>,
    sinv: [[f64; 2]; 2],
    dd: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = lay.m;
    let nsm = lay.smooth_ranges.len();
    let mut gd = vec![0.0; 4 + nsm];
    let mut gq = vec![0.0; 4 + nsm];

    // Inverse of the leading t x t block of M.
    let lt = chol.l_dirty().view((0, 0), (t, t)).lower_triangle();
    let linv = lt
        .solve_lower_triangular(&DMatrix::identity(t, t))
        .expect("non-singular triangular factor");
    let minv = linv.tr_mul(&linv);

    // G = A^{-1} B restricted to the first t columns, stacked as 2m x t.
    let mut g = DMatrix::zeros(2 * m, t);
    for l in 0..2 {
        for (jj, &gj) in lay.idx[l].iter().enumerate() {
            if gj >= t {
                continue;
            }
            let sc = if l == 0 { 1.0 } else { 1.0 / dd };
            for i in 0..m {
                let w = ainv[i];
                let (w_r0, w_r1) = if l == 0 { (w[0], w[1]) } else { (w[1], w[2]) };
                let aij = ds.a[l][(i, jj)] * sc;
                g[(2 * i, gj)] = w_r0 * aij;
                g[(2 * i + 1, gj)] = w_r1 * aij;
            }
        }
    }
    let h = &g * &minv;
    let mut tmat = Vec::with_capacity(m);
    for i in 0..m {
        let w = ainv[i];
        let (g0, g1) = (g.row(2 * i), g.row(2 * i + 1));
        let (h0, h1) = (h.row(2 * i), h.row(2 * i + 1));
        let t00 = w[0] + g0.dot(&h0);
        let t01 = w[1] + g0.dot(&h1);
        let t11 = w[2] + g1.dot(&h1);
        tmat.push([[t00, t01], [t01, t11]]);
    }

    // Subject covariance parameters.
    let (s1, s2, rho) = (par.s1, par.s2, par.rho);
    let root = (s1 * s2).sqrt();
    let c12 = rho * root;
    let dsig = [
        [[s1, c12 / 2.0], [c12 / 2.0, 0.0]],
        [[0.0, c12 / 2.0], [c12 / 2.0, s2]],
        [[0.0, (1.0 - rho * rho) * root], [(1.0 - rho * rho) * root, 0.0]],
    ];
    for (k, ds_k) in dsig.iter().enumerate() {
        let prod = mul2(&sinv, ds_k);
        let tr_sd = prod[0][0] + prod[1][1];
        let dinv = mul2(&prod, &sinv).map(|row| row.map(|x| -x));
        let mut quad = 0.0;
        let mut tr = 0.0;
        for i in 0..m {
            let (a, b) = (u[(i, 0)], u[(i, 1)]);
            quad += a * a * dinv[0][0] + 2.0 * a * b * dinv[0][1] + b * b * dinv[1][1];
            let tm = tmat[i];
            tr += tm[0][0] * dinv[0][0] + 2.0 * tm[0][1] * dinv[0][1] + tm[1][1] * dinv[1][1];
        }
        gq[k] = quad;
        gd[k] = m as f64 * tr_sd + tr;
    }

    // Relative error scale of outcome 2.
    {
        let c1 = &cl[1];
        let mut rss = rs.yy[1] - 2.0 * rs.t[1].dot(c1) + c1.dot(&(&ds.s[1] * c1));
        for i in 0..m {
            let ui = u[(i, 1)];
            rss += -2.0 * rs.e[1][i] * ui + 2.0 * ui * ac[1][i] + ds.d[i] * ui * ui;
        }
        gq[3] = -2.0 * rss / dd;
        let mut tr_u = 0.0;
        let mut tr_cross = 0.0;
        for i in 0..m {
            tr_u += tmat[i][1][1] * ds.d[i];
            for (jj, &gj) in lay.idx[1].iter().enumerate() {
                if gj < t {
                    tr_cross += h[(2 * i + 1, gj)] * ds.a[1][(i, jj)];
                }
            }
        }
        let mut tr_s = 0.0;
        for (jj, &gj) in lay.idx[1].iter().enumerate() {
            if gj >= t {
                continue;
            }
            for (kk, &gk) in lay.idx[1].iter().enumerate() {
                if gk < t {
                    tr_s += minv[(gj, gk)] * ds.s[1][(jj, kk)];
                }
            }
        }
        let trace = (tr_u - 2.0 * tr_cross + tr_s) / dd;
        gd[3] = lay.n() as f64 - 2.0 * trace;
    }

    // Smoothing parameters.
    for (k, (range, &lam)) in lay.smooth_ranges.iter().zip(&par.lam).enumerate() {
        let bb: f64 = range.clone().map(|j| coef[j] * coef[j]).sum();
        let tr: f64 = range.clone().map(|j| minv[(j, j)]).sum();
        gq[4 + k] = lam * bb;
        gd[4 + k] = -(range.len() as f64) + lam * tr;
    }
    (gd, gq)
}

fn mul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}
