//! Estimation driver, fitted-model container and surface prediction.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mme::{evaluate, DesignStats, Evaluation, Layout, RelParams, ResponseStats};
use super::optimize::{minimize, Bounds, Objective, Settings};
use super::{LmmError, VarianceComponents};
use crate::data::LongitudinalDataset;
use crate::design::{assemble, AssembledDesign, Criterion, ErrorStructure, ModelSpec, SmoothTerm};

pub const MODEL_FORMAT_VERSION: u32 = 1;

const LOG_BOUND: f64 = 20.0;
const DELTA_BOUND: f64 = 10.0;
const PHI_BOUND: f64 = 15.0;
const PHI_STEP: f64 = 1e-5;

fn rho_bound() -> f64 {
    (1.0f64 - 1e-6).atanh()
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Overrides the criterion of the spec.
    pub criterion: Option<Criterion>,
    /// Single starting point instead of the default data-driven starts.
    pub start: Option<VarianceComponents>,
    /// Skips optimization and evaluates everything at these components.
    pub fixed: Option<VarianceComponents>,
    /// Confidence intervals from the observed information.
    pub intervals: bool,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            criterion: None,
            start: None,
            fixed: None,
            intervals: true,
            max_iter: 500,
        }
    }
}

impl FitOptions {
    /// Settings for repeated refits: ML, warm start, no intervals.
    pub fn refit(start: Option<VarianceComponents>) -> Self {
        Self {
            criterion: Some(Criterion::Ml),
            start,
            fixed: None,
            intervals: false,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the projected gradient of the profiled criterion on the
    /// optimizer scale.
    pub gradient_norm: f64,
    pub at_bounds: Vec<String>,
    pub starts: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterInterval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Standard error on the transformed (optimization) scale.
    pub transformed_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePrediction {
    pub w: f64,
    pub h: f64,
    pub fit: f64,
    pub se: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub criterion: Criterion,
    pub fixed_names: Vec<String>,
    pub smooths: Vec<SmoothTerm>,
    /// Fixed effects (parametric terms and unpenalized surface columns).
    pub theta: Vec<f64>,
    /// Posterior standard deviations of `theta`.
    pub theta_se: Vec<f64>,
    /// Penalized spline coefficients.
    pub spline_coef: Vec<f64>,
    pub subject_ids: Vec<String>,
    /// BLUPs `(u1_i, u2_i)`.
    pub subject_effects: Vec<[f64; 2]>,
    pub tau: VarianceComponents,
    /// Maximized ML or REML criterion.
    pub loglik: f64,
    /// Effective degrees of freedom per surface, in `smooths` order.
    pub edf: Vec<f64>,
    /// Population-level means `X theta + Z_s b` per outcome.
    pub fitted_mu: [Vec<f64>; 2],
    /// `y - mu - u` per outcome.
    pub residuals: [Vec<f64>; 2],
    /// Posterior covariance of `(spline_coef, theta)`.
    pub posterior_cov: DMatrix<f64>,
    pub intervals: Option<Vec<ParameterInterval>>,
    pub diagnostics: Diagnostics,
    pub group_hulls: Vec<Vec<[f64; 2]>>,
}

/// Fits `spec` to `ds` with default options.
pub fn fit(ds: &LongitudinalDataset, spec: &ModelSpec) -> Result<FittedModel, LmmError> {
    fit_with(ds, spec, &FitOptions::default())
}

pub fn fit_with(ds: &LongitudinalDataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FittedModel, LmmError> {
    Fitter::new(assemble(ds, spec)?)?.fit(opts)
}

/// An assembled design together with the statistics that do not depend on
/// the response, so that many responses can be fitted cheaply.
pub struct Fitter {
    design: AssembledDesign,
    layout: Layout,
    raw: [DMatrix<f64>; 2],
    independent: Option<Arc<DesignStats>>,
}

impl Fitter {
    pub fn new(design: AssembledDesign) -> Result<Self, LmmError> {
        let raw = Layout::raw_columns(&design);
        let layout = Layout::new(&design).with_support(&raw);
        let independent = match design.spec.error_structure {
            ErrorStructure::Independent => Some(Arc::new(DesignStats::new(&layout, &raw, None)?)),
            ErrorStructure::Car1OnTime => None,
        };
        Ok(Self {
            design,
            layout,
            raw,
            independent,
        })
    }

    pub fn design(&self) -> &AssembledDesign {
        &self.design
    }

    fn car1(&self) -> bool {
        self.independent.is_none()
    }

    fn split_response(&self, y: &DVector<f64>) -> [DVector<f64>; 2] {
        let n = self.layout.n_obs;
        [y.rows(0, n).into_owned(), y.rows(n, n).into_owned()]
    }

    pub fn fit(&self, opts: &FitOptions) -> Result<FittedModel, LmmError> {
        self.fit_response(&self.design.y, opts)
    }

    /// Fits the model to a different stacked response on the same design.
    pub fn fit_response(&self, y: &DVector<f64>, opts: &FitOptions) -> Result<FittedModel, LmmError> {
        let kind = opts.criterion.unwrap_or(self.design.spec.criterion);
        let mut prob = Problem::new(self, self.split_response(y), kind);
        if let Some(tau) = &opts.fixed {
            self.check_tau(tau)?;
            let x = prob.to_x(tau);
            let ev = prob.evaluate(&x, false)?;
            let diag = Diagnostics {
                converged: true,
                iterations: 0,
                gradient_norm: 0.0,
                at_bounds: Vec::new(),
                starts: 0,
                used_fallback: false,
            };
            return prob.finish(&x, ev, tau.sigma_eps_sq, diag, opts.intervals);
        }

        let starts = match &opts.start {
            Some(tau) => {
                self.check_tau(tau)?;
                let mut x = prob.to_x(tau);
                prob.bounds().project(&mut x);
                vec![x]
            }
            None => prob.default_starts()?,
        };
        let settings = Settings {
            max_iter: opts.max_iter,
            ..Settings::default()
        };
        let bounds = prob.bounds();
        let mut best: Option<super::optimize::Outcome> = None;
        for x0 in &starts {
            let Some(out) = minimize(&mut prob, x0, &bounds, &settings) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.f < b.f),
            };
            if better {
                best = Some(out);
            }
        }
        let best = best.ok_or_else(|| LmmError::NonPositiveDefinite("no feasible starting point".into()))?;
        if !best.converged {
            return Err(LmmError::NoConvergence {
                iterations: best.iterations,
                criterion: -best.f,
                gradient_norm: best.grad_norm,
            });
        }
        let ev = prob.evaluate(&best.x, false)?;
        let diag = Diagnostics {
            converged: true,
            iterations: best.iterations,
            gradient_norm: best.grad_norm,
            at_bounds: prob.at_bounds(&best.x),
            starts: starts.len(),
            used_fallback: best.used_fallback,
        };
        let sigma_sq = ev.sigma_sq();
        prob.finish(&best.x, ev, sigma_sq, diag, opts.intervals)
    }

    fn check_tau(&self, tau: &VarianceComponents) -> Result<(), LmmError> {
        tau.validate()?;
        let per = |o| self.design.penalized_smooths().filter(|s| s.outcome == o).count();
        if tau.log_lambda.len() != per(0) || tau.log_varphi.len() != per(1) {
            return Err(LmmError::InvalidVariance("wrong number of smoothing parameters".into()));
        }
        if tau.ar_corr.is_some() != self.car1() {
            return Err(LmmError::InvalidVariance(
                "ar_corr must be given exactly for CAR(1) errors".into(),
            ));
        }
        Ok(())
    }

    /// ML or REML criterion at `tau` (not profiled).
    pub fn criterion(&self, tau: &VarianceComponents, kind: Criterion) -> Result<f64, LmmError> {
        self.check_tau(tau)?;
        let mut prob = Problem::new(self, self.split_response(&self.design.y), kind);
        let x = prob.to_x(tau);
        let ev = prob.evaluate(&x, false)?;
        Ok(-0.5 * ev.m2ll_at(tau.sigma_eps_sq))
    }

    /// Gradient of the profiled criterion on the optimizer scale, for checks.
    pub fn profiled_gradient(&self, tau: &VarianceComponents, kind: Criterion) -> Result<Vec<f64>, LmmError> {
        self.check_tau(tau)?;
        let mut prob = Problem::new(self, self.split_response(&self.design.y), kind);
        let x = prob.to_x(tau);
        prob.value_grad(&x)
            .map(|(_, g)| g)
            .ok_or_else(|| LmmError::NonPositiveDefinite("gradient evaluation".into()))
    }

    /// Profiled `l` on the optimizer scale, for checks.
    pub fn profiled_value(&self, x: &[f64], kind: Criterion) -> Option<f64> {
        let mut prob = Problem::new(self, self.split_response(&self.design.y), kind);
        prob.value(x).map(|v| -v)
    }

    /// Optimizer-scale coordinates of `tau`.
    pub fn optimizer_point(&self, tau: &VarianceComponents) -> Vec<f64> {
        Problem::new(self, self.split_response(&self.design.y), Criterion::Reml).to_x(tau)
    }
}

struct CacheEntry {
    phi_bits: Option<u64>,
    design: Arc<DesignStats>,
    response: Arc<ResponseStats>,
}

/// The optimization problem for one response vector.
struct Problem<'a> {
    fitter: &'a Fitter,
    y: [DVector<f64>; 2],
    kind: Criterion,
    cache: Vec<CacheEntry>,
}

impl<'a> Problem<'a> {
    fn new(fitter: &'a Fitter, y: [DVector<f64>; 2], kind: Criterion) -> Self {
        Self {
            fitter,
            y,
            kind,
            cache: Vec::new(),
        }
    }

    fn lay(&self) -> &Layout {
        &self.fitter.layout
    }

    fn num_smooths(&self) -> usize {
        self.lay().smooth_ranges.len()
    }

    fn lam_offset(&self) -> usize {
        if self.fitter.car1() {
            5
        } else {
            4
        }
    }

    fn dim(&self) -> usize {
        self.lam_offset() + self.num_smooths()
    }

    fn bounds(&self) -> Bounds {
        let mut lower = vec![-LOG_BOUND, -LOG_BOUND, -rho_bound(), -DELTA_BOUND];
        let mut upper = vec![LOG_BOUND, LOG_BOUND, rho_bound(), DELTA_BOUND];
        if self.fitter.car1() {
            lower.push(-PHI_BOUND);
            upper.push(PHI_BOUND);
        }
        lower.extend(std::iter::repeat_n(-LOG_BOUND, self.num_smooths()));
        upper.extend(std::iter::repeat_n(LOG_BOUND, self.num_smooths()));
        Bounds { lower, upper }
    }

    fn at_bounds(&self, x: &[f64]) -> Vec<String> {
        let b = self.bounds();
        let names = self.param_names();
        (0..x.len())
            .filter(|&i| x[i] <= b.lower[i] + 1e-8 || x[i] >= b.upper[i] - 1e-8)
            .map(|i| names[i].clone())
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["log_sigma1_rel", "log_sigma2_rel", "atanh_rho", "log_delta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.fitter.car1() {
            names.push("logit_ar_corr".into());
        }
        names.extend((0..self.num_smooths()).map(|k| format!("log_smoothing_rel[{k}]")));
        names
    }

    fn unpack(&self, x: &[f64]) -> (RelParams, Option<f64>) {
        let off = self.lam_offset();
        let phi = self.fitter.car1().then(|| logistic(x[4]));
        (
            RelParams {
                s1: x[0].exp(),
                s2: x[1].exp(),
                rho: x[2].tanh(),
                delta: x[3].exp(),
                lam: x[off..].iter().map(|v| v.exp()).collect(),
            },
            phi,
        )
    }

    fn to_x(&self, tau: &VarianceComponents) -> Vec<f64> {
        let s2 = tau.sigma_eps_sq;
        let mut x = vec![
            (tau.sigma1_sq / s2).ln(),
            (tau.sigma2_sq / s2).ln(),
            tau.rho.atanh(),
            tau.delta.ln(),
        ];
        if self.fitter.car1() {
            x.push(logit(tau.ar_corr.unwrap_or(0.1)));
        }
        x.extend(tau.log_lambda.iter().chain(&tau.log_varphi).map(|l| l + s2.ln()));
        x
    }

    fn stats(&mut self, phi: Option<f64>) -> Result<(Arc<DesignStats>, Arc<ResponseStats>), LmmError> {
        let key = phi.map(f64::to_bits);
        if let Some(e) = self.cache.iter().find(|e| e.phi_bits == key) {
            return Ok((e.design.clone(), e.response.clone()));
        }
        let design = match &self.fitter.independent {
            Some(ds) => ds.clone(),
            None => Arc::new(DesignStats::new(self.lay(), &self.fitter.raw, phi)?),
        };
        let response = Arc::new(ResponseStats::new(self.lay(), &design, &self.y)?);
        if self.cache.len() >= 3 {
            self.cache.remove(0);
        }
        self.cache.push(CacheEntry {
            phi_bits: key,
            design: design.clone(),
            response: response.clone(),
        });
        Ok((design, response))
    }

    fn evaluate(&mut self, x: &[f64], grad: bool) -> Result<Evaluation, LmmError> {
        let (par, phi) = self.unpack(x);
        let (ds, rs) = self.stats(phi)?;
        let ev = evaluate(self.lay(), &ds, &rs, &par, self.kind, grad)?;
        if !ev.m2ll_is_finite() {
            return Err(LmmError::NonPositiveDefinite("criterion not finite".into()));
        }
        Ok(ev)
    }

    /// Gradient of the profiled `-l` in optimizer order.
    fn full_gradient(&mut self, x: &[f64], ev: &Evaluation) -> Option<Vec<f64>> {
        let g = ev.profiled_gradient()?;
        let mut out: Vec<f64> = g[..4].iter().map(|v| 0.5 * v).collect();
        if self.fitter.car1() {
            let fd = self.phi_derivative(x, |e| e.profiled_m2ll())?;
            out.push(0.5 * fd);
        }
        out.extend(g[4..].iter().map(|v| 0.5 * v));
        Some(out)
    }

    fn phi_derivative(&mut self, x: &[f64], f: impl Fn(&Evaluation) -> f64) -> Option<f64> {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[4] += PHI_STEP;
        xm[4] -= PHI_STEP;
        let fp = f(&self.evaluate(&xp, false).ok()?);
        let fm = f(&self.evaluate(&xm, false).ok()?);
        Some((fp - fm) / (2.0 * PHI_STEP))
    }

    fn default_starts(&mut self) -> Result<Vec<Vec<f64>>, LmmError> {
        let lay = self.lay().clone();
        let n = lay.n_obs;
        let m = lay.m;
        let mut within = [0.0; 2];
        let mut between = [0.0; 2];
        let mut means = [vec![0.0; m], vec![0.0; m]];
        for l in 0..2 {
            let x = &self.fitter.design.blocks[l].fixed;
            let resid = if x.ncols() > 0 {
                let xtx = x.tr_mul(x);
                let beta = xtx
                    .cholesky()
                    .ok_or(LmmError::RankDeficientX)?
                    .solve(&x.tr_mul(&self.y[l]));
                &self.y[l] - x * beta
            } else {
                self.y[l].clone()
            };
            let mut ss_within = 0.0;
            let mut inv_n = 0.0;
            for (i, span) in lay.spans.iter().enumerate() {
                let mean = span.clone().map(|j| resid[j]).sum::<f64>() / span.len() as f64;
                means[l][i] = mean;
                ss_within += span.clone().map(|j| (resid[j] - mean).powi(2)).sum::<f64>();
                inv_n += 1.0 / span.len() as f64;
            }
            within[l] = (ss_within / (n.saturating_sub(m)).max(1) as f64).max(1e-8);
            let grand = means[l].iter().sum::<f64>() / m as f64;
            let var_means = means[l].iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m.max(2) - 1) as f64;
            between[l] = (var_means - within[l] * inv_n / m as f64).max(0.05 * within[l]);
        }
        let sigma_sq = within[0];
        let delta = (within[1] / within[0]).sqrt();
        let corr = {
            let mu: Vec<f64> = (0..2).map(|l| means[l].iter().sum::<f64>() / m as f64).collect();
            let cov: f64 = (0..m).map(|i| (means[0][i] - mu[0]) * (means[1][i] - mu[1])).sum();
            let v0: f64 = (0..m).map(|i| (means[0][i] - mu[0]).powi(2)).sum();
            let v1: f64 = (0..m).map(|i| (means[1][i] - mu[1]).powi(2)).sum();
            if v0 > 0.0 && v1 > 0.0 {
                (cov / (v0 * v1).sqrt()).clamp(-0.9, 0.9)
            } else {
                0.0
            }
        };
        let phi = self.fitter.car1().then_some(0.1);
        let (ds, _) = self.stats(phi)?;
        let mut log_lam = Vec::with_capacity(self.num_smooths());
        for range in &lay.smooth_ranges {
            let l = if lay.idx[0].contains(&range.start) { 0 } else { 1 };
            let local: Vec<usize> = lay.idx[l]
                .iter()
                .enumerate()
                .filter(|(_, g)| range.contains(g))
                .map(|(j, _)| j)
                .collect();
            let block = ds.s[l].select_rows(&local).select_columns(&local);
            let mut eig: Vec<f64> = block.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let scale = if l == 0 { 1.0 } else { 1.0 / (delta * delta) };
            let median = eig[eig.len() / 2] * scale;
            log_lam.push(if median > 0.0 { median.ln() } else { 0.0 });
        }
        let mut base = vec![
            (between[0] / sigma_sq).ln(),
            (between[1] / sigma_sq).ln(),
            corr.atanh(),
            delta.ln(),
        ];
        if let Some(phi) = phi {
            base.push(logit(phi));
        }
        let mut first = base.clone();
        first.extend(&log_lam);
        let mut second = base;
        second.extend(log_lam.iter().map(|v| v + 3.0 * std::f64::consts::LN_10));
        let bounds = self.bounds();
        let mut starts = vec![first, second];
        for s in starts.iter_mut() {
            bounds.project(s);
        }
        if self.num_smooths() == 0 {
            starts.truncate(1);
        }
        Ok(starts)
    }

    fn finish(
        &mut self,
        x: &[f64],
        ev: Evaluation,
        sigma_sq: f64,
        diagnostics: Diagnostics,
        intervals: bool,
    ) -> Result<FittedModel, LmmError> {
        let fitter = self.fitter;
        let design = &fitter.design;
        let lay = self.lay().clone();
        let (par, phi) = self.unpack(x);
        let q = lay.q;
        let nsm0 = design.penalized_smooths().filter(|s| s.outcome == 0).count();
        let log_lam: Vec<f64> = par.lam.iter().map(|l| (l / sigma_sq).ln()).collect();
        let tau = VarianceComponents {
            log_lambda: log_lam[..nsm0].to_vec(),
            log_varphi: log_lam[nsm0..].to_vec(),
            sigma1_sq: par.s1 * sigma_sq,
            sigma2_sq: par.s2 * sigma_sq,
            rho: par.rho,
            sigma_eps_sq: sigma_sq,
            delta: par.delta,
            ar_corr: phi,
        };
        let minv = ev.chol.inverse();
        let coef = &ev.coef;
        let spline_coef: Vec<f64> = coef.rows(0, q).iter().copied().collect();
        let theta: Vec<f64> = coef.rows(q, lay.p).iter().copied().collect();
        let theta_se = (0..lay.p).map(|j| (sigma_sq * minv[(q + j, q + j)]).sqrt()).collect();

        let mut edf = Vec::with_capacity(design.smooths.len());
        let mut pen_k = 0;
        for s in &design.smooths {
            if s.is_penalized() {
                let lam = par.lam[pen_k];
                pen_k += 1;
                let tr: f64 = s.penalized_cols.clone().map(|j| minv[(j, j)]).sum();
                edf.push(s.fixed_cols.len() as f64 + s.penalized_cols.len() as f64 - lam * tr);
            } else {
                edf.push(s.fixed_cols.len() as f64);
            }
        }

        let n = lay.n_obs;
        let mut fitted_mu = [vec![0.0; n], vec![0.0; n]];
        let mut residuals = [vec![0.0; n], vec![0.0; n]];
        for l in 0..2 {
            let local = DVector::from_iterator(lay.idx[l].len(), lay.idx[l].iter().map(|&g| coef[g]));
            let mu = &fitter.raw[l] * local;
            for (i, span) in lay.spans.iter().enumerate() {
                for j in span.clone() {
                    fitted_mu[l][j] = mu[j];
                    residuals[l][j] = self.y[l][j] - mu[j] - ev.u[(i, l)];
                }
            }
        }
        let loglik = -0.5 * ev.m2ll_at(sigma_sq);
        let intervals = if intervals {
            self.intervals(x, sigma_sq, &tau)
        } else {
            None
        };
        Ok(FittedModel {
            format_version: MODEL_FORMAT_VERSION,
            spec: design.spec.clone(),
            criterion: self.kind,
            fixed_names: design.fixed_names.clone(),
            smooths: design.smooths.clone(),
            theta,
            theta_se,
            spline_coef,
            subject_ids: design.subject_ids.clone(),
            subject_effects: (0..lay.m).map(|i| [ev.u[(i, 0)], ev.u[(i, 1)]]).collect(),
            tau,
            loglik,
            edf,
            fitted_mu,
            residuals,
            posterior_cov: minv * sigma_sq,
            intervals,
            diagnostics,
            group_hulls: group_hulls(design),
        })
    }

    /// Gradient of the unprofiled `-l` in natural transformed coordinates
    /// `[log s1^2, log s2^2, atanh rho, log delta, (logit phi), log s_eps^2, log lambda...]`.
    fn natural_gradient(&mut self, psi: &[f64]) -> Option<Vec<f64>> {
        let car = self.fitter.car1();
        let off = self.lam_offset();
        let ls = psi[off];
        let mut x: Vec<f64> = psi[..off].to_vec();
        x[0] -= ls;
        x[1] -= ls;
        x.extend(psi[off + 1..].iter().map(|v| v + ls));
        let sigma_sq = ls.exp();
        let ev = self.evaluate(&x, true).ok()?;
        let (gd, gq) = ev.grad.clone()?;
        let gx: Vec<f64> = gd.iter().zip(&gq).map(|(d, q)| d + q / sigma_sq).collect();
        let g_sigma = ev.f - ev.q_star / sigma_sq;
        let mut out = vec![gx[0], gx[1], gx[2], gx[3]];
        if car {
            out.push(self.phi_derivative(&x, |e| e.m2ll_at(sigma_sq))?);
        }
        let g_lam = &gx[4..];
        out.push(g_sigma - gx[0] - gx[1] + g_lam.iter().sum::<f64>());
        out.extend(g_lam);
        Some(out.into_iter().map(|v| 0.5 * v).collect())
    }

    fn intervals(&mut self, x: &[f64], sigma_sq: f64, tau: &VarianceComponents) -> Option<Vec<ParameterInterval>> {
        let off = self.lam_offset();
        let ls = sigma_sq.ln();
        let mut psi: Vec<f64> = x[..off].to_vec();
        psi[0] += ls;
        psi[1] += ls;
        psi.push(ls);
        psi.extend(x[off..].iter().map(|v| v - ls));
        let bounds = self.bounds();
        // Directions pinned at a bound carry no curvature information.
        let active: Vec<usize> = (0..psi.len())
            .filter(|&i| {
                let xi = if i < off { Some(i) } else if i == off { None } else { Some(i - 1) };
                xi.is_none_or(|k| x[k] > bounds.lower[k] + 1e-6 && x[k] < bounds.upper[k] - 1e-6)
            })
            .collect();
        let d = active.len();
        let h = 1e-4;
        let mut hess = DMatrix::zeros(d, d);
        for (a, &i) in active.iter().enumerate() {
            let mut pp = psi.clone();
            let mut pm = psi.clone();
            pp[i] += h;
            pm[i] -= h;
            let gp = self.natural_gradient(&pp)?;
            let gm = self.natural_gradient(&pm)?;
            for (b, &j) in active.iter().enumerate() {
                hess[(a, b)] = (gp[j] - gm[j]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let cov = hess.cholesky()?.inverse();
        let se_of = |i: usize| active.iter().position(|&k| k == i).map(|a| cov[(a, a)].sqrt());
        let z = 1.959963984540054;
        let mut out = Vec::new();
        let mut push = |name: &str, i: usize, estimate: f64, back: &dyn Fn(f64) -> f64| {
            let se = se_of(i).unwrap_or(f64::NAN);
            let (a, b) = (back(psi[i] - z * se), back(psi[i] + z * se));
            out.push(ParameterInterval {
                name: name.into(),
                estimate,
                lower: a.min(b),
                upper: a.max(b),
                transformed_se: se,
            });
        };
        let half_exp = |v: f64| (0.5 * v).exp();
        push("sigma1", 0, tau.sigma1_sq.sqrt(), &half_exp);
        push("sigma2", 1, tau.sigma2_sq.sqrt(), &half_exp);
        push("rho", 2, tau.rho, &f64::tanh);
        push("delta", 3, tau.delta, &f64::exp);
        if let Some(phi) = tau.ar_corr {
            push("ar_corr", 4, phi, &logistic);
        }
        push("sigma_eps", off, tau.sigma_eps_sq.sqrt(), &half_exp);
        Some(out)
    }
}

impl Objective for Problem<'_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.evaluate(x, false).ok().map(|ev| 0.5 * ev.profiled_m2ll())
    }

    fn value_grad(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let ev = self.evaluate(x, true).ok()?;
        let g = self.full_gradient(x, &ev)?;
        debug_assert_eq!(g.len(), self.dim());
        Some((0.5 * ev.profiled_m2ll(), g))
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn group_hulls(design: &AssembledDesign) -> Vec<Vec<[f64; 2]>> {
    (1..=design.spec.num_groups)
        .map(|g| {
            let pts: Vec<[f64; 2]> = design
                .subjects
                .iter()
                .filter(|s| s.group == g)
                .flat_map(|s| s.rows().map(|r| design.points[r]))
                .collect();
            convex_hull(pts)
        })
        .collect()
}

/// Counter-clockwise hull (monotone chain).
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let within = (p[0] - a[0]) * (p[0] - b[0]) <= 0.0 && (p[1] - a[1]) * (p[1] - b[1]) <= 0.0;
            cross.abs() <= 1e-12 && within
        }
        k => (0..k).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % k]);
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let scale = ((b[0] - a[0]).abs() + (b[1] - a[1]).abs()) * ((p[0] - a[0]).abs() + (p[1] - a[1]).abs());
            cross >= -1e-12 * scale.max(1e-300)
        }),
    }
}

impl FittedModel {
    pub fn num_penalized(&self) -> usize {
        self.spline_coef.len()
    }

    fn coef(&self, global: usize) -> f64 {
        let q = self.num_penalized();
        if global < q {
            self.spline_coef[global]
        } else {
            self.theta[global - q]
        }
    }

    pub fn total_edf(&self) -> f64 {
        self.edf.iter().sum()
    }

    /// Surface of `outcome` (1 or 2) for `group` (1-based) on `grid`,
    /// including the group intercept of shared surfaces but no parametric
    /// terms or subject effects.
    pub fn predict_surface(
        &self,
        group: usize,
        outcome: usize,
        grid: &[[f64; 2]],
    ) -> Result<Vec<SurfacePrediction>, LmmError> {
        if !(1..=2).contains(&outcome) {
            return Err(LmmError::UnknownOutcome(outcome));
        }
        if group == 0 || group > self.spec.num_groups {
            return Err(LmmError::UnknownGroup(group));
        }
        let smooth = self
            .smooths
            .iter()
            .find(|s| s.outcome == outcome - 1 && s.group.is_none_or(|g| g == group))
            .ok_or(LmmError::UnknownGroup(group))?;
        let q = self.num_penalized();
        let nd = smooth.null_dim();
        let mut cols: Vec<usize> = Vec::with_capacity(smooth.basis_dim() + 1);
        for j in 0..smooth.basis_dim() {
            cols.push(if j < nd || !smooth.is_penalized() {
                q + smooth.fixed_cols[j]
            } else {
                smooth.penalized_cols.start + j - nd
            });
        }
        let intercept = smooth.intercept_for(group).map(|c| q + c);
        let values = smooth.basis.eval(grid, smooth.parameterization);
        let mut all = cols.clone();
        all.extend(intercept);
        let cov = self.posterior_cov.select_rows(&all).select_columns(&all);
        let hull = &self.group_hulls[group - 1];
        Ok(grid
            .iter()
            .enumerate()
            .map(|(r, &p)| {
                let mut row: Vec<f64> = (0..cols.len()).map(|j| values[(r, j)]).collect();
                if intercept.is_some() {
                    row.push(1.0);
                }
                let fit: f64 = row.iter().zip(&all).map(|(v, &c)| v * self.coef(c)).sum();
                let xv = DVector::from_vec(row);
                let var = xv.dot(&(&cov * &xv)).max(0.0);
                SurfacePrediction {
                    w: p[0],
                    h: p[1],
                    fit,
                    se: var.sqrt(),
                    extrapolated: !inside_hull(hull, p),
                }
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmmError> {
        let text = serde_json::to_string(self).map_err(|e| LmmError::ModelFile(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| LmmError::ModelFile(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LmmError::ModelFile(e.to_string()))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| LmmError::ModelFile(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(LmmError::ModelFile(format!(
                "unsupported format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}
