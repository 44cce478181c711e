//! Tests of equal group surfaces: a wild bootstrap of the likelihood ratio
//! and an LRT with EDF-matched unpenalized splines.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::data::LongitudinalDataset;
use crate::design::{assemble, null_and_full_specs, Criterion, DesignError, ModelSpec};
use crate::lmm::{FitOptions, FittedModel, Fitter, LmmError, VarianceComponents};

/// Statistics below `-NEGATIVE_TOL` are flagged in the replicate status.
pub const NEGATIVE_TOL: f64 = 1e-3;
pub const MIN_BOOTSTRAP: usize = 99;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("null and full models are not nested: {0}")]
    NonNested(String),
    #[error("bootstrap needs at least {MIN_BOOTSTRAP} replicates, got {0}")]
    TooFewReplicates(usize),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Lmm(#[from] LmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Bootstrap,
    AdjustedLrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateStatus {
    Converged,
    Failed,
    /// Converged with a statistic below `-NEGATIVE_TOL`; still counted.
    Negative,
}

/// Basis size chosen for one smooth of the unpenalized refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfBasis {
    pub outcome: usize,
    pub group: Option<usize>,
    pub edf: f64,
    pub k: usize,
    /// Rounded EDF fell below `null_dim + 1` and was raised.
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    /// Bootstrap: `l_full - l_null`. LRT: `2 (l_full - l_null)`.
    pub statistic: f64,
    pub p_value: f64,
    pub loglik_null: f64,
    pub loglik_full: f64,
    /// Difference in unpenalized coefficient counts (LRT only).
    pub nu: Option<usize>,
    /// p-values under chi2_nu and chi2_{nu+1} (LRT only); `p_value` is the
    /// equal mixture.
    pub p_chisq_nu: Option<f64>,
    pub p_chisq_nu1: Option<f64>,
    pub edf_bases: Vec<EdfBasis>,
    /// Statistics of the successful replicates, in replicate order.
    pub bootstrap_stats: Vec<f64>,
    pub b: usize,
    pub b_effective: usize,
    pub seed: u64,
    pub per_replicate_status: Vec<ReplicateStatus>,
}

impl TestResult {
    /// `[chi2_nu, chi2_{nu+1}, mixture]` p-values; a bootstrap result
    /// repeats its single p-value.
    pub fn reference_p_values(&self) -> [f64; 3] {
        match self.method {
            TestMethod::AdjustedLrt => [
                self.p_chisq_nu.unwrap_or(self.p_value),
                self.p_chisq_nu1.unwrap_or(self.p_value),
                self.p_value,
            ],
            TestMethod::Bootstrap => [self.p_value; 3],
        }
    }

    pub fn failures(&self) -> usize {
        self.b - self.b_effective
    }
}

/// `P(chi2_nu >= x)`; 1 for `x <= 0`.
pub fn chisq_sf(x: f64, nu: usize) -> f64 {
    if x <= 0.0 || nu == 0 {
        return if x <= 0.0 { 1.0 } else { 0.0 };
    }
    ChiSquared::new(nu as f64).map(|d| d.sf(x)).unwrap_or(f64::NAN)
}

/// Survival function of the equal mixture of chi2_nu and chi2_{nu+1}.
pub fn mixture_chisq_sf(x: f64, nu: usize) -> f64 {
    0.5 * chisq_sf(x, nu) + 0.5 * chisq_sf(x, nu + 1)
}

/// RNG for one replicate: the master seed selects the key and the
/// replicate index the stream, so draws do not depend on scheduling.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn rademacher(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Deterministic stream of equiprobable signs.
pub fn wild_multiplier_stream(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rademacher(&mut rng)).collect()
}

/// One bootstrap response with the draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSample {
    /// Stacked response, outcome 1 rows then outcome 2 rows.
    pub y: DVector<f64>,
    /// Subject whose effect pair was assigned to each subject.
    pub subject_draws: Vec<usize>,
    /// Signs in the layout of `y`.
    pub multipliers: Vec<f64>,
}

/// Generates bootstrap responses from a fitted null model.
pub struct BootstrapSampler<'a> {
    null: &'a FittedModel,
    rows: Vec<std::ops::Range<usize>>,
    seed: u64,
}

impl<'a> BootstrapSampler<'a> {
    pub fn new(null: &'a FittedModel, ds: &LongitudinalDataset, seed: u64) -> Self {
        Self {
            null,
            rows: ds.subjects().iter().map(|s| s.rows()).collect(),
            seed,
        }
    }

    pub fn sample(&self, replicate: usize) -> BootstrapSample {
        let mut rng = replicate_rng(self.seed, replicate as u64);
        let m = self.rows.len();
        let n = self.null.residuals[0].len();
        let subject_draws: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
        let multipliers: Vec<f64> = (0..2 * n).map(|_| rademacher(&mut rng)).collect();
        let mut y = DVector::zeros(2 * n);
        for (i, rows) in self.rows.iter().enumerate() {
            let u = self.null.subject_effects[subject_draws[i]];
            for r in rows.clone() {
                for l in 0..2 {
                    let k = l * n + r;
                    y[k] = u[l] + self.null.fitted_mu[l][r] + self.null.residuals[l][r] * multipliers[k];
                }
            }
        }
        BootstrapSample {
            y,
            subject_draws,
            multipliers,
        }
    }
}

fn ml_spec(spec: &ModelSpec) -> ModelSpec {
    spec.clone().with_criterion(Criterion::Ml)
}

fn nested_pair(full_spec: &ModelSpec) -> Result<(ModelSpec, ModelSpec), InferenceError> {
    let (null, full) = null_and_full_specs(full_spec)?;
    Ok((ml_spec(&null), ml_spec(&full)))
}

fn fit_ml(fitter: &Fitter, start: Option<&FittedModel>) -> Result<FittedModel, LmmError> {
    let opts = match start {
        Some(m) => FitOptions::refit(Some(m.tau.clone())),
        None => FitOptions {
            criterion: Some(Criterion::Ml),
            intervals: false,
            ..FitOptions::default()
        },
    };
    fitter.fit(&opts)
}

/// Full-model components that reproduce the null fit's variance structure,
/// with every group surface of an outcome given the shared smoothing
/// parameter.
fn full_start_from_null(null: &VarianceComponents, full: &Fitter) -> VarianceComponents {
    let per = |o| full.design().penalized_smooths().filter(|s| s.outcome == o).count();
    let spread = |v: &[f64], n: usize| vec![v.first().copied().unwrap_or(0.0); n];
    VarianceComponents {
        log_lambda: spread(&null.log_lambda, per(0)),
        log_varphi: spread(&null.log_varphi, per(1)),
        ..null.clone()
    }
}

/// Best ML fit of the full model over the given starts. The full-model
/// likelihood is often multimodal in the group smoothing parameters, so a
/// single warm start can stop at an inferior mode.
fn fit_full(full: &Fitter, y: &DVector<f64>, starts: &[VarianceComponents]) -> Result<FittedModel, LmmError> {
    let mut best: Option<FittedModel> = None;
    let mut last_err = None;
    for start in starts {
        match full.fit_response(y, &FitOptions::refit(Some(start.clone()))) {
            Ok(f) if best.as_ref().is_none_or(|b| f.loglik > b.loglik) => best = Some(f),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start"))
}

/// Wild bootstrap test of equal group surfaces. The null model replaces
/// the group surfaces of `full_spec` by one shared surface per outcome
/// with group intercepts; all fits use ML.
///
/// With penalized surfaces the null is not a submodel of the full model
/// (a shared random surface is not a special case of independent group
/// surfaces), so the statistic can be negative. Negative replicates are
/// kept and marked [`ReplicateStatus::Negative`].
pub fn bootstrap_test(
    ds: &LongitudinalDataset,
    full_spec: &ModelSpec,
    b: usize,
    seed: u64,
) -> Result<TestResult, InferenceError> {
    if b < MIN_BOOTSTRAP {
        return Err(InferenceError::TooFewReplicates(b));
    }
    let (null_spec, full_spec) = nested_pair(full_spec)?;
    let null_fitter = Fitter::new(assemble(ds, &null_spec)?)?;
    let full_fitter = Fitter::new(assemble(ds, &full_spec)?)?;
    let null = fit_ml(&null_fitter, None)?;
    let full = {
        let cold = fit_ml(&full_fitter, None);
        let from_null = fit_full(&full_fitter, &full_fitter.design().y, &[full_start_from_null(&null.tau, &full_fitter)]);
        match (cold, from_null) {
            (Ok(a), Ok(b)) => if b.loglik > a.loglik { b } else { a },
            (Ok(a), Err(_)) | (Err(_), Ok(a)) => a,
            (Err(e), Err(_)) => return Err(e.into()),
        }
    };
    let observed = full.loglik - null.loglik;

    let sampler = BootstrapSampler::new(&null, ds, seed);
    let outcomes: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let sample = sampler.sample(r);
            let fitted = null_fitter
                .fit_response(&sample.y, &FitOptions::refit(Some(null.tau.clone())))
                .and_then(|n0| {
                    let starts = [full.tau.clone(), full_start_from_null(&n0.tau, &full_fitter)];
                    fit_full(&full_fitter, &sample.y, &starts).map(|n1| n1.loglik - n0.loglik)
                });
            match fitted {
                Ok(d) => Some(d),
                Err(e) => {
                    log::debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let mut stats = Vec::with_capacity(b);
    let mut status = Vec::with_capacity(b);
    for o in &outcomes {
        match o {
            Some(d) => {
                stats.push(*d);
                status.push(if *d < -NEGATIVE_TOL {
                    ReplicateStatus::Negative
                } else {
                    ReplicateStatus::Converged
                });
            }
            None => status.push(ReplicateStatus::Failed),
        }
    }
    let failed = b - stats.len();
    if failed * 10 > b {
        return Err(InferenceError::TooManyFailures { failed, total: b });
    }
    let negative = status.iter().filter(|s| **s == ReplicateStatus::Negative).count();
    if negative > 0 {
        log::info!("{negative} of {b} bootstrap statistics are negative");
    }
    let exceed = stats.iter().filter(|d| **d >= observed).count();
    Ok(TestResult {
        method: TestMethod::Bootstrap,
        statistic: observed,
        p_value: exceed as f64 / stats.len() as f64,
        loglik_null: null.loglik,
        loglik_full: full.loglik,
        nu: None,
        p_chisq_nu: None,
        p_chisq_nu1: None,
        edf_bases: Vec::new(),
        b_effective: stats.len(),
        bootstrap_stats: stats,
        b,
        seed,
        per_replicate_status: status,
    })
}

/// Round half up, raised to `null_dim + 1`.
pub fn edf_to_basis_size(edf: f64, null_dim: usize) -> (usize, bool) {
    let k = (edf + 0.5).floor().max(0.0) as usize;
    if k < null_dim + 1 {
        (null_dim + 1, true)
    } else {
        (k, false)
    }
}

/// Likelihood ratio test with unpenalized splines whose sizes match the
/// EDF of the penalized full fit, referred to the equal mixture of chi2_nu
/// and chi2_{nu+1}. The seed is recorded only; the test draws nothing.
pub fn adjusted_lrt(ds: &LongitudinalDataset, full_spec: &ModelSpec, seed: u64) -> Result<TestResult, InferenceError> {
    let (_, penalized) = nested_pair(full_spec)?;
    let pen_fit = fit_ml(&Fitter::new(assemble(ds, &penalized)?)?, None)?;

    let max_k = distinct_points(ds);
    let mut edf_bases = Vec::new();
    for (sm, &edf) in pen_fit.smooths.iter().zip(&pen_fit.edf) {
        let (k, floored) = edf_to_basis_size(edf, sm.null_dim());
        if floored {
            log::warn!(
                "EDF {edf:.2} of outcome {} group {:?} is below the null space; basis size raised to {k}",
                sm.outcome + 1,
                sm.group
            );
        }
        edf_bases.push(EdfBasis {
            outcome: sm.outcome,
            group: sm.group,
            edf,
            k: k.min(max_k),
            floored,
        });
    }

    let mut unpenalized = penalized.clone();
    unpenalized.basis.penalized = false;
    unpenalized.basis.per_surface_k = Some(edf_bases.iter().map(|e| e.k).collect());
    let (null_spec, full_spec) = nested_pair(&unpenalized)?;
    let null_design = assemble(ds, &null_spec)?;
    let full_design = assemble(ds, &full_spec)?;
    let p0 = null_design.num_fixed();
    let p1 = full_design.num_fixed();
    if p1 <= p0 {
        return Err(InferenceError::NonNested(format!(
            "full model has {p1} coefficients, null has {p0}"
        )));
    }
    let nu = p1 - p0;
    let null = fit_ml(&Fitter::new(null_design)?, None)?;
    let full = fit_ml(&Fitter::new(full_design)?, None)?;
    let statistic = 2.0 * (full.loglik - null.loglik);
    if statistic < -2.0 * NEGATIVE_TOL {
        log::warn!("likelihood ratio statistic is negative: {statistic}");
    }
    Ok(TestResult {
        method: TestMethod::AdjustedLrt,
        statistic,
        p_value: mixture_chisq_sf(statistic, nu),
        loglik_null: null.loglik,
        loglik_full: full.loglik,
        nu: Some(nu),
        p_chisq_nu: Some(chisq_sf(statistic, nu)),
        p_chisq_nu1: Some(chisq_sf(statistic, nu + 1)),
        edf_bases,
        bootstrap_stats: Vec::new(),
        b: 0,
        b_effective: 0,
        seed,
        per_replicate_status: Vec::new(),
    })
}

fn distinct_points(ds: &LongitudinalDataset) -> usize {
    let mut pts: Vec<(u64, u64)> = ds
        .covariate_points()
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect();
    pts.sort_unstable();
    pts.dedup();
    pts.len()
}
