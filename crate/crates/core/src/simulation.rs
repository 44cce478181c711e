//! Synthetic paired longitudinal data and Monte Carlo size/power studies.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::data::{Delimiter, LongitudinalDataset, Observation};
use crate::design::{ErrorStructure, ModelSpec};
use crate::inference::{adjusted_lrt, bootstrap_test, replicate_rng, InferenceError, TestResult};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// `5x^2 + log(0.5t + 1) + t + 3 t^(0.5x + 1)`
pub fn test_function_f1(x: f64, t: f64) -> f64 {
    5.0 * x * x + (0.5 * t + 1.0).ln() + t + 3.0 * t.powf(0.5 * x + 1.0)
}

/// `1.5 sqrt(x) + 1.5 t^3 + 2.25 x e^t`
pub fn test_function_f2(x: f64, t: f64) -> f64 {
    1.5 * x.sqrt() + 1.5 * t.powi(3) + 2.25 * x * t.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Every group shares `f1` (outcome 1) and `f2` (outcome 2).
    NullCommonSurface,
    /// Even-numbered groups swap the two functions.
    GroupSpecificSurfaces,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// `(w, h)` i.i.d. uniform on the unit square.
    UniformUnitSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricCovariate {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Effect on outcome 1 and outcome 2.
    pub effect: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum TestKind {
    AdjustedLrt,
    Bootstrap { b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub m: usize,
    /// Visits per subject; with `max_visits` set, drawn uniformly from
    /// `n..=max_visits` per subject.
    pub n: usize,
    pub max_visits: Option<usize>,
    /// Subjects per group in order; empty means the first `m/2` subjects
    /// in group 1 and the rest in group 2.
    pub group_sizes: Vec<usize>,
    pub truth: Truth,
    /// `(beta0, beta1, gamma0, gamma1)`: outcome 1 has intercept
    /// `beta0 + z beta1`, outcome 2 `gamma0 + z gamma1`, where `z` is 0 for
    /// group 1 and 1 otherwise.
    pub intercepts: [f64; 4],
    /// Explicit `(outcome 1, outcome 2)` intercept per group, overriding
    /// `intercepts`.
    pub group_intercepts: Option<Vec<[f64; 2]>>,
    pub surface_scale: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub sigma_eps: f64,
    pub delta: f64,
    pub ar_corr: Option<f64>,
    pub visit_spacing: f64,
    /// Uniform jitter of visit times, as a fraction of the spacing (< 1).
    pub time_jitter: f64,
    pub covariate_law: CovariateLaw,
    pub parametric: Vec<ParametricCovariate>,
    pub replications: usize,
    pub seed: u64,
    pub test: TestKind,
    /// Knots per surface in the fitted models.
    pub basis_k: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 50,
            n: 20,
            max_visits: None,
            group_sizes: Vec::new(),
            truth: Truth::NullCommonSurface,
            intercepts: [10.0, 2.0, 15.0, 4.0],
            group_intercepts: None,
            surface_scale: 1.0,
            sigma1: 2.0,
            sigma2: 3.0,
            rho: 0.5,
            sigma_eps: 2.0,
            delta: 0.8,
            ar_corr: None,
            visit_spacing: 1.0,
            time_jitter: 0.0,
            covariate_law: CovariateLaw::UniformUnitSquare,
            parametric: Vec::new(),
            replications: 200,
            seed: 1,
            test: TestKind::AdjustedLrt,
            basis_k: 30,
        }
    }
}

impl SimConfig {
    pub fn group_sizes(&self) -> Vec<usize> {
        if self.group_sizes.is_empty() {
            vec![self.m / 2, self.m - self.m / 2]
        } else {
            self.group_sizes.clone()
        }
    }

    /// `(outcome 1, outcome 2)` intercept of each group.
    pub fn group_intercepts(&self) -> Vec<[f64; 2]> {
        if let Some(g) = &self.group_intercepts {
            return g.clone();
        }
        let [b0, b1, g0, g1] = self.intercepts;
        (0..self.num_groups())
            .map(|g| {
                let z = if g == 0 { 0.0 } else { 1.0 };
                [b0 + z * b1, g0 + z * g1]
            })
            .collect()
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes().len()
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |s: &str| Err(SimulationError::InvalidConfig(s.into()));
        let sizes = self.group_sizes();
        if sizes.iter().sum::<usize>() != self.m || sizes.contains(&0) {
            return bad("group sizes must be positive and sum to m");
        }
        if self.group_sizes.is_empty() && !self.m.is_multiple_of(2) {
            return bad("m must be even for the default two-group split");
        }
        if self.group_intercepts.as_ref().is_some_and(|g| g.len() != sizes.len()) {
            return bad("one intercept pair is required per group");
        }
        if self.n == 0 || self.max_visits.is_some_and(|mx| mx < self.n) {
            return bad("visit counts must be positive and max_visits >= n");
        }
        if [self.sigma1, self.sigma2, self.sigma_eps].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return bad("standard deviations must be non-negative");
        }
        if !(self.rho.abs() < 1.0) || !(self.delta > 0.0) {
            return bad("rho must lie in (-1, 1) and delta must be positive");
        }
        if self.ar_corr.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return bad("ar_corr must lie in [0, 1)");
        }
        if !(self.visit_spacing > 0.0) || !(0.0..1.0).contains(&self.time_jitter) {
            return bad("visit_spacing must be positive and time_jitter in [0, 1)");
        }
        if self.parametric.iter().any(|p| !(p.sd >= 0.0)) {
            return bad("parametric covariate sd must be non-negative");
        }
        Ok(())
    }

    /// The group-specific model fitted to data from this config.
    pub fn model_spec(&self) -> ModelSpec {
        let names: Vec<&str> = self.parametric.iter().map(|p| p.name.as_str()).collect();
        let mut spec = ModelSpec::group_specific(self.num_groups())
            .with_k(self.basis_k)
            .with_parametric(&names);
        if self.ar_corr.is_some() {
            spec = spec.with_errors(ErrorStructure::Car1OnTime);
        }
        spec
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one dataset. Subjects are generated in order with all of a
/// subject's draws taken together, so the result depends only on
/// `(cfg, replicate)`.
pub fn simulate_dataset(cfg: &SimConfig, replicate: u64) -> Result<LongitudinalDataset, SimulationError> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, replicate);
    let sizes = cfg.group_sizes();
    let intercepts = cfg.group_intercepts();
    let (s1, s2) = (cfg.sigma1, cfg.sigma2);
    let l21 = cfg.rho * s2;
    let l22 = s2 * (1.0 - cfg.rho * cfg.rho).sqrt();

    struct Row {
        group: usize,
        base: [f64; 2],
    }
    let mut obs = Vec::new();
    let mut rows = Vec::new();
    let mut subject = 0;
    for (g, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let z1 = normal(&mut rng);
            let z2 = normal(&mut rng);
            let u = [s1 * z1, l21 * z1 + l22 * z2];
            let visits = match cfg.max_visits {
                Some(mx) => rng.random_range(cfg.n..=mx),
                None => cfg.n,
            };
            let mut prev = [0.0; 2];
            let mut prev_time = 0.0;
            for j in 0..visits {
                let jitter = if cfg.time_jitter > 0.0 {
                    rng.random_range(-0.5..0.5) * cfg.time_jitter
                } else {
                    0.0
                };
                let time = cfg.visit_spacing * (j as f64 + jitter);
                let w: f64 = rng.random();
                let h: f64 = rng.random();
                let par: Vec<f64> = cfg
                    .parametric
                    .iter()
                    .map(|p| p.mean + p.sd * normal(&mut rng))
                    .collect();
                let mut eps = [normal(&mut rng), normal(&mut rng)];
                if let Some(phi) = cfg.ar_corr {
                    if j > 0 {
                        let a = phi.powf(time - prev_time);
                        let s = (1.0 - a * a).sqrt();
                        for l in 0..2 {
                            eps[l] = a * prev[l] + s * eps[l];
                        }
                    }
                }
                prev = eps;
                prev_time = time;
                let mut base = [
                    u[0] + intercepts[g][0] + cfg.sigma_eps * eps[0],
                    u[1] + intercepts[g][1] + cfg.sigma_eps * cfg.delta * eps[1],
                ];
                for (p, v) in cfg.parametric.iter().zip(&par) {
                    base[0] += p.effect[0] * v;
                    base[1] += p.effect[1] * v;
                }
                rows.push(Row { group: g + 1, base });
                obs.push(Observation {
                    subject_id: format!("s{:04}", subject + 1),
                    visit_index: j + 1,
                    time,
                    y1: 0.0,
                    y2: 0.0,
                    w,
                    h,
                    parametric: par,
                    group: g + 1,
                });
            }
            subject += 1;
        }
    }

    // Surfaces are centered at the realized covariates.
    let count = obs.len() as f64;
    let mean1 = obs.iter().map(|o| test_function_f1(o.w, o.h)).sum::<f64>() / count;
    let mean2 = obs.iter().map(|o| test_function_f2(o.w, o.h)).sum::<f64>() / count;
    for (o, row) in obs.iter_mut().zip(&rows) {
        let f1 = test_function_f1(o.w, o.h) - mean1;
        let f2 = test_function_f2(o.w, o.h) - mean2;
        let swap = cfg.truth == Truth::GroupSpecificSurfaces && row.group % 2 == 0;
        let (a, b) = if swap { (f2, f1) } else { (f1, f2) };
        o.y1 = row.base[0] + cfg.surface_scale * a;
        o.y2 = row.base[1] + cfg.surface_scale * b;
    }
    let names = cfg.parametric.iter().map(|p| p.name.clone()).collect();
    LongitudinalDataset::new(obs, names)
        .map_err(|e| SimulationError::InvalidConfig(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub statistic: f64,
    pub nu: Option<usize>,
    /// p-values under chi2_nu, chi2_{nu+1} and the mixture; a bootstrap
    /// test reports its single p-value in every slot.
    pub p_values: [f64; 3],
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRate {
    pub reference: String,
    pub rejections: usize,
    pub rate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: SimConfig,
    pub level: f64,
    pub effective_replications: usize,
    pub failures: usize,
    pub rates: Vec<RejectionRate>,
    pub replicates: Vec<ReplicateOutcome>,
}

pub const REFERENCE_NAMES: [&str; 3] = ["chisq_nu", "chisq_nu_plus_1", "mixture"];

/// Exact (Clopper-Pearson) interval for a binomial proportion.
pub fn clopper_pearson(successes: usize, trials: usize, level: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - level;
    let (x, n) = (successes as f64, trials as f64);
    let lower = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    (lower, upper)
}

fn run_test(cfg: &SimConfig, ds: &LongitudinalDataset, replicate: u64) -> Result<TestResult, InferenceError> {
    let spec = cfg.model_spec();
    match cfg.test {
        TestKind::AdjustedLrt => adjusted_lrt(ds, &spec, cfg.seed),
        TestKind::Bootstrap { b } => {
            // Bootstrap streams get their own key so they never overlap the
            // data-generating streams.
            let seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15 ^ replicate.wrapping_mul(0x2545_f491_4f6c_dd1d);
            bootstrap_test(ds, &spec, b, seed)
        }
    }
}

/// Runs `cfg.replications` simulated datasets through the configured test.
pub fn monte_carlo(cfg: &SimConfig) -> Result<MonteCarloReport, SimulationError> {
    cfg.validate()?;
    let level = 0.05;
    let replicates: Vec<ReplicateOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let result = simulate_dataset(cfg, r as u64)
                .map_err(|e| e.to_string())
                .and_then(|ds| run_test(cfg, &ds, r as u64).map_err(|e| e.to_string()));
            match result {
                Ok(t) => ReplicateOutcome {
                    replicate: r,
                    statistic: t.statistic,
                    nu: t.nu,
                    p_values: t.reference_p_values(),
                    converged: true,
                },
                Err(msg) => {
                    log::warn!("replicate {r} failed: {msg}");
                    ReplicateOutcome {
                        replicate: r,
                        statistic: f64::NAN,
                        nu: None,
                        p_values: [f64::NAN; 3],
                        converged: false,
                    }
                }
            }
        })
        .collect();
    let failures = replicates.iter().filter(|r| !r.converged).count();
    if failures * 10 > cfg.replications {
        return Err(SimulationError::TooManyFailures {
            failed: failures,
            total: cfg.replications,
        });
    }
    let effective = cfg.replications - failures;
    let rates = REFERENCE_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let rejections = replicates
                .iter()
                .filter(|r| r.converged && r.p_values[k] < level)
                .count();
            let (ci_lower, ci_upper) = clopper_pearson(rejections, effective, 0.95);
            RejectionRate {
                reference: name.to_string(),
                rejections,
                rate: rejections as f64 / effective.max(1) as f64,
                ci_lower,
                ci_upper,
            }
        })
        .collect();
    Ok(MonteCarloReport {
        config: cfg.clone(),
        level,
        effective_replications: effective,
        failures,
        rates,
        replicates,
    })
}

impl MonteCarloReport {
    /// One row per replicate: statistic, p-value per reference, convergence.
    pub fn write_replicates<W: std::io::Write>(&self, writer: W, delimiter: Delimiter) -> Result<(), csv::Error> {
        let mut wtr = csv::WriterBuilder::new().delimiter(delimiter.byte()).from_writer(writer);
        wtr.write_record(["replicate", "statistic", "nu", "p_chisq_nu", "p_chisq_nu_plus_1", "p_mixture", "converged"])?;
        for r in &self.replicates {
            wtr.write_record([
                r.replicate.to_string(),
                format!("{:?}", r.statistic),
                r.nu.map(|v| v.to_string()).unwrap_or_default(),
                format!("{:?}", r.p_values[0]),
                format!("{:?}", r.p_values[1]),
                format!("{:?}", r.p_values[2]),
                r.converged.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl fmt::Display for MonteCarloReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        let test = match c.test {
            TestKind::AdjustedLrt => "adjusted LRT".to_string(),
            TestKind::Bootstrap { b } => format!("bootstrap, B = {b}"),
        };
        writeln!(f, "Empirical rejection rates at level {} ({test})", self.level)?;
        writeln!(
            f,
            "replications: {}  effective: {}  failed: {}",
            c.replications, self.effective_replications, self.failures
        )?;
        match c.test {
            TestKind::AdjustedLrt => {
                writeln!(f, "{:>5} {:>5}  {:>8} {:>10} {:>8}", "m", "n", "chi2_nu", "chi2_nu+1", "mixture")?;
                writeln!(
                    f,
                    "{:>5} {:>5}  {:>8.3} {:>10.3} {:>8.3}",
                    c.m, c.n, self.rates[0].rate, self.rates[1].rate, self.rates[2].rate
                )?;
                for r in &self.rates {
                    writeln!(f, "{}: 95% CI [{:.3}, {:.3}]", r.reference, r.ci_lower, r.ci_upper)?;
                }
            }
            TestKind::Bootstrap { .. } => {
                let r = &self.rates[0];
                writeln!(f, "{:>5} {:>5}  {:>8}", "m", "n", "rate")?;
                writeln!(f, "{:>5} {:>5}  {:>8.3}", c.m, c.n, r.rate)?;
                writeln!(f, "95% CI [{:.3}, {:.3}]", r.ci_lower, r.ci_upper)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_function_values() {
        assert_eq!(test_function_f1(0.0, 0.0), 0.0);
        assert!((test_function_f1(1.0, 1.0) - (9.0 + 1.5f64.ln())).abs() < 1e-12);
        assert!((test_function_f1(0.0, 1.0) - 4.405465108108164).abs() < 1e-12);
        assert_eq!(test_function_f2(0.0, 0.0), 0.0);
        assert!((test_function_f2(1.0, 0.0) - 3.75).abs() < 1e-12);
        assert!((test_function_f2(1.0, 1.0) - (3.0 + 2.25 * std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn export_counts_and_split() {
        let cfg = SimConfig::default();
        let ds = simulate_dataset(&cfg, 0).unwrap();
        assert_eq!(ds.num_subjects(), 50);
        assert_eq!(ds.len(), 1000);
        assert!(ds.visits_per_subject().iter().all(|&n| n == 20));
        assert!(ds.subjects()[..25].iter().all(|s| s.group == 1));
        assert!(ds.subjects()[25..].iter().all(|s| s.group == 2));
    }

    #[test]
    fn noise_free_limit() {
        let cfg = SimConfig {
            sigma1: 0.0,
            sigma2: 0.0,
            sigma_eps: 0.0,
            m: 4,
            n: 5,
            ..SimConfig::default()
        };
        let ds = simulate_dataset(&cfg, 3).unwrap();
        let obs = ds.observations();
        let mean1 = obs.iter().map(|o| test_function_f1(o.w, o.h)).sum::<f64>() / obs.len() as f64;
        for o in obs {
            let expect = cfg.group_intercepts()[o.group - 1][0] + test_function_f1(o.w, o.h) - mean1;
            assert!((o.y1 - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_replicate() {
        let cfg = SimConfig {
            m: 6,
            n: 4,
            ..SimConfig::default()
        };
        let a = simulate_dataset(&cfg, 5).unwrap();
        let b = simulate_dataset(&cfg, 5).unwrap();
        let c = simulate_dataset(&cfg, 6).unwrap();
        assert_eq!(a.observations(), b.observations());
        assert_ne!(a.observations(), c.observations());
    }

    #[test]
    fn clopper_pearson_known_values() {
        let (lo, hi) = clopper_pearson(10, 200, 0.95);
        assert!((lo - 0.02424).abs() < 1e-4, "{lo}");
        assert!((hi - 0.08999).abs() < 1e-4, "{hi}");
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
    }
}
