//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_dataset, save_dataset, summarize, ColumnSchema, DataError, Delimiter, LongitudinalDataset};
use crate::design::{DesignError, ModelSpec};
use crate::inference::{adjusted_lrt, bootstrap_test, InferenceError, TestMethod, TestResult};
use crate::lmm::{fit, FittedModel, LmmError};
use crate::simulation::{monte_carlo, simulate_dataset, SimConfig, SimulationError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "paired-surface", version, about = "Joint surface models for paired longitudinal outcomes")]
pub struct Cli {
    /// Worker threads for replicate loops (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the joint model and write the model file and reports.
    Fit(FitArgs),
    /// Test equality of the group surfaces.
    Test(TestArgs),
    /// Simulate a dataset, or run a Monte Carlo size/power study.
    Simulate(SimulateArgs),
    /// Evaluate fitted surfaces on a regular grid.
    PredictGrid(PredictArgs),
    /// Describe a dataset.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Tsv,
}

impl From<Format> for Delimiter {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => Delimiter::Csv,
            Format::Tsv => Delimiter::Tsv,
        }
    }
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Tsv => "tsv",
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Delimited data file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON column mapping; defaults to subject,time,y1,y2,group,w,h.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model specification (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded in output headers; fitting draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Bootstrap,
    AdjustedLrt,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Full (group-specific) model specification (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "bootstrap")]
    pub method: MethodArg,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 1000)]
    pub b: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON); defaults to the built-in design.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo replications; overrides the config.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Bootstrap replicates per test; overrides the config's test with a
    /// bootstrap test.
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Write one simulated dataset (this replicate index) instead of
    /// running the study.
    #[arg(long)]
    pub dataset: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 50)]
    pub grid_res: usize,
    /// Only this group (1-based); all groups by default.
    #[arg(long)]
    pub group: Option<usize>,
    /// Grid bounds `w_min,w_max,h_min,h_max`; defaults to the range of
    /// the group hulls.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub bounds: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write the summary to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read config `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("i/o error on `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// 2 for user or configuration errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        let numerical = |e: &LmmError| {
            matches!(
                e,
                LmmError::NonPositiveDefinite(_) | LmmError::NoConvergence { .. } | LmmError::RankDeficientX
            )
        };
        match self {
            CliError::Lmm(e) => {
                if numerical(e) {
                    3
                } else {
                    2
                }
            }
            CliError::Inference(InferenceError::Lmm(e)) if numerical(e) => 3,
            CliError::Inference(InferenceError::TooManyFailures { .. }) => 3,
            CliError::Simulation(SimulationError::TooManyFailures { .. }) => 3,
            CliError::Simulation(SimulationError::Inference(InferenceError::Lmm(e))) if numerical(e) => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Data(_) => "data",
            CliError::Design(_) => "design",
            CliError::Lmm(_) => "model",
            CliError::Inference(_) => "inference",
            CliError::Simulation(_) => "simulation",
            CliError::Io { .. } => "io",
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .unwrap_or_else(|_| "{\"error\":\"unknown\"}".into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let value = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((value, text))
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64, CliError> {
    seed.ok_or_else(|| CliError::Usage(format!("`{command}` requires --seed")))
}

/// Hex SHA-256 of the canonical JSON of a run description, truncated to
/// 16 characters.
fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).unwrap_or_default();
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct Header {
    seed: Option<u64>,
    hash: String,
}

impl Header {
    fn new<T: Serialize>(seed: Option<u64>, run: &T) -> Self {
        Self {
            seed,
            hash: config_hash(run),
        }
    }

    fn text(&self) -> String {
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        format!("# paired-surface {VERSION} seed={seed} config={}\n", self.hash)
    }
}

struct Output {
    dir: PathBuf,
    header: Header,
}

impl Output {
    fn new(dir: &Path, header: Header) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<std::io::BufWriter<fs::File>, CliError> {
        let path = self.path(name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(self.header.text().as_bytes()).map_err(io_err(&path))?;
        Ok(w)
    }

    fn write_text(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = self.create(name)?;
        w.write_all(body.as_bytes()).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))
    }

    fn write_table(&self, name: &str, fmt: Format, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        let w = self.create(name)?;
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(Delimiter::from(fmt).byte())
            .from_writer(w);
        let csv_err = |e: csv::Error| CliError::Data(DataError::Csv(e));
        wtr.write_record(header).map_err(csv_err)?;
        for r in rows {
            wtr.write_record(r).map_err(csv_err)?;
        }
        wtr.flush().map_err(io_err(&path))
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn load_data(args: &DataArgs, parametric: &[String]) -> Result<(LongitudinalDataset, ColumnSchema), CliError> {
    let schema = match &args.columns {
        Some(path) => read_json::<ColumnSchema>(path)?.0,
        None => ColumnSchema {
            parametric: parametric.to_vec(),
            ..ColumnSchema::default()
        },
    };
    let ds = load_dataset(&args.data, &schema, args.format.into())?;
    Ok((ds, schema))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        // The global pool can only be set once per process; a second call
        // (as in tests) keeps the first configuration.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Test(a) => cmd_test(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::PredictGrid(a) => cmd_predict_grid(&a),
        Command::Summarize(a) => cmd_summarize(&a),
    }
}

#[derive(Serialize)]
struct FitRun<'a> {
    command: &'a str,
    spec: &'a ModelSpec,
    schema: &'a ColumnSchema,
    data: String,
}

fn data_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let (spec, _) = read_json::<ModelSpec>(&a.spec)?;
    let (ds, schema) = load_data(&a.data, &spec.parametric_terms)?;
    let run = FitRun {
        command: "fit",
        spec: &spec,
        schema: &schema,
        data: data_digest(&a.data.data)?,
    };
    let out = Output::new(&a.out, Header::new(a.seed, &run))?;
    let model = fit(&ds, &spec)?;
    model.save(out.path("model.json"))?;
    out.write_text("report.txt", &fit_report(&model, &ds))?;

    let mut rows = Vec::new();
    if let Some(iv) = &model.intervals {
        for p in iv {
            rows.push(vec![
                "variance".into(),
                p.name.clone(),
                num(p.estimate),
                num(p.transformed_se),
                num(p.lower),
                num(p.upper),
            ]);
        }
    }
    for (i, name) in model.fixed_names.iter().enumerate() {
        let (est, se) = (model.theta[i], model.theta_se[i]);
        rows.push(vec![
            "fixed".into(),
            name.clone(),
            num(est),
            num(se),
            num(est - 1.959963984540054 * se),
            num(est + 1.959963984540054 * se),
        ]);
    }
    out.write_table(
        &format!("parameters.{}", a.data.format.ext()),
        a.data.format,
        &["kind", "name", "estimate", "se", "lower", "upper"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = ds
        .observations()
        .iter()
        .enumerate()
        .map(|(r, o)| {
            vec![
                o.subject_id.clone(),
                o.visit_index.to_string(),
                num(o.time),
                o.group.to_string(),
                num(model.fitted_mu[0][r]),
                num(model.residuals[0][r]),
                num(model.fitted_mu[1][r]),
                num(model.residuals[1][r]),
            ]
        })
        .collect();
    out.write_table(
        &format!("residuals.{}", a.data.format.ext()),
        a.data.format,
        &["subject", "visit", "time", "group", "mean1", "resid1", "mean2", "resid2"],
        &rows,
    )
}

/// Human-readable parameter table of a fitted model.
pub fn fit_report(model: &FittedModel, ds: &LongitudinalDataset) -> String {
    let mut s = String::new();
    let crit = match model.criterion {
        crate::design::Criterion::Ml => "ML",
        crate::design::Criterion::Reml => "REML",
    };
    let _ = writeln!(s, "subjects: {}  observations: {}", ds.num_subjects(), ds.len());
    let _ = writeln!(s, "criterion: {crit}  log-likelihood: {:.4}", model.loglik);
    let _ = writeln!(
        s,
        "iterations: {}  gradient norm: {:.2e}",
        model.diagnostics.iterations, model.diagnostics.gradient_norm
    );
    if !model.diagnostics.at_bounds.is_empty() {
        let _ = writeln!(s, "at bounds: {}", model.diagnostics.at_bounds.join(", "));
    }
    let _ = writeln!(s, "\nVariance components");
    let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12}", "parameter", "estimate", "lower95", "upper95");
    match &model.intervals {
        Some(iv) => {
            for p in iv {
                let _ = writeln!(s, "{:<12} {:>12.4} {:>12.4} {:>12.4}", p.name, p.estimate, p.lower, p.upper);
            }
        }
        None => {
            let t = &model.tau;
            for (name, v) in [
                ("sigma1", t.sigma1_sq.sqrt()),
                ("sigma2", t.sigma2_sq.sqrt()),
                ("rho", t.rho),
                ("delta", t.delta),
                ("sigma_eps", t.sigma_eps_sq.sqrt()),
            ] {
                let _ = writeln!(s, "{name:<12} {v:>12.4}");
            }
        }
    }
    let _ = writeln!(s, "\nFixed effects");
    let _ = writeln!(s, "{:<24} {:>12} {:>12}", "term", "estimate", "se");
    for (i, name) in model.fixed_names.iter().enumerate() {
        let _ = writeln!(s, "{name:<24} {:>12.4} {:>12.4}", model.theta[i], model.theta_se[i]);
    }
    let _ = writeln!(s, "\nSmooth terms");
    let _ = writeln!(s, "{:<8} {:<8} {:>6} {:>8}", "outcome", "group", "K", "EDF");
    for (sm, edf) in model.smooths.iter().zip(&model.edf) {
        let g = sm.group.map(|g| g.to_string()).unwrap_or_else(|| "all".into());
        let _ = writeln!(s, "{:<8} {g:<8} {:>6} {edf:>8.2}", sm.outcome + 1, sm.basis_dim());
    }
    s
}

#[derive(Serialize)]
struct TestRun<'a> {
    command: &'a str,
    spec: &'a ModelSpec,
    schema: &'a ColumnSchema,
    data: String,
    method: &'a str,
    b: usize,
}

pub fn cmd_test(a: &TestArgs) -> Result<(), CliError> {
    let seed = require_seed(a.seed, "test")?;
    let (spec, _) = read_json::<ModelSpec>(&a.spec)?;
    let (ds, schema) = load_data(&a.data, &spec.parametric_terms)?;
    let method = match a.method {
        MethodArg::Bootstrap => "bootstrap",
        MethodArg::AdjustedLrt => "adjusted_lrt",
    };
    let run = TestRun {
        command: "test",
        spec: &spec,
        schema: &schema,
        data: data_digest(&a.data.data)?,
        method,
        b: a.b,
    };
    let out = Output::new(&a.out, Header::new(Some(seed), &run))?;
    let result = match a.method {
        MethodArg::Bootstrap => bootstrap_test(&ds, &spec, a.b, seed)?,
        MethodArg::AdjustedLrt => adjusted_lrt(&ds, &spec, seed)?,
    };
    out.write_text("test_report.txt", &test_report(&result))?;
    let json = serde_json::to_string_pretty(&result).expect("test result serializes");
    out.write_text("test_result.json", &(json + "\n"))?;
    if result.method == TestMethod::Bootstrap {
        let rows: Vec<Vec<String>> = result
            .per_replicate_status
            .iter()
            .enumerate()
            .scan(0usize, |next, (r, status)| {
                let stat = match status {
                    crate::inference::ReplicateStatus::Failed => String::new(),
                    _ => {
                        let v = result.bootstrap_stats[*next];
                        *next += 1;
                        num(v)
                    }
                };
                let status = serde_json::to_value(status)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                Some(vec![r.to_string(), stat, status])
            })
            .collect();
        out.write_table(
            &format!("bootstrap_stats.{}", a.data.format.ext()),
            a.data.format,
            &["replicate", "statistic", "status"],
            &rows,
        )?;
    }
    Ok(())
}

pub fn test_report(r: &TestResult) -> String {
    let mut s = String::new();
    match r.method {
        TestMethod::Bootstrap => {
            let _ = writeln!(s, "Wild bootstrap test of equal group surfaces");
            let _ = writeln!(s, "log-likelihood null: {:.4}  full: {:.4}", r.loglik_null, r.loglik_full);
            let _ = writeln!(s, "statistic (l_full - l_null): {:.4}", r.statistic);
            let _ = writeln!(s, "replicates: {}  effective: {}  failed: {}", r.b, r.b_effective, r.failures());
            let neg = r
                .per_replicate_status
                .iter()
                .filter(|s| **s == crate::inference::ReplicateStatus::Negative)
                .count();
            let _ = writeln!(s, "negative replicate statistics: {neg}");
            let _ = writeln!(s, "p-value: {:.4}", r.p_value);
        }
        TestMethod::AdjustedLrt => {
            let _ = writeln!(s, "Adjusted likelihood ratio test of equal group surfaces");
            let _ = writeln!(s, "log-likelihood null: {:.4}  full: {:.4}", r.loglik_null, r.loglik_full);
            let _ = writeln!(s, "statistic 2(l_full - l_null): {:.4}", r.statistic);
            let nu = r.nu.unwrap_or(0);
            let _ = writeln!(s, "nu: {nu}");
            if let (Some(a), Some(b)) = (r.p_chisq_nu, r.p_chisq_nu1) {
                let _ = writeln!(s, "p (chi2_{nu}): {a:.4e}");
                let _ = writeln!(s, "p (chi2_{}): {b:.4e}", nu + 1);
            }
            let _ = writeln!(s, "p-value (mixture): {:.4e}", r.p_value);
            let _ = writeln!(s, "\nUnpenalized basis sizes");
            let _ = writeln!(s, "{:<8} {:<8} {:>8} {:>4}", "outcome", "group", "EDF", "K");
            for e in &r.edf_bases {
                let g = e.group.map(|g| g.to_string()).unwrap_or_else(|| "all".into());
                let flag = if e.floored { "  (raised to null space + 1)" } else { "" };
                let _ = writeln!(s, "{:<8} {g:<8} {:>8.2} {:>4}{flag}", e.outcome + 1, e.edf, e.k);
            }
        }
    }
    s
}

#[derive(Serialize)]
struct SimRun<'a> {
    command: &'a str,
    config: &'a SimConfig,
    dataset: Option<u64>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let seed = require_seed(a.seed, "simulate")?;
    let mut cfg = match &a.config {
        Some(path) => read_json::<SimConfig>(path)?.0,
        None => SimConfig::default(),
    };
    cfg.seed = seed;
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(b) = a.b {
        cfg.test = crate::simulation::TestKind::Bootstrap { b };
    }
    cfg.validate()?;
    let run = SimRun {
        command: "simulate",
        config: &cfg,
        dataset: a.dataset,
    };
    let out = Output::new(&a.out, Header::new(Some(seed), &run))?;
    let ext = a.format.ext();
    if let Some(rep) = a.dataset {
        let ds = simulate_dataset(&cfg, rep)?;
        let name = format!("dataset.{ext}");
        let path = out.path(&name);
        save_dataset(&ds, &path, a.format.into())?;
        // prepend the header comment
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        return out.write_text(&name, &body);
    }
    let report = monte_carlo(&cfg)?;
    out.write_text("summary.txt", &report.to_string())?;
    let name = format!("replicates.{ext}");
    let path = out.path(&name);
    let mut w = out.create(&name)?;
    report
        .write_replicates(&mut w, a.format.into())
        .map_err(|e| CliError::Data(DataError::Csv(e)))?;
    w.flush().map_err(io_err(&path))
}

/// Regular `res x res` grid over `[w0, w1] x [h0, h1]`, `w` varying fastest.
pub fn regular_grid(bounds: [f64; 4], res: usize) -> Vec<[f64; 2]> {
    let [w0, w1, h0, h1] = bounds;
    let at = |a: f64, b: f64, i: usize| {
        if res == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (res - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        for i in 0..res {
            out.push([at(w0, w1, i), at(h0, h1, j)]);
        }
    }
    out
}

#[derive(Serialize)]
struct PredictRun {
    command: &'static str,
    model: String,
    grid_res: usize,
    group: Option<usize>,
    bounds: Option<Vec<f64>>,
}

pub fn cmd_predict_grid(a: &PredictArgs) -> Result<(), CliError> {
    if a.grid_res == 0 {
        return Err(CliError::Usage("--grid-res must be positive".into()));
    }
    let model = FittedModel::load(&a.model)?;
    let groups: Vec<usize> = match a.group {
        Some(g) if g == 0 || g > model.spec.num_groups => return Err(LmmError::UnknownGroup(g).into()),
        Some(g) => vec![g],
        None => (1..=model.spec.num_groups).collect(),
    };
    let bounds = match &a.bounds {
        Some(b) => [b[0], b[1], b[2], b[3]],
        None => {
            let pts = model.group_hulls.iter().flatten();
            let mut bb = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
            for p in pts {
                bb[0] = bb[0].min(p[0]);
                bb[1] = bb[1].max(p[0]);
                bb[2] = bb[2].min(p[1]);
                bb[3] = bb[3].max(p[1]);
            }
            bb
        }
    };
    let run = PredictRun {
        command: "predict-grid",
        model: data_digest(&a.model)?,
        grid_res: a.grid_res,
        group: a.group,
        bounds: a.bounds.clone(),
    };
    let out = Output::new(&a.out, Header::new(None, &run))?;
    let grid = regular_grid(bounds, a.grid_res);
    let mut rows = Vec::new();
    for &g in &groups {
        for outcome in 1..=2 {
            for p in model.predict_surface(g, outcome, &grid)? {
                rows.push(vec![
                    g.to_string(),
                    outcome.to_string(),
                    num(p.w),
                    num(p.h),
                    num(p.fit),
                    num(p.se),
                    p.extrapolated.to_string(),
                ]);
            }
        }
    }
    out.write_table(
        &format!("grid.{}", a.format.ext()),
        a.format,
        &["group", "outcome", "w", "h", "fit", "se", "extrapolated"],
        &rows,
    )
}

pub fn cmd_summarize(a: &SummarizeArgs) -> Result<(), CliError> {
    let (ds, _) = load_data(&a.data, &[])?;
    let text = summarize(&ds).to_string();
    print!("{text}");
    if let Some(dir) = &a.out {
        let run = ("summarize", data_digest(&a.data.data)?);
        Output::new(dir, Header::new(None, &run))?.write_text("summary.txt", &text)?;
    }
    Ok(())
}
