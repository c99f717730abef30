//! Subcommands of the `fme` binary.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fme_core::metrics::{map_cluster, posteriors, Partition};
use fme_core::select::{designs_for, responses, rank_best};
use fme_core::simulate::{simulate, Scenario, ScenarioConfig};
use fme_core::{
    fit_model, grid_search, kfold_cv, predict_conditional, predict_response, BoundaryRule, CvMetric, CvResult,
    FitKind, FitReport, FittedModel, FmeError, MetricReport, MixturePredictor, ModelConfig, ProjectionMode,
    SelectionGrid, TimeGrid,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::io::{self, CurveTable, Predictions};

/// Points of the grid on which coefficient functions are written.
pub const RECONSTRUCTION_POINTS: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "fme", version, about = "Functional mixtures of experts")]
pub struct Cli {
    /// Worker threads for restarts, folds and lattice points (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log verbosity; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from one of the preset scenarios.
    Simulate(SimulateArgs),
    /// Fit a model and write the model, fit report and coefficient functions.
    Fit(FitArgs),
    /// Predict responses, posteriors and clusters for new curves.
    Predict(PredictArgs),
    /// Compare predictions with the observed responses and labels.
    Evaluate(EvaluateArgs),
    /// Tune by modified BIC over a parameter lattice.
    Select(SelectArgs),
    /// Cross-validate one configuration.
    Cv(CvArgs),
    /// Write the coefficient functions of a fitted model on a regular grid.
    Reconstruct(ReconstructArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    S1,
    S2,
    S3,
    S4,
    Custom,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "s1")]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 800)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid length (required for the custom scenario).
    #[arg(long)]
    pub m: Option<usize>,
    /// Measurement-noise variance (required for the custom scenario).
    #[arg(long)]
    pub sigma2_delta: Option<f64>,
    /// Variance of the latent predictor coefficients.
    #[arg(long, default_value_t = 10.0)]
    pub v_variance: f64,
    /// Output directory for `curves.csv` and `truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Fme,
    FmeLasso,
    Ifme,
}

impl From<KindArg> for FitKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Fme => FitKind::Fme,
            KindArg::FmeLasso => FitKind::FmeLasso,
            KindArg::Ifme => FitKind::Ifme,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProjectionArg {
    GramCorrected,
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    Forward,
    Anchored,
}

/// Model options; each flag overrides the config file.
#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: Option<KindArg>,
    /// JSON model configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub chi: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub varrho: Option<f64>,
    #[arg(long)]
    pub d1: Option<usize>,
    #[arg(long)]
    pub d2: Option<usize>,
    #[arg(long, value_enum)]
    pub boundary: Option<BoundaryArg>,
    /// Basis dimensions `r,p,q`.
    #[arg(long, value_parser = parse_dims)]
    pub basis_dims: Option<[usize; 3]>,
    #[arg(long, value_enum)]
    pub projection: Option<ProjectionArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub starts: Option<usize>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,p,q, got `{s}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a dimension"))?;
    }
    Ok(out)
}

impl ModelArgs {
    /// Config file (or defaults) with the flags applied on top.
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut c: ModelConfig = match &self.config {
            Some(p) => io::read_json(p)?,
            None => ModelConfig::default(),
        };
        if let Some(v) = self.model {
            c.kind = v.into();
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.chi {
            c.chi = v;
        }
        if let Some(v) = self.rho {
            c.spec.rho = v;
        }
        if let Some(v) = self.varrho {
            c.spec.varrho = v;
        }
        if let Some(v) = self.d1 {
            c.spec.d1 = v;
        }
        if let Some(v) = self.d2 {
            c.spec.d2 = v;
        }
        if let Some(v) = self.boundary {
            c.spec.boundary = match v {
                BoundaryArg::Forward => BoundaryRule::Forward,
                BoundaryArg::Anchored => BoundaryRule::Anchored,
            };
        }
        if let Some(v) = self.basis_dims {
            c.dims = v;
        }
        if let Some(v) = self.projection {
            c.projection = match v {
                ProjectionArg::GramCorrected => ProjectionMode::GramCorrected,
                ProjectionArg::Literal => ProjectionMode::Literal,
            };
        }
        if let Some(v) = self.seed {
            c.fit.seed = v;
        }
        if let Some(v) = self.tol {
            c.fit.tol = v;
        }
        if let Some(v) = self.max_iter {
            c.fit.max_iter = v;
        }
        if let Some(v) = self.starts {
            c.fit.n_starts = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Curves CSV with responses.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `model.json`, `report.json` and `coefficients.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// Gate-weighted mean of the expert means.
    Marginal,
    /// Expert mean of the MAP component given the observed response.
    Conditional,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// `model.json` written by `fit` or `select`.
    #[arg(long)]
    pub fitted: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "marginal")]
    pub mode: PredictMode,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Curves CSV carrying the observed responses and, optionally, labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON lattice: lists under `k`, `lambda`, `chi`, `rho`, `varrho`, `d1`, `d2`, `dims`.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Rpe,
    Sse,
    Corr,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of folds; the sample size gives leave-one-out.
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, value_enum, default_value = "rpe")]
    pub metric: MetricArg,
    /// Seed of the fold shuffle.
    #[arg(long, default_value_t = 0)]
    pub fold_seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub fitted: PathBuf,
    #[arg(long, default_value_t = RECONSTRUCTION_POINTS)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub model: FittedModel,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedReport {
    pub config: ModelConfig,
    pub report: FitReport,
}

/// Ground truth written next to simulated curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub scenario: String,
    pub n: usize,
    pub m: usize,
    pub sigma2_delta: f64,
    pub k: usize,
    pub seed: u64,
    pub v_variance: f64,
    pub grid: Vec<f64>,
    pub labels: Vec<usize>,
    pub beta0: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub alpha0: Vec<f64>,
    /// `beta_k` on the grid, one row per expert.
    pub beta: Vec<Vec<f64>>,
    /// `alpha_k` on the grid, one row per component.
    pub alpha: Vec<Vec<f64>>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(PathBuf, PathBuf)> {
    let (scenario, mut cfg) = match a.scenario {
        ScenarioArg::Custom => {
            let (Some(m), Some(s2)) = (a.m, a.sigma2_delta) else {
                bail!("the custom scenario needs --m and --sigma2-delta");
            };
            let mut c = ScenarioConfig::preset(Scenario::S1, a.n, a.seed);
            c.m = m;
            c.sigma2_delta = s2;
            ("custom".to_string(), c)
        }
        s => {
            let sc = match s {
                ScenarioArg::S1 => Scenario::S1,
                ScenarioArg::S2 => Scenario::S2,
                ScenarioArg::S3 => Scenario::S3,
                _ => Scenario::S4,
            };
            if a.m.is_some() || a.sigma2_delta.is_some() {
                bail!("--m and --sigma2-delta only apply to the custom scenario");
            }
            (format!("{sc:?}"), ScenarioConfig::preset(sc, a.n, a.seed))
        }
    };
    cfg.v_variance = a.v_variance;
    let ds = simulate(&cfg)?;
    let meta = vec![
        ("scenario".to_string(), scenario.clone()),
        ("n".into(), cfg.n.to_string()),
        ("m".into(), cfg.m.to_string()),
        ("sigma2_delta".into(), cfg.sigma2_delta.to_string()),
        ("k".into(), cfg.k.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("v_variance".into(), cfg.v_variance.to_string()),
    ];
    let table = CurveTable {
        ids: (1..=cfg.n).map(|i| i.to_string()).collect(),
        curves: ds.curves.clone(),
        meta,
    };
    let curves_path = a.out.join("curves.csv");
    io::write_curves(&curves_path, &table)?;
    let net = &cfg.true_params;
    let truth = TruthFile {
        scenario,
        n: cfg.n,
        m: cfg.m,
        sigma2_delta: cfg.sigma2_delta,
        k: cfg.k,
        seed: cfg.seed,
        v_variance: cfg.v_variance,
        grid: ds.grid.points().to_vec(),
        labels: ds.labels(),
        beta0: net.beta0.clone(),
        sigma2: net.sigma2.clone(),
        alpha0: net.alpha0.clone(),
        beta: net.beta_funcs.iter().map(|f| f.sample(&ds.grid)).collect(),
        alpha: net.alpha_funcs.iter().map(|f| f.sample(&ds.grid)).collect(),
    };
    let truth_path = a.out.join("truth.json");
    io::write_json(&truth_path, &truth)?;
    Ok((curves_path, truth_path))
}

/// Coefficient functions of `model` on an even grid over `[0, 1]`.
pub fn coefficient_table(model: &FittedModel, points: usize) -> Result<String> {
    let grid = TimeGrid::even(points)?;
    let (alpha, beta) = model.reconstruct(&grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=alpha.nrows()).map(|k| format!("alpha_{k}")));
    header.extend((1..=beta.nrows()).map(|k| format!("beta_{k}")));
    w.write_record(&header)?;
    for (j, t) in grid.points().iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(alpha.column(j).iter().map(f64::to_string));
        rec.extend(beta.column(j).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn write_fit(out: &Path, config: &ModelConfig, model: &FittedModel, report: &FitReport) -> Result<()> {
    io::write_json(
        &out.join("model.json"),
        &SavedModel {
            config: *config,
            model: model.clone(),
        },
    )?;
    io::write_json(
        &out.join("report.json"),
        &SavedReport {
            config: *config,
            report: report.clone(),
        },
    )?;
    io::write_text(&out.join("coefficients.csv"), &coefficient_table(model, RECONSTRUCTION_POINTS)?)
}

fn training_table(path: &Path) -> Result<CurveTable> {
    let t = io::read_curves(path)?;
    if !t.has_responses() {
        bail!("{}: every row needs a `y` value for fitting", path.display());
    }
    Ok(t)
}

pub fn cmd_fit(a: &FitArgs) -> Result<SavedModel> {
    let config = a.model.resolve()?;
    let table = training_table(&a.data)?;
    let (model, report) = fit_model(&config, &table.curves)?;
    write_fit(&a.out, &config, &model, &report)?;
    Ok(SavedModel { config, model })
}

/// Predictions of a saved model for the curves in `table`.
pub fn predict_table(saved: &SavedModel, table: &CurveTable, mode: PredictMode) -> Result<Predictions> {
    let designs = designs_for(&saved.model, &table.curves, saved.config.projection)?;
    let y = table.has_responses().then(|| responses(&table.curves)).transpose()?;
    let (gates, _) = saved.model.components(&designs)?;
    let tau = match &y {
        Some(y) => posteriors(&saved.model.log_joint(&designs, y)?)?,
        None => gates,
    };
    let yhat: DVector<f64> = match mode {
        PredictMode::Marginal => predict_response(&saved.model, &designs)?,
        PredictMode::Conditional => {
            let y = y.as_ref().ok_or_else(|| anyhow!("conditional prediction needs a `y` value on every row"))?;
            predict_conditional(&saved.model, &designs, y)?
        }
    };
    let labels = map_cluster(&tau).labels;
    Ok(Predictions {
        ids: table.ids.clone(),
        yhat: yhat.iter().copied().collect(),
        tau: tau.row_iter().map(|r| r.iter().copied().collect()).collect(),
        labels,
    })
}

pub fn cmd_predict(a: &PredictArgs) -> Result<Predictions> {
    let saved: SavedModel = io::read_json(&a.fitted)?;
    let table = io::read_curves(&a.data)?;
    let p = predict_table(&saved, &table, a.mode)?;
    io::write_text(&a.out, &io::format_predictions(&p)?)?;
    Ok(p)
}

pub fn evaluate(pred: &Predictions, truth: &CurveTable) -> Result<MetricReport> {
    if pred.ids.len() != truth.ids.len() {
        bail!("{} predictions for {} observations", pred.ids.len(), truth.ids.len());
    }
    if let Some(i) = (0..pred.ids.len()).find(|&i| pred.ids[i] != truth.ids[i]) {
        bail!("row {}: prediction id `{}` does not match `{}`", i + 2, pred.ids[i], truth.ids[i]);
    }
    let y: Vec<f64> = truth
        .curves
        .iter()
        .map(|c| c.response)
        .collect::<Option<_>>()
        .ok_or_else(|| anyhow!("the truth file needs a `y` value on every row"))?;
    let parts = match truth.labels() {
        Some(z) => {
            let k = z.iter().chain(&pred.labels).copied().max().unwrap_or(1);
            Some((Partition::new(z, k)?, Partition::new(pred.labels.clone(), k)?))
        }
        None => None,
    };
    Ok(MetricReport::compute(
        &y,
        &pred.yhat,
        parts.as_ref().map(|p| &p.0),
        parts.as_ref().map(|p| &p.1),
    )?)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<MetricReport> {
    let report = evaluate(&io::read_predictions(&a.pred)?, &io::read_curves(&a.truth)?)?;
    match &a.out {
        Some(p) => io::write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

/// Contents of `selection.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub kind: FitKind,
    pub chosen: ModelConfig,
    pub best_row: usize,
    pub mbic: f64,
    pub df: usize,
    pub table: Vec<fme_core::select::SelectionRow>,
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn selection_table(rows: &[fme_core::select::SelectionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k", "lambda", "chi", "rho", "varrho", "d1", "d2", "r", "p", "q", "df", "loglik", "objective", "bic", "mbic",
        "error",
    ])?;
    for r in rows {
        let c = &r.config;
        w.write_record([
            c.k.to_string(),
            c.lambda.to_string(),
            c.chi.to_string(),
            c.spec.rho.to_string(),
            c.spec.varrho.to_string(),
            c.spec.d1.to_string(),
            c.spec.d2.to_string(),
            c.dims[0].to_string(),
            c.dims[1].to_string(),
            c.dims[2].to_string(),
            fmt_opt(r.df),
            fmt_opt(r.loglik),
            fmt_opt(r.objective),
            fmt_opt(r.bic),
            fmt_opt(r.mbic),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn cmd_select(a: &SelectArgs) -> Result<SelectionFile> {
    let base = a.model.resolve()?;
    let grid: SelectionGrid = io::read_json(&a.grid)?;
    let table = training_table(&a.data)?;
    let sel = grid_search(&table.curves, &grid, &base)?;
    debug_assert_eq!(rank_best(&sel.table), Some(sel.best));
    let file = SelectionFile {
        kind: base.kind,
        chosen: sel.chosen,
        best_row: sel.best,
        mbic: sel.report.mbic,
        df: sel.report.df,
        table: sel.table.clone(),
    };
    io::write_json(&a.out.join("selection.json"), &file)?;
    io::write_text(&a.out.join("mbic_table.csv"), &selection_table(&sel.table)?)?;
    write_fit(&a.out, &sel.chosen, &sel.model, &sel.report)?;
    Ok(file)
}

pub fn cmd_cv(a: &CvArgs) -> Result<CvResult> {
    let config = a.model.resolve()?;
    let table = training_table(&a.data)?;
    let metric = match a.metric {
        MetricArg::Rpe => CvMetric::Rpe,
        MetricArg::Sse => CvMetric::Sse,
        MetricArg::Corr => CvMetric::Corr,
    };
    let res = kfold_cv(&config, &table.curves, a.folds, metric, a.fold_seed)?;
    match &a.out {
        Some(p) => io::write_json(p, &res)?,
        None => println!("{}", serde_json::to_string_pretty(&res)?),
    }
    Ok(res)
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let saved: SavedModel = io::read_json(&a.fitted)?;
    io::write_text(&a.out, &coefficient_table(&saved.model, a.points)?)
}

/// Exit status for an error: 4 selection failure, 3 numerical failure,
/// 2 anything else (input, schema, I/O).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<FmeError>()) {
        Some(FmeError::Selection(_)) => 4,
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(|_| ()),
        Command::Fit(a) => cmd_fit(a).map(|_| ()),
        Command::Predict(a) => cmd_predict(a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Select(a) => cmd_select(a).map(|_| ()),
        Command::Cv(a) => cmd_cv(a).map(|_| ()),
        Command::Reconstruct(a) => cmd_reconstruct(a),
    }
}
