//! Command-line interface: `weights`, `fit`, `predict` and `simulate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::boost::DesignBlock;
use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{fit_fgls_comparator, fit_sdem, predict, FitConfig, FitResult, Variant};
use crate::simstudy::{point_errors, replication_seeds, generate_sized, run_study, MetricsTable, ScenarioConfig};
use crate::weights::{build_circular, build_knn, row_normalize, validate, Coordinates, WeightMatrix};

/// Environment variable overriding the number of worker threads.
pub const THREADS_ENV: &str = "SPATBOOST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spatboost", version, about = "Model-based gradient boosting for spatial error models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a spatial weight matrix and write it as `i,j,w` triplets.
    Weights(WeightsArgs),
    /// Fit a model to a data file.
    Fit(FitArgs),
    /// Predict from a fitted model.
    Predict(PredictArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Circular,
    Knn,
}

#[derive(Debug, Args, Serialize)]
pub struct WeightsArgs {
    #[arg(long, value_enum)]
    pub mode: WeightsMode,
    /// Number of locations (circular mode).
    #[arg(long)]
    pub n: Option<usize>,
    /// Neighbours on each side (circular) or nearest neighbours (knn).
    #[arg(long)]
    pub k: usize,
    /// Coordinate file with header `id,x,y` (knn mode).
    #[arg(long)]
    pub coords: Option<PathBuf>,
    #[arg(long)]
    pub normalize: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub response: String,
    /// Row-normalized weight matrix (triplet CSV).
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value = "ds-ds")]
    pub variant: String,
    /// Covariate columns; defaults to every column except the response.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Append spatial lags `W.<name>` of every covariate.
    #[arg(long)]
    pub lags: bool,
    /// Center and scale the design columns.
    #[arg(long)]
    pub standardize: bool,
    /// Learning rate.
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_LEARNING_RATE)]
    pub step: f64,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_M_MAX)]
    pub mmax: usize,
    /// Fixed stopping iteration; disables tuning.
    #[arg(long)]
    pub mstop: Option<usize>,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// `fit.json` written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Weight matrix for the new locations; required when the model uses lags.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// TOML scenario file; defaults apply to missing keys.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub nsim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub q: Option<usize>,
    /// One or more neighbourhood sizes; each gives one scenario block.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub mmax: Option<usize>,
    /// Write the first replication's train and test data here.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Centering and scaling of one design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub name: String,
    pub mean: f64,
    pub scale: f64,
}

/// Everything `predict` needs to rebuild the design of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub response: String,
    pub covariates: Vec<String>,
    pub lags: bool,
    pub standardization: Option<Vec<ColumnTransform>>,
    pub fit: FitResult,
    pub fitted_values: Vec<f64>,
}

pub const LAG_PREFIX: &str = "W.";

fn read_weights(path: &Path) -> Result<WeightMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    WeightMatrix::read_csv(std::io::BufReader::new(file))
}

/// Covariates followed by their lags when `w` is given.
pub fn build_design(table: &DataTable, covariates: &[String], w: Option<&WeightMatrix>) -> Result<DesignBlock> {
    let n = table.n_rows();
    let mut names = covariates.to_vec();
    let mut data = Vec::with_capacity(n * covariates.len() * 2);
    for c in covariates {
        data.extend_from_slice(table.require(c)?);
    }
    if let Some(w) = w {
        if w.n() != n {
            return Err(Error::DimensionMismatch { context: "weight matrix vs data rows", expected: n, found: w.n() });
        }
        for c in covariates {
            data.extend(w.lag(table.require(c)?)?);
            names.push(format!("{LAG_PREFIX}{c}"));
        }
    }
    DesignBlock::new(DMatrix::from_column_slice(n, names.len(), &data), names)
}

fn standardize(design: &DesignBlock) -> Result<(DesignBlock, Vec<ColumnTransform>)> {
    let n = design.n() as f64;
    let transforms = design
        .names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = design.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let scale = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(scale > 0.0) {
                return Err(Error::DegenerateColumn { name: name.clone() });
            }
            Ok(ColumnTransform { name: name.clone(), mean, scale })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((apply_transforms(design, &transforms)?, transforms))
}

fn apply_transforms(design: &DesignBlock, transforms: &[ColumnTransform]) -> Result<DesignBlock> {
    let mut m = design.matrix().clone();
    for t in transforms {
        let j = design
            .index_of(&t.name)
            .ok_or_else(|| Error::Schema(format!("column '{}' missing", t.name)))?;
        for v in m.column_mut(j).iter_mut() {
            *v = (*v - t.mean) / t.scale;
        }
    }
    DesignBlock::new(m, design.names().to_vec())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

pub fn cmd_weights(args: &WeightsArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("weights", to_value(args));
    let raw = match args.mode {
        WeightsMode::Circular => {
            let n = args.n.ok_or_else(|| Error::InvalidParameter("--n is required in circular mode".into()))?;
            build_circular(n, args.k)?
        }
        WeightsMode::Knn => {
            let path = args
                .coords
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("--coords is required in knn mode".into()))?;
            let file = fs::File::open(path).map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
            let coords = Coordinates::read_csv(std::io::BufReader::new(file))?;
            manifest.add_input(path)?;
            build_knn(&coords, args.k)?
        }
    };
    let w = if args.normalize { row_normalize(&raw)? } else { raw };
    let report = validate(&w);
    prepare_out(&args.out)?;
    w.write_csv(std::io::BufWriter::new(fs::File::create(args.out.join("weights.csv"))?))?;
    manifest.add_output(&args.out, "weights.csv")?;
    println!(
        "rows {}  nnz {}  max row sum {}  degree {}..{}",
        w.n(),
        w.nnz(),
        report.max_abs_row_sum,
        report.min_degree,
        report.max_degree
    );
    manifest.finish(&args.out, start.elapsed())
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let start = Instant::now();
    let variant: Variant = args.variant.parse()?;
    let table = DataTable::from_path(&args.data)?;
    let w = Arc::new(read_weights(&args.weights)?);
    let y = table.require(&args.response)?.to_vec();
    let covariates: Vec<String> = match &args.covariates {
        Some(c) => c.clone(),
        None => table.names().iter().filter(|n| **n != args.response).cloned().collect(),
    };
    if covariates.is_empty() {
        return Err(Error::EmptyDesign);
    }
    if covariates.contains(&args.response) {
        return Err(Error::Schema("the response cannot also be a covariate".into()));
    }
    let raw = build_design(&table, &covariates, args.lags.then_some(&*w))?;
    let (design, standardization) = if args.standardize {
        let (d, t) = standardize(&raw)?;
        (d, Some(t))
    } else {
        (raw, None)
    };

    let cfg = FitConfig {
        learning_rate: args.step,
        m_max: args.mmax,
        folds: args.folds,
        tau: args.tau,
        seed: args.seed,
        fixed_m_stop: args.mstop,
        ..FitConfig::for_variant(variant)
    };
    let fit = if variant == Variant::Fgls {
        fit_fgls_comparator(&design, &y, &w, &cfg)?
    } else {
        fit_sdem(&design, &y, &w, &cfg)?
    };
    let fitted_values = predict(&fit, &design)?;

    prepare_out(&args.out)?;
    let mut wtr = csv::Writer::from_path(args.out.join("coefficients.csv"))?;
    wtr.write_record(["name", "estimate"])?;
    wtr.write_record(["(intercept)".to_string(), format!("{:?}", fit.intercept)])?;
    for (n, c) in fit.names.iter().zip(&fit.coefficients) {
        wtr.write_record([n.clone(), format!("{c:?}")])?;
    }
    wtr.flush()?;
    drop(wtr);

    println!("variant {}  lambda {:.6}  sigma2 {:.6}  m_opt {}", fit.variant, fit.lambda_hat, fit.sigma2_hat, fit.m_opt);
    println!("selected ({}): {}", fit.selected.len(), fit.selected.join(", "));
    for warning in &fit.warnings {
        eprintln!("warning: {warning}");
    }
    let artifact = FitArtifact {
        response: args.response.clone(),
        covariates,
        lags: args.lags,
        standardization,
        fit,
        fitted_values,
    };
    serde_json::to_writer_pretty(fs::File::create(args.out.join("fit.json"))?, &artifact)?;

    let mut manifest = RunManifest::new("fit", serde_json::json!({ "args": to_value(args), "fit_config": to_value(&cfg) }));
    manifest.add_input(&args.data)?;
    manifest.add_input(&args.weights)?;
    manifest.add_output(&args.out, "coefficients.csv")?;
    manifest.add_output(&args.out, "fit.json")?;
    manifest.finish(&args.out, start.elapsed())
}

/// Rebuilds the model design on new data and returns `η̂`.
pub fn predict_artifact(artifact: &FitArtifact, table: &DataTable, w: Option<&WeightMatrix>) -> Result<Vec<f64>> {
    if artifact.lags && w.is_none() {
        return Err(Error::Schema("model uses lag columns; --weights is required".into()));
    }
    let raw = build_design(table, &artifact.covariates, if artifact.lags { w } else { None })?;
    let design = match &artifact.standardization {
        Some(t) => apply_transforms(&raw, t)?,
        None => raw,
    };
    predict(&artifact.fit, &design)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let start = Instant::now();
    let file = fs::File::open(&args.model).map_err(|e| Error::Schema(format!("cannot open {}: {e}", args.model.display())))?;
    let artifact: FitArtifact =
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Schema(format!("model file: {e}")))?;
    let table = DataTable::from_path(&args.data)?;
    let w = args.weights.as_deref().map(read_weights).transpose()?;
    let eta = predict_artifact(&artifact, &table, w.as_ref())?;

    prepare_out(&args.out)?;
    DataTable::new(vec!["eta".into()], vec![eta.clone()])?
        .write_csv(std::io::BufWriter::new(fs::File::create(args.out.join("predictions.csv"))?))?;
    let mut manifest = RunManifest::new("predict", to_value(args));
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.data)?;
    if let Some(p) = &args.weights {
        manifest.add_input(p)?;
    }
    manifest.add_output(&args.out, "predictions.csv")?;
    if let Some(y) = table.column(&artifact.response) {
        let (rmsep, maep) = point_errors(y, &eta)?;
        println!("RMSEP {rmsep}  MAEP {maep}");
        serde_json::to_writer_pretty(
            fs::File::create(args.out.join("prediction_metrics.json"))?,
            &serde_json::json!({ "rmsep": rmsep, "maep": maep, "n": y.len() }),
        )?;
        manifest.add_output(&args.out, "prediction_metrics.json")?;
    }
    println!("{} predictions written", eta.len());
    manifest.finish(&args.out, start.elapsed())
}

fn write_emitted_data(cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (train_seed, test_seed, _) = replication_seeds(cfg.seed, 0);
    for (label, n, seed) in [("train", cfg.n, train_seed), ("test", cfg.n_test, test_seed)] {
        let d = generate_sized(cfg, n, seed)?;
        let p = cfg.q / 2;
        let mut names = vec!["y".to_string()];
        let mut cols = vec![d.y.clone()];
        for j in 0..p {
            names.push(d.design.names()[j].clone());
            cols.push(d.design.column(j).to_vec());
        }
        DataTable::new(names, cols)?
            .write_csv(std::io::BufWriter::new(fs::File::create(dir.join(format!("{label}.csv")))?))?;
        d.weights
            .write_csv(std::io::BufWriter::new(fs::File::create(dir.join(format!("{label}_weights.csv")))?))?;
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let mut base = match &args.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Schema(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<ScenarioConfig>(&text).map_err(|e| Error::Schema(e.to_string()))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(v) = args.nsim {
        base.n_sim = v;
    }
    if let Some(v) = args.lambda {
        base.lambda = v;
    }
    if let Some(v) = args.q {
        base.q = v;
    }
    if let Some(v) = args.seed {
        base.seed = v;
    }
    if let Some(v) = args.mmax {
        base.m_max = v;
    }
    if let Some(v) = &args.variants {
        base.variants = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    let ks = args.k.clone().unwrap_or_else(|| vec![base.k]);
    let scenarios: Vec<ScenarioConfig> = ks
        .iter()
        .map(|&k| {
            let mut c = base.clone();
            c.k = k;
            if ks.len() > 1 {
                c.name = format!("{}-k{k}", base.name);
            }
            c
        })
        .collect();
    for s in &scenarios {
        s.validate()?;
    }

    prepare_out(&args.out)?;
    let mut tables: Vec<MetricsTable> = Vec::new();
    for s in &scenarios {
        log::info!("scenario {}: lambda {}, q {}, K {}, {} replications", s.name, s.lambda, s.q, s.k, s.n_sim);
        let t = run_study(s)?;
        for skip in &t.skipped {
            eprintln!("{}: skipped {}: {}", s.name, skip.variant, skip.reason);
        }
        for r in &t.rows {
            println!(
                "{:<16} {:<6} ok {}/{}  TPR {:>6}  TNR {:>6}  FDR {:>6}  bias {:>9}  RMSEP {:>8}",
                r.scenario,
                r.variant.label(),
                r.succeeded,
                r.attempted,
                fmt_opt(r.tpr, 1),
                fmt_opt(r.tnr, 1),
                fmt_opt(r.fdr, 1),
                fmt_opt(r.bias, 4),
                fmt_opt(r.rmsep, 3)
            );
        }
        tables.push(t);
    }

    let csv_file = fs::File::create(args.out.join("metrics.csv"))?;
    let mut csv_out = std::io::BufWriter::new(csv_file);
    for (i, t) in tables.iter().enumerate() {
        t.write_csv(&mut csv_out, i == 0)?;
    }
    drop(csv_out);
    serde_json::to_writer_pretty(fs::File::create(args.out.join("metrics.json"))?, &tables)?;

    if let Some(dir) = &args.emit_data {
        if scenarios.len() == 1 {
            write_emitted_data(&scenarios[0], dir)?;
        } else {
            for s in &scenarios {
                write_emitted_data(s, &dir.join(format!("k{}", s.k)))?;
            }
        }
    }

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::json!({ "args": to_value(args), "scenarios": to_value(&scenarios) }),
    );
    if let Some(p) = &args.scenario {
        manifest.add_input(p)?;
    }
    manifest.add_output(&args.out, "metrics.csv")?;
    manifest.add_output(&args.out, "metrics.json")?;
    manifest.finish(&args.out, start.elapsed())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Weights(a) => cmd_weights(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
