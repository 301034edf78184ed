//! Monte-Carlo harness: data generation, metrics and the replication driver.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boost::DesignBlock;
use crate::error::{Error, Result};
use crate::family::{log_det_precision, SpatialErrorStructure};
use crate::pipeline::{fit_variants, predict, FitConfig, FitResult, Variant};
use crate::seed::{derive_seed, streams};
use crate::weights::{build_circular, row_normalize, spatial_lag, WeightMatrix};

/// Intercept and coefficients of `X₁, X₂, WX₁, WX₂` in the generating model.
pub const TRUE_INTERCEPT: f64 = 1.0;
pub const TRUE_COEFFICIENTS: [f64; 4] = [3.5, -2.5, -4.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub q: usize,
    pub lambda: f64,
    pub sigma2: f64,
    pub k: usize,
    pub n_sim: usize,
    pub n_test: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub learning_rate: f64,
    pub m_max: usize,
    pub folds: usize,
    pub subsample_fraction: f64,
    pub tau: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        ScenarioConfig {
            name: "default".into(),
            n: 400,
            q: 20,
            lambda: 0.4,
            sigma2: 1.0,
            k: 5,
            n_sim: 100,
            n_test: 400,
            variants: Variant::ALL.to_vec(),
            seed: 1,
            learning_rate: fit.learning_rate,
            m_max: fit.m_max,
            folds: fit.folds,
            subsample_fraction: fit.subsample_fraction,
            tau: fit.tau,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.q < 4 || self.q % 2 != 0 {
            return bad(format!("q must be even and at least 4, got {}", self.q));
        }
        if !(self.lambda.abs() < 1.0) {
            return bad(format!("lambda must lie in (-1, 1), got {}", self.lambda));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if self.n_sim == 0 {
            return bad("n_sim must be at least 1".into());
        }
        if self.variants.is_empty() {
            return bad("no variants requested".into());
        }
        for n in [self.n, self.n_test] {
            if n < 2 * self.k + 1 {
                return bad(format!("{n} locations cannot host a circular neighbourhood of K = {}", self.k));
            }
        }
        self.fit_config(self.variants[0], 0).validate()
    }

    pub fn fit_config(&self, variant: Variant, seed: u64) -> FitConfig {
        FitConfig {
            learning_rate: self.learning_rate,
            m_max: self.m_max,
            folds: self.folds,
            subsample_fraction: self.subsample_fraction,
            tau: self.tau,
            seed,
            ..FitConfig::default()
        }
        .with_variant(variant)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub y: Vec<f64>,
    pub design: DesignBlock,
    pub weights: Arc<WeightMatrix>,
    pub epsilon: Vec<f64>,
    pub disturbance: Vec<f64>,
}

impl SimulatedData {
    pub fn truth(&self) -> Vec<String> {
        let mask = self.design.truth_mask().unwrap_or(&[]);
        self.design
            .names()
            .iter()
            .zip(mask)
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Draws a training set of size `cfg.n` from the generating model.
pub fn generate_dgp(cfg: &ScenarioConfig, rep_seed: u64) -> Result<SimulatedData> {
    generate_sized(cfg, cfg.n, rep_seed)
}

/// Draws `n` observations; `X` columns first (column by column), then `ε`.
pub fn generate_sized(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<SimulatedData> {
    if !(cfg.lambda.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (-1, 1), got {}", cfg.lambda)));
    }
    if cfg.q < 4 || cfg.q % 2 != 0 {
        return Err(Error::InvalidParameter(format!("q must be even and at least 4, got {}", cfg.q)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Arc::new(row_normalize(&build_circular(n, cfg.k)?)?);
    let p = cfg.q / 2;
    let x_data: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = DMatrix::from_column_slice(n, p, &x_data);
    let sd = cfg.sigma2.sqrt();
    let epsilon: Vec<f64> = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let wx = spatial_lag(&w, &x)?;

    let mut z = DMatrix::zeros(n, cfg.q);
    z.columns_mut(0, p).copy_from(&x);
    z.columns_mut(p, p).copy_from(&wx);
    let names: Vec<String> =
        (1..=p).map(|j| format!("X{j}")).chain((1..=p).map(|j| format!("WX{j}"))).collect();
    let mut mask = vec![false; cfg.q];
    for j in [0, 1, p, p + 1] {
        mask[j] = true;
    }

    let s = SpatialErrorStructure::new(cfg.lambda, cfg.sigma2, w.clone())?;
    let disturbance = s.solve_precision_factor(&epsilon)?;
    let y: Vec<f64> = (0..n)
        .map(|i| {
            TRUE_INTERCEPT
                + TRUE_COEFFICIENTS[0] * x[(i, 0)]
                + TRUE_COEFFICIENTS[1] * x[(i, 1)]
                + TRUE_COEFFICIENTS[2] * wx[(i, 0)]
                + TRUE_COEFFICIENTS[3] * wx[(i, 1)]
                + disturbance[i]
        })
        .collect();
    let design = DesignBlock::new(z, names)?.with_truth_mask(mask)?;
    Ok(SimulatedData { y, design, weights: w, epsilon, disturbance })
}

/// Seeds of the training and test draws of replication `r`.
pub fn replication_seeds(scenario_seed: u64, r: usize) -> (u64, u64, u64) {
    let rep = derive_seed(scenario_seed, streams::REPLICATION + r as u64);
    (
        derive_seed(rep, streams::TRAIN_DATA),
        derive_seed(rep, streams::TEST_DATA),
        derive_seed(rep, streams::FIT),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tpr: f64,
    pub tnr: f64,
    pub fdr: f64,
}

/// Selection rates in percent. An empty selection has FDR 0.
pub fn selection_metrics(selected: &[String], truth: &[String], q: usize) -> Result<SelectionMetrics> {
    if truth.is_empty() {
        return Err(Error::InvalidParameter("truth set is empty".into()));
    }
    if truth.len() > q {
        return Err(Error::InvalidParameter(format!("{} true columns exceed q = {q}", truth.len())));
    }
    let tp = selected.iter().filter(|s| truth.contains(s)).count();
    let fp = selected.len() - tp;
    let negatives = q - truth.len();
    Ok(SelectionMetrics {
        tpr: 100.0 * tp as f64 / truth.len() as f64,
        tnr: if negatives == 0 { 100.0 } else { 100.0 * (negatives - fp) as f64 / negatives as f64 },
        fdr: 100.0 * fp as f64 / selected.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub bias: f64,
    pub mse: f64,
    pub ese: f64,
}

pub fn estimation_metrics(estimates: &[f64], truth: f64) -> Result<EstimationMetrics> {
    if estimates.len() < 2 {
        return Err(Error::InvalidParameter("at least two estimates are needed".into()));
    }
    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    Ok(EstimationMetrics {
        bias: mean - truth,
        mse: estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / k,
        ese: (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub rmsep: f64,
    pub maep: f64,
    pub nll: f64,
}

/// Root mean squared and mean absolute prediction error.
pub fn point_errors(y: &[f64], eta_hat: &[f64]) -> Result<(f64, f64)> {
    if y.len() != eta_hat.len() || y.is_empty() {
        return Err(Error::DimensionMismatch { context: "prediction errors", expected: y.len(), found: eta_hat.len() });
    }
    if y.iter().chain(eta_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction inputs"));
    }
    let nf = y.len() as f64;
    let r = y.iter().zip(eta_hat).map(|(a, b)| a - b);
    let rmsep = (r.clone().map(|v| v * v).sum::<f64>() / nf).sqrt();
    let maep = r.map(f64::abs).sum::<f64>() / nf;
    Ok((rmsep, maep))
}

/// RMSEP, MAEP and the Gaussian negative log-likelihood of the test
/// residuals under the estimated spatial structure (σ̂² read as a variance).
pub fn prediction_metrics(y_test: &[f64], eta_hat: &[f64], s: &SpatialErrorStructure) -> Result<PredictionMetrics> {
    let n = y_test.len();
    if eta_hat.len() != n || s.n() != n {
        return Err(Error::DimensionMismatch { context: "prediction metrics", expected: n, found: eta_hat.len().min(s.n()) });
    }
    if y_test.iter().chain(eta_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction inputs"));
    }
    let (rmsep, maep) = point_errors(y_test, eta_hat)?;
    let r: Vec<f64> = y_test.iter().zip(eta_hat).map(|(y, e)| y - e).collect();
    let nf = n as f64;
    let mut pr = vec![0.0; n];
    s.apply_precision_factor(&r, &mut pr);
    let quad = pr.iter().map(|v| v * v).sum::<f64>();
    let sigma2 = s.sigma2();
    let nll = 0.5 * nf * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - log_det_precision(s)?
        + quad / (2.0 * sigma2);
    Ok(PredictionMetrics { rmsep, maep, nll })
}

/// Outcome of one variant on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub variant: Variant,
    pub lambda_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub selection: Option<SelectionMetrics>,
    pub prediction: Option<PredictionMetrics>,
    pub m_opt: Option<usize>,
    pub selected: Vec<String>,
    pub error: Option<String>,
}

/// Aggregates of one variant over the replications that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub scenario: String,
    pub variant: Variant,
    pub n: usize,
    pub q: usize,
    pub k: usize,
    pub lambda: f64,
    pub attempted: usize,
    pub succeeded: usize,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fdr: Option<f64>,
    pub bias: Option<f64>,
    pub mse: Option<f64>,
    pub ese: Option<f64>,
    pub rmsep: Option<f64>,
    pub maep: Option<f64>,
    pub nll: Option<f64>,
    pub mean_m_opt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedVariant {
    pub variant: Variant,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub config: ScenarioConfig,
    pub rows: Vec<VariantSummary>,
    pub skipped: Vec<SkippedVariant>,
    pub replications: Vec<ReplicationRecord>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsTable {
    pub fn row(&self, variant: Variant) -> Option<&VariantSummary> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Successful records of one variant, in replication order.
    pub fn records(&self, variant: Variant) -> impl Iterator<Item = &ReplicationRecord> {
        self.replications.iter().filter(move |r| r.variant == variant && r.error.is_none())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("metrics table serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub const CSV_HEADER: [&'static str; 18] = [
        "scenario", "variant", "n", "q", "k", "lambda", "attempted", "succeeded", "tpr", "tnr", "fdr", "bias",
        "mse", "ese", "rmsep", "maep", "nll", "mean_m_opt",
    ];

    pub fn write_csv<W: Write>(&self, writer: W, with_header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        if with_header {
            w.write_record(Self::CSV_HEADER)?;
        }
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.variant.label().to_string(),
                r.n.to_string(),
                r.q.to_string(),
                r.k.to_string(),
                format!("{}", r.lambda),
                r.attempted.to_string(),
                r.succeeded.to_string(),
                f(r.tpr),
                f(r.tnr),
                f(r.fdr),
                f(r.bias),
                f(r.mse),
                f(r.ese),
                f(r.rmsep),
                f(r.maep),
                f(r.nll),
                f(r.mean_m_opt),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

fn run_replication(cfg: &ScenarioConfig, variants: &[Variant], r: usize) -> Vec<ReplicationRecord> {
    let failed = |variant: Variant, e: &Error| ReplicationRecord {
        replication: r,
        variant,
        lambda_hat: None,
        sigma2_hat: None,
        selection: None,
        prediction: None,
        m_opt: None,
        selected: Vec::new(),
        error: Some(e.to_string()),
    };
    let (train_seed, test_seed, fit_seed) = replication_seeds(cfg.seed, r);
    let data = generate_sized(cfg, cfg.n, train_seed).and_then(|train| {
        let test = generate_sized(cfg, cfg.n_test, test_seed)?;
        Ok((train, test))
    });
    let (train, test) = match data {
        Ok(d) => d,
        Err(e) => return variants.iter().map(|&v| failed(v, &e)).collect(),
    };
    let truth = train.truth();
    let fit_cfg = cfg.fit_config(variants[0], fit_seed);
    let fits = match fit_variants(&train.design, &train.y, &train.weights, variants, &fit_cfg) {
        Ok(f) => f,
        Err(e) => return variants.iter().map(|&v| failed(v, &e)).collect(),
    };
    variants
        .iter()
        .zip(fits)
        .map(|(&v, fit)| {
            let evaluate = |fit: &FitResult| -> Result<(SelectionMetrics, PredictionMetrics)> {
                let sel = selection_metrics(&fit.selected, &truth, cfg.q)?;
                let eta = predict(fit, &test.design)?;
                let s = SpatialErrorStructure::new(fit.lambda_hat, fit.sigma2_hat, test.weights.clone())?;
                Ok((sel, prediction_metrics(&test.y, &eta, &s)?))
            };
            match fit.and_then(|f| evaluate(&f).map(|m| (f, m))) {
                Ok((f, (sel, pred))) => ReplicationRecord {
                    replication: r,
                    variant: v,
                    lambda_hat: Some(f.lambda_hat),
                    sigma2_hat: Some(f.sigma2_hat),
                    selection: Some(sel),
                    prediction: Some(pred),
                    m_opt: (v != Variant::Fgls).then_some(f.m_opt),
                    selected: f.selected,
                    error: None,
                },
                Err(e) => {
                    log::warn!("replication {r}, {v}: {e}");
                    failed(v, &e)
                }
            }
        })
        .collect()
}

/// Runs all replications of a scenario. Variants that need a least-squares
/// first step are skipped when `q + 1 > n`; failures of single replications
/// are recorded in the table.
pub fn run_study(cfg: &ScenarioConfig) -> Result<MetricsTable> {
    cfg.validate()?;
    let mut variants = Vec::new();
    let mut skipped = Vec::new();
    for &v in &cfg.variants {
        if variants.contains(&v) {
            continue;
        }
        if v.needs_ols() && cfg.q + 1 > cfg.n {
            let reason = format!("least-squares first step is not identified with q = {} and n = {}", cfg.q, cfg.n);
            log::info!("skipping {v}: {reason}");
            skipped.push(SkippedVariant { variant: v, reason });
        } else {
            variants.push(v);
        }
    }

    let replications: Vec<ReplicationRecord> = if variants.is_empty() {
        Vec::new()
    } else {
        (0..cfg.n_sim)
            .into_par_iter()
            .map(|r| run_replication(cfg, &variants, r))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };

    let rows = variants
        .iter()
        .map(|&v| {
            let ok: Vec<&ReplicationRecord> =
                replications.iter().filter(|r| r.variant == v && r.error.is_none()).collect();
            let col = |f: &dyn Fn(&ReplicationRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
            let lambdas = col(&|r| r.lambda_hat);
            let est = estimation_metrics(&lambdas, cfg.lambda).ok();
            VariantSummary {
                scenario: cfg.name.clone(),
                variant: v,
                n: cfg.n,
                q: cfg.q,
                k: cfg.k,
                lambda: cfg.lambda,
                attempted: cfg.n_sim,
                succeeded: ok.len(),
                tpr: mean(&col(&|r| r.selection.map(|s| s.tpr))),
                tnr: mean(&col(&|r| r.selection.map(|s| s.tnr))),
                fdr: mean(&col(&|r| r.selection.map(|s| s.fdr))),
                bias: est.map(|e| e.bias).or_else(|| mean(&lambdas).map(|m| m - cfg.lambda)),
                mse: est.map(|e| e.mse).or_else(|| mean(&lambdas.iter().map(|l| (l - cfg.lambda).powi(2)).collect::<Vec<_>>())),
                ese: est.map(|e| e.ese),
                rmsep: mean(&col(&|r| r.prediction.map(|p| p.rmsep))),
                maep: mean(&col(&|r| r.prediction.map(|p| p.maep))),
                nll: mean(&col(&|r| r.prediction.map(|p| p.nll))),
                mean_m_opt: mean(&col(&|r| r.m_opt.map(|m| m as f64))),
            }
        })
        .collect();

    Ok(MetricsTable { config: cfg.clone(), rows, skipped, replications })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn selection_counts() {
        let truth = names(&["a", "b", "c", "d"]);
        let m = selection_metrics(&truth, &truth, 20).unwrap();
        assert_eq!((m.tpr, m.tnr, m.fdr), (100.0, 100.0, 0.0));
        let m = selection_metrics(&names(&["a", "b", "c", "d", "e"]), &truth, 20).unwrap();
        assert_eq!((m.tpr, m.tnr, m.fdr), (100.0, 93.75, 20.0));
        let m = selection_metrics(&[], &truth, 20).unwrap();
        assert_eq!((m.tpr, m.tnr, m.fdr), (0.0, 100.0, 0.0));
        assert!(selection_metrics(&[], &[], 20).is_err());
    }

    #[test]
    fn estimation_arithmetic() {
        let m = estimation_metrics(&[0.5, 0.7], 0.6).unwrap();
        assert!(m.bias.abs() < 1e-15);
        assert!((m.mse - 0.01).abs() < 1e-15);
        assert!((m.ese - 0.02f64.sqrt()).abs() < 1e-15);
        let m = estimation_metrics(&[0.3, 0.3, 0.3], 0.3).unwrap();
        assert_eq!((m.bias, m.mse, m.ese), (0.0, 0.0, 0.0));
        let m = estimation_metrics(&[0.5, 0.5], 0.4).unwrap();
        assert!((m.bias - 0.1).abs() < 1e-15 && (m.mse - 0.01).abs() < 1e-15 && m.ese == 0.0);
        assert!(estimation_metrics(&[0.5], 0.4).is_err());
    }

    fn ring(n: usize, k: usize) -> Arc<WeightMatrix> {
        Arc::new(row_normalize(&build_circular(n, k).unwrap()).unwrap())
    }

    #[test]
    fn prediction_zero_residuals() {
        let y: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let s = SpatialErrorStructure::new(0.0, 1.0, ring(12, 2)).unwrap();
        let m = prediction_metrics(&y, &y, &s).unwrap();
        assert_eq!((m.rmsep, m.maep), (0.0, 0.0));
        let expected = 6.0 * ((2.0 * std::f64::consts::PI).ln() + 1.0);
        assert!((m.nll - expected).abs() < 1e-12);
    }

    #[test]
    fn prediction_constant_offset() {
        let s = SpatialErrorStructure::new(0.3, 1.0, ring(4, 1)).unwrap();
        let m = prediction_metrics(&[2.0; 4], &[0.0; 4], &s).unwrap();
        assert!((m.rmsep - 2.0).abs() < 1e-15 && (m.maep - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nll_log_det_matches_dense_oracle() {
        let w = ring(10, 2);
        let s = SpatialErrorStructure::new(0.6, 1.5, w.clone()).unwrap();
        let y: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let eta = vec![0.1; 10];
        let m = prediction_metrics(&y, &eta, &s).unwrap();
        let p = DMatrix::identity(10, 10) - 0.6 * w.to_dense();
        let det = p.clone().determinant();
        let r = nalgebra::DVector::from_iterator(10, y.iter().zip(&eta).map(|(a, b)| a - b));
        let quad = (&p * &r).norm_squared();
        let oracle = 5.0 * ((2.0 * std::f64::consts::PI * 1.5).ln() + 1.0) - det.ln() + quad / 3.0;
        assert!((m.nll - oracle).abs() < 1e-10);
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig { n: 60, n_test: 60, q: 8, k: 2, n_sim: 2, m_max: 60, folds: 4, ..Default::default() }
    }

    #[test]
    fn dgp_structure() {
        for q in [8usize, 20] {
            let cfg = ScenarioConfig { q, ..small_cfg() };
            let d = generate_dgp(&cfg, 3).unwrap();
            assert_eq!(d.design.q(), q);
            assert_eq!(d.truth(), names(&["X1", "X2", &format!("WX1"), "WX2"]));
            let wx1 = d.weights.lag(d.design.column(0)).unwrap();
            assert_eq!(wx1.as_slice(), d.design.column(q / 2));
            assert!(d.design.column(0).iter().all(|v| (-2.0..2.0).contains(v)));
        }
    }

    #[test]
    fn dgp_solve_and_identity() {
        let cfg = ScenarioConfig { lambda: 0.7, ..small_cfg() };
        let d = generate_dgp(&cfg, 5).unwrap();
        let wu = d.weights.lag(&d.disturbance).unwrap();
        for i in 0..cfg.n {
            assert!((d.disturbance[i] - 0.7 * wu[i] - d.epsilon[i]).abs() < 1e-10);
        }
        let cfg0 = ScenarioConfig { lambda: 0.0, n: 400, n_test: 400, ..small_cfg() };
        // one draw has sd(var) ≈ 0.07, so pool ten
        let mut v = 0.0;
        for seed in 0..10 {
            let d = generate_dgp(&cfg0, seed).unwrap();
            assert_eq!(d.disturbance, d.epsilon);
            v += d.epsilon.iter().map(|e| e * e).sum::<f64>() / 4000.0;
        }
        assert!((v - 1.0).abs() < 0.1);
    }

    #[test]
    fn dgp_reproducible_and_streams_independent() {
        let cfg = small_cfg();
        let a = generate_dgp(&cfg, 9).unwrap();
        let b = generate_dgp(&cfg, 9).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.design, b.design);
        let (tr, te, fit) = replication_seeds(cfg.seed, 0);
        assert!(tr != te && te != fit && tr != fit);
        assert_ne!(replication_seeds(cfg.seed, 1).0, tr);
    }

    #[test]
    fn config_validation_and_toml() {
        assert!(ScenarioConfig { q: 7, ..small_cfg() }.validate().is_err());
        assert!(ScenarioConfig { lambda: 1.0, ..small_cfg() }.validate().is_err());
        assert!(ScenarioConfig { n: 4, ..small_cfg() }.validate().is_err());
        let cfg = ScenarioConfig::from_toml("name = \"t\"\nq = 20\nlambda = 0.8\nvariants = [\"DS-DS\", \"LS-GB\"]\n").unwrap();
        assert_eq!(cfg.variants, vec![Variant::DsDs, Variant::LsGb]);
        assert_eq!(cfg.n, 400);
        assert!(ScenarioConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn study_runs_and_skips_ols_in_high_dimension() {
        let cfg = ScenarioConfig { q: 80, n_sim: 1, variants: vec![Variant::LsGb, Variant::GbGb, Variant::Fgls], ..small_cfg() };
        let t = run_study(&cfg).unwrap();
        assert_eq!(t.skipped.len(), 2);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].attempted, 1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,variant,"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn single_replication_table_matches_record() {
        let cfg = ScenarioConfig { n_sim: 1, variants: vec![Variant::DsDs, Variant::LsGb], ..small_cfg() };
        let t = run_study(&cfg).unwrap();
        for v in [Variant::DsDs, Variant::LsGb] {
            let row = t.row(v).unwrap();
            let rec = t.records(v).next().unwrap();
            assert_eq!(row.succeeded, 1);
            assert_eq!(row.tpr, rec.selection.map(|s| s.tpr));
            assert_eq!(row.rmsep, rec.prediction.map(|p| p.rmsep));
            assert_eq!(row.bias, rec.lambda_hat.map(|l| l - cfg.lambda));
            assert!(row.ese.is_none());
        }
        assert_eq!(t.digest(), run_study(&cfg).unwrap().digest());
    }
}
