//! The three-step feasible procedure: a first-step trend fit, moment
//! estimation of the spatial parameters from its residuals, and boosting
//! under the estimated spatial loss, optionally with deselection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{boost_fit, deselect, BoostPath, Booster, DesignBlock};
use crate::error::{Error, Result};
use crate::family::FamilyKind;
use crate::moments::{build_moment_system, fit_fgls, fit_ols, nls_estimate, LinearFit, MomentEstimate};
use crate::seed::{stream_rng, streams};
use crate::weights::WeightMatrix;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_M_MAX: usize = 1000;
pub const DEFAULT_FOLDS: usize = 25;
pub const DEFAULT_SUBSAMPLE_FRACTION: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStep {
    Ols,
    Boost,
    BoostDeselect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LS-GB", alias = "ls-gb")]
    LsGb,
    #[serde(rename = "GB-GB", alias = "gb-gb")]
    GbGb,
    #[serde(rename = "DS-GB", alias = "ds-gb")]
    DsGb,
    #[serde(rename = "DS-DS", alias = "ds-ds")]
    DsDs,
    #[serde(rename = "FGLS", alias = "fgls")]
    Fgls,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::LsGb, Variant::GbGb, Variant::DsGb, Variant::DsDs, Variant::Fgls];

    pub fn label(self) -> &'static str {
        match self {
            Variant::LsGb => "LS-GB",
            Variant::GbGb => "GB-GB",
            Variant::DsGb => "DS-GB",
            Variant::DsDs => "DS-DS",
            Variant::Fgls => "FGLS",
        }
    }

    pub fn first_step(self) -> FirstStep {
        match self {
            Variant::LsGb | Variant::Fgls => FirstStep::Ols,
            Variant::GbGb => FirstStep::Boost,
            Variant::DsGb | Variant::DsDs => FirstStep::BoostDeselect,
        }
    }

    pub fn final_deselect(self) -> bool {
        self == Variant::DsDs
    }

    /// Whether the first step needs a full-rank least-squares fit.
    pub fn needs_ols(self) -> bool {
        self.first_step() == FirstStep::Ols
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ls-gb" => Ok(Variant::LsGb),
            "gb-gb" => Ok(Variant::GbGb),
            "ds-gb" => Ok(Variant::DsGb),
            "ds-ds" => Ok(Variant::DsDs),
            "fgls" | "gmm" => Ok(Variant::Fgls),
            other => Err(Error::InvalidParameter(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub first_step: FirstStep,
    pub final_deselect: bool,
    pub learning_rate: f64,
    pub m_max: usize,
    pub folds: usize,
    pub subsample_fraction: f64,
    pub tau: f64,
    pub seed: u64,
    /// Skips tuning and stops every boosting step at this iteration.
    #[serde(default)]
    pub fixed_m_stop: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            first_step: FirstStep::BoostDeselect,
            final_deselect: true,
            learning_rate: DEFAULT_LEARNING_RATE,
            m_max: DEFAULT_M_MAX,
            folds: DEFAULT_FOLDS,
            subsample_fraction: DEFAULT_SUBSAMPLE_FRACTION,
            tau: DEFAULT_TAU,
            seed: 0,
            fixed_m_stop: None,
        }
    }
}

impl FitConfig {
    pub fn for_variant(variant: Variant) -> Self {
        FitConfig::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.first_step = variant.first_step();
        self.final_deselect = variant.final_deselect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning rate must lie in (0, 1], got {}", self.learning_rate));
        }
        if self.m_max == 0 || self.fixed_m_stop == Some(0) {
            return bad("m_max must be at least 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction < 1.0) {
            return bad(format!("subsample fraction must lie in (0, 1), got {}", self.subsample_fraction));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub variant: Variant,
    pub lambda_hat: f64,
    pub sigma2_hat: f64,
    pub intercept: f64,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub selected: Vec<String>,
    /// Stopping iteration of the final boosting step; 0 for FGLS.
    pub m_opt: usize,
    pub first_step_m_opt: Option<usize>,
    /// Columns kept by first-step deselection.
    pub first_step_retained: Option<Vec<String>>,
    pub moment_estimate: MomentEstimate,
    /// Empirical risk `r^[0..=m_opt]` of the final boosting fit.
    pub risk_path: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.coefficients[j])
    }

    pub fn linear_fit(&self) -> LinearFit {
        LinearFit { intercept: self.intercept, coefficients: self.coefficients.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub m_opt: usize,
    /// Fold-averaged out-of-bag risk for `m = 1..=m_max`.
    pub oob_risk: Vec<f64>,
}

/// Chooses the stopping iteration by repeated half-sampling.
///
/// Each fold fits on a random subset (weights 1) and scores the mean
/// pointwise risk of the complementary observations at every iteration.
/// The spatial transform always uses the full `W`.
pub fn tune_mstop(design: &DesignBlock, y: &[f64], fam: &FamilyKind, cfg: &FitConfig) -> Result<Tuning> {
    tune_with_stream(design, y, fam, cfg, streams::FIRST_STEP_TUNING)
}

fn tune_with_stream(
    design: &DesignBlock,
    y: &[f64],
    fam: &FamilyKind,
    cfg: &FitConfig,
    stream: u64,
) -> Result<Tuning> {
    cfg.validate()?;
    if let Some(m) = cfg.fixed_m_stop {
        return Ok(Tuning { m_opt: m, oob_risk: Vec::new() });
    }
    let n = design.n();
    let in_bag = (cfg.subsample_fraction * n as f64).floor() as usize;
    if in_bag == 0 || in_bag >= n {
        return Err(Error::InvalidParameter(format!(
            "subsampling {in_bag} of {n} observations leaves an empty fold"
        )));
    }
    let mut rng = stream_rng(cfg.seed, stream);
    let folds: Vec<Vec<usize>> = (0..cfg.folds).map(|_| sample(&mut rng, n, in_bag).into_vec()).collect();

    let curves = folds
        .par_iter()
        .map(|fold| {
            let mut weights = vec![0.0; n];
            for &i in fold {
                weights[i] = 1.0;
            }
            let held_out: Vec<usize> = (0..n).filter(|&i| weights[i] == 0.0).collect();
            let mut booster = Booster::new(design, y, fam, cfg.learning_rate, Some(&weights))?;
            let mut curve = Vec::with_capacity(cfg.m_max);
            for _ in 0..cfg.m_max {
                booster.step()?;
                curve.push(booster.mean_risk_on(&held_out));
            }
            Ok(curve)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let mut oob_risk = vec![0.0; cfg.m_max];
    for curve in &curves {
        for (acc, v) in oob_risk.iter_mut().zip(curve) {
            *acc += v;
        }
    }
    for v in &mut oob_risk {
        *v /= cfg.folds as f64;
    }
    let mut m_opt = 1;
    for (m, &r) in oob_risk.iter().enumerate().skip(1) {
        if r < oob_risk[m_opt - 1] {
            m_opt = m + 1;
        }
    }
    if m_opt == cfg.m_max && cfg.m_max > 1 {
        log::warn!("tuned stopping iteration reached m_max = {}", cfg.m_max);
    }
    Ok(Tuning { m_opt, oob_risk })
}

/// First-step trend estimate and its residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStepResult {
    pub fit: LinearFit,
    pub residuals: Vec<f64>,
    pub m_opt: Option<usize>,
    pub retained: Option<Vec<usize>>,
    pub warnings: Vec<String>,
}

pub fn first_step(design: &DesignBlock, y: &[f64], cfg: &FitConfig) -> Result<FirstStepResult> {
    cfg.validate()?;
    Session::new(design, y, None, cfg.clone())?.stage1(cfg.first_step).map(|s| (*s).clone())
}

/// Fits one variant of the feasible procedure.
pub fn fit_sdem(design: &DesignBlock, y: &[f64], w: &Arc<WeightMatrix>, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let variant = match (cfg.first_step, cfg.final_deselect) {
        (FirstStep::Ols, false) => Variant::LsGb,
        (FirstStep::Boost, false) => Variant::GbGb,
        (FirstStep::BoostDeselect, false) => Variant::DsGb,
        (FirstStep::BoostDeselect, true) => Variant::DsDs,
        (fs, true) => {
            return Err(Error::InvalidParameter(format!(
                "final deselection is only defined with a deselected first step, got {fs:?}"
            )))
        }
    };
    Session::new(design, y, Some(w.clone()), cfg.clone())?.finish(variant)
}

/// Ordinary least squares first step, moment estimate, then FGLS.
pub fn fit_fgls_comparator(
    design: &DesignBlock,
    y: &[f64],
    w: &Arc<WeightMatrix>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    Session::new(design, y, Some(w.clone()), cfg.clone())?.finish(Variant::Fgls)
}

/// Fits several variants on the same data, sharing the common stages.
/// Every result equals the corresponding stand-alone fit.
pub fn fit_variants(
    design: &DesignBlock,
    y: &[f64],
    w: &Arc<WeightMatrix>,
    variants: &[Variant],
    cfg: &FitConfig,
) -> Result<Vec<Result<FitResult>>> {
    cfg.validate()?;
    let mut session = Session::new(design, y, Some(w.clone()), cfg.clone())?;
    Ok(variants.iter().map(|&v| session.finish(v)).collect())
}

/// Trend prediction `intercept + Z_new·δ̂`; columns are matched by name.
pub fn predict(fit: &FitResult, design: &DesignBlock) -> Result<Vec<f64>> {
    let mut eta = vec![fit.intercept; design.n()];
    if design.q() != fit.names.len() {
        return Err(Error::Schema(format!(
            "model has {} columns, new design has {}",
            fit.names.len(),
            design.q()
        )));
    }
    for (name, &c) in fit.names.iter().zip(&fit.coefficients) {
        let j = design
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' missing from new design")))?;
        if c != 0.0 {
            for (e, z) in eta.iter_mut().zip(design.column(j)) {
                *e += c * z;
            }
        }
    }
    Ok(eta)
}

struct BoostStage {
    m_opt: usize,
    path: BoostPath,
}

struct Stage3 {
    moment: MomentEstimate,
    m_opt: usize,
    path: BoostPath,
    warnings: Vec<String>,
}

/// Memoized stages for one data set and configuration.
struct Session<'a> {
    design: &'a DesignBlock,
    y: &'a [f64],
    w: Option<Arc<WeightMatrix>>,
    cfg: FitConfig,
    boosted_first: Option<Arc<BoostStage>>,
    stage1: Vec<(FirstStep, Arc<FirstStepResult>)>,
    stage3: Vec<(FirstStep, Arc<Stage3>)>,
}

fn expand(q: usize, idx: &[usize], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q];
    for (&j, &v) in idx.iter().zip(values) {
        out[j] = v;
    }
    out
}

impl<'a> Session<'a> {
    fn new(design: &'a DesignBlock, y: &'a [f64], w: Option<Arc<WeightMatrix>>, cfg: FitConfig) -> Result<Self> {
        if y.len() != design.n() {
            return Err(Error::DimensionMismatch { context: "response", expected: design.n(), found: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        if let Some(w) = &w {
            if w.n() != design.n() {
                return Err(Error::DimensionMismatch { context: "weight matrix", expected: design.n(), found: w.n() });
            }
            if !w.is_row_normalized() {
                return Err(Error::InvalidParameter("weight matrix must be row-normalized".into()));
            }
        }
        Ok(Session { design, y, w, cfg, boosted_first: None, stage1: Vec::new(), stage3: Vec::new() })
    }

    fn boosted_first(&mut self) -> Result<Arc<BoostStage>> {
        if let Some(s) = &self.boosted_first {
            return Ok(s.clone());
        }
        let fam = FamilyKind::SquaredError;
        let tuning = tune_with_stream(self.design, self.y, &fam, &self.cfg, streams::FIRST_STEP_TUNING)?;
        let path = boost_fit(self.design, self.y, &fam, tuning.m_opt, self.cfg.learning_rate, None)?;
        let stage = Arc::new(BoostStage { m_opt: tuning.m_opt, path });
        self.boosted_first = Some(stage.clone());
        Ok(stage)
    }

    fn stage1(&mut self, kind: FirstStep) -> Result<Arc<FirstStepResult>> {
        if let Some((_, s)) = self.stage1.iter().find(|(k, _)| *k == kind) {
            return Ok(s.clone());
        }
        let q = self.design.q();
        let mut warnings = Vec::new();
        let (fit, m_opt, retained) = match kind {
            FirstStep::Ols => (fit_ols(self.design, self.y)?, None, None),
            FirstStep::Boost => {
                let b = self.boosted_first()?;
                let fit = LinearFit { intercept: b.path.intercept, coefficients: b.path.coefficients.clone() };
                (fit, Some(b.m_opt), None)
            }
            FirstStep::BoostDeselect => {
                let b = self.boosted_first()?;
                let report = deselect(&b.path, self.cfg.tau)?;
                warnings.extend(report.warning.clone());
                let fit = if report.retained.is_empty() {
                    LinearFit { intercept: 0.0, coefficients: vec![0.0; q] }
                } else {
                    let sub = self.design.select(&report.retained)?;
                    let path =
                        boost_fit(&sub, self.y, &FamilyKind::SquaredError, b.m_opt, self.cfg.learning_rate, None)?;
                    LinearFit { intercept: path.intercept, coefficients: expand(q, &report.retained, &path.coefficients) }
                };
                (fit, Some(b.m_opt), Some(report.retained))
            }
        };
        let residuals: Vec<f64> = self.y.iter().zip(fit.fitted(self.design)).map(|(y, e)| y - e).collect();
        let stage = Arc::new(FirstStepResult { fit, residuals, m_opt, retained, warnings });
        self.stage1.push((kind, stage.clone()));
        Ok(stage)
    }

    fn weights(&self) -> Result<&Arc<WeightMatrix>> {
        self.w
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("spatial weights required".into()))
    }

    fn moments(&mut self, kind: FirstStep) -> Result<(Arc<FirstStepResult>, MomentEstimate)> {
        let s1 = self.stage1(kind)?;
        let sys = build_moment_system(&s1.residuals, self.weights()?)?;
        Ok((s1, nls_estimate(&sys)?))
    }

    fn stage3(&mut self, kind: FirstStep) -> Result<Arc<Stage3>> {
        if let Some((_, s)) = self.stage3.iter().find(|(k, _)| *k == kind) {
            return Ok(s.clone());
        }
        let (s1, moment) = self.moments(kind)?;
        let mut warnings = s1.warnings.clone();
        let bound = moment.sigma2_hat / (1.0 + moment.lambda_hat.abs()).powi(2);
        if self.cfg.learning_rate >= bound {
            let msg = format!(
                "learning rate {} exceeds sigma2/(1+|lambda|)^2 = {bound:.3e}; empirical risk may not decrease monotonically",
                self.cfg.learning_rate
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let fam = FamilyKind::spatial(moment.lambda_hat, moment.sigma2_hat, self.weights()?.clone())?;
        let tuning = tune_with_stream(self.design, self.y, &fam, &self.cfg, streams::FINAL_STEP_TUNING)?;
        let path = boost_fit(self.design, self.y, &fam, tuning.m_opt, self.cfg.learning_rate, None)?;
        let stage = Arc::new(Stage3 { moment, m_opt: tuning.m_opt, path, warnings });
        self.stage3.push((kind, stage.clone()));
        Ok(stage)
    }

    fn finish(&mut self, variant: Variant) -> Result<FitResult> {
        if self.y.iter().all(|&v| v == self.y[0]) {
            return Err(Error::NonIdentified(
                "response is constant; first-step residuals vanish".into(),
            ));
        }
        let names = self.design.names().to_vec();
        let q = self.design.q();
        let kind = variant.first_step();
        if variant == Variant::Fgls {
            let (s1, moment) = self.moments(kind)?;
            let st = crate::family::SpatialErrorStructure::new(
                moment.lambda_hat,
                moment.sigma2_hat,
                self.weights()?.clone(),
            )?;
            let fit = fit_fgls(self.design, self.y, &st)?;
            return Ok(self.assemble(variant, fit, 0, &s1, moment, Vec::new(), s1.warnings.clone()));
        }
        let s3 = self.stage3(kind)?;
        let s1 = self.stage1(kind)?;
        let mut warnings = s3.warnings.clone();
        let (fit, risk_path) = if variant.final_deselect() {
            let report = deselect(&s3.path, self.cfg.tau)?;
            warnings.extend(report.warning.clone());
            if report.retained.is_empty() {
                (LinearFit { intercept: 0.0, coefficients: vec![0.0; q] }, vec![s3.path.initial_risk])
            } else {
                let fam = FamilyKind::spatial(s3.moment.lambda_hat, s3.moment.sigma2_hat, self.weights()?.clone())?;
                let sub = self.design.select(&report.retained)?;
                let path = boost_fit(&sub, self.y, &fam, s3.m_opt, self.cfg.learning_rate, None)?;
                let fit = LinearFit {
                    intercept: path.intercept,
                    coefficients: expand(q, &report.retained, &path.coefficients),
                };
                (fit, path.risk_path())
            }
        } else {
            (
                LinearFit { intercept: s3.path.intercept, coefficients: s3.path.coefficients.clone() },
                s3.path.risk_path(),
            )
        };
        debug_assert_eq!(names.len(), fit.coefficients.len());
        Ok(self.assemble(variant, fit, s3.m_opt, &s1, s3.moment, risk_path, warnings))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        variant: Variant,
        fit: LinearFit,
        m_opt: usize,
        s1: &FirstStepResult,
        moment: MomentEstimate,
        risk_path: Vec<f64>,
        warnings: Vec<String>,
    ) -> FitResult {
        let names = self.design.names().to_vec();
        let selected = names
            .iter()
            .zip(&fit.coefficients)
            .filter(|(_, &c)| c != 0.0)
            .map(|(n, _)| n.clone())
            .collect();
        FitResult {
            variant,
            lambda_hat: moment.lambda_hat,
            sigma2_hat: moment.sigma2_hat,
            intercept: fit.intercept,
            selected,
            coefficients: fit.coefficients,
            m_opt,
            first_step_m_opt: s1.m_opt,
            first_step_retained: s1
                .retained
                .as_ref()
                .map(|r| r.iter().map(|&j| names[j].clone()).collect()),
            names,
            moment_estimate: moment,
            risk_path,
            warnings,
        }
    }
}
