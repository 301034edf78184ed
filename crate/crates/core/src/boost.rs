//! Component-wise gradient boosting with simple linear base-learners.
//!
//! Every column of the design is a base-learner `a + b·z` fitted by (weighted)
//! least squares to the current negative gradient. Each iteration adds `s`
//! times the best-fitting base-learner to the linear predictor, starting from
//! the zero offset. Columns are used exactly as supplied.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilyKind;

/// Base-learner columns with weighted variance at or below this are degenerate.
pub const MIN_COLUMN_VARIANCE: f64 = 1e-12;

/// Design matrix `Z` with one named column per base-learner.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    columns: DMatrix<f64>,
    names: Vec<String>,
    truth_mask: Option<Vec<bool>>,
}

impl DesignBlock {
    pub fn new(columns: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if columns.nrows() == 0 || columns.ncols() == 0 {
            return Err(Error::EmptyDesign);
        }
        if names.len() != columns.ncols() {
            return Err(Error::DimensionMismatch {
                context: "design column names",
                expected: columns.ncols(),
                found: names.len(),
            });
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix"));
        }
        for (j, name) in names.iter().enumerate() {
            if columns.column(j).iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateColumn { name: name.clone() });
            }
        }
        Ok(DesignBlock { columns, names, truth_mask: None })
    }

    pub fn with_truth_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.q() {
            return Err(Error::DimensionMismatch {
                context: "truth mask",
                expected: self.q(),
                found: mask.len(),
            });
        }
        self.truth_mask = Some(mask);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn q(&self) -> usize {
        self.columns.ncols()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.columns.as_slice()[j * n..(j + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn truth_mask(&self) -> Option<&[bool]> {
        self.truth_mask.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Sub-design with the given columns, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<DesignBlock> {
        if idx.is_empty() {
            return Err(Error::EmptyDesign);
        }
        let n = self.n();
        let mut data = Vec::with_capacity(n * idx.len());
        for &j in idx {
            data.extend_from_slice(self.column(j));
        }
        Ok(DesignBlock {
            columns: DMatrix::from_column_slice(n, idx.len(), &data),
            names: idx.iter().map(|&j| self.names[j].clone()).collect(),
            truth_mask: self.truth_mask.as_ref().map(|m| idx.iter().map(|&j| m[j]).collect()),
        })
    }
}

/// Least-squares fit of a single base-learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseLearnerFit {
    pub intercept: f64,
    pub slope: f64,
    pub rss: f64,
}

/// Ordinary least squares of `v` on `(1, z)`.
pub fn fit_baselearner(z: &[f64], v: &[f64]) -> Result<BaseLearnerFit> {
    if z.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "base-learner",
            expected: z.len(),
            found: v.len(),
        });
    }
    let stats = ColumnStats::new(z, None).ok_or_else(|| Error::DegenerateColumn {
        name: "<base-learner>".into(),
    })?;
    let v_mean = v.iter().sum::<f64>() / v.len() as f64;
    let szv = dot(&stats.centered, v);
    let svv: f64 = v.iter().map(|x| (x - v_mean).powi(2)).sum();
    let slope = szv / stats.sxx;
    Ok(BaseLearnerFit {
        intercept: v_mean - slope * stats.mean,
        slope,
        rss: (svv - slope * szv).max(0.0),
    })
}

struct ColumnStats {
    centered: Vec<f64>,
    mean: f64,
    sxx: f64,
}

impl ColumnStats {
    fn new(z: &[f64], w: Option<&[f64]>) -> Option<Self> {
        let (sw, swz) = match w {
            Some(w) => (w.iter().sum::<f64>(), dot(w, z)),
            None => (z.len() as f64, z.iter().sum::<f64>()),
        };
        if sw <= 0.0 {
            return None;
        }
        let mean = swz / sw;
        let centered: Vec<f64> = z.iter().map(|x| x - mean).collect();
        let sxx = match w {
            Some(w) => centered.iter().zip(w).map(|(c, wi)| wi * c * c).sum::<f64>(),
            None => centered.iter().map(|c| c * c).sum::<f64>(),
        };
        if !(sxx / sw > MIN_COLUMN_VARIANCE) {
            return None;
        }
        Some(ColumnStats { centered, mean, sxx })
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub selected: usize,
    /// Unscaled intercept of the selected base-learner fit.
    pub intercept_increment: f64,
    /// Unscaled slope of the selected base-learner fit.
    pub slope_increment: f64,
    /// Risk after the update.
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostPath {
    pub learning_rate: f64,
    pub initial_risk: f64,
    pub records: Vec<IterationRecord>,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl BoostPath {
    pub fn m_stop(&self) -> usize {
        self.records.len()
    }

    pub fn q(&self) -> usize {
        self.coefficients.len()
    }

    /// `r^[0], r^[1], …, r^[m_stop]`.
    pub fn risk_path(&self) -> Vec<f64> {
        std::iter::once(self.initial_risk)
            .chain(self.records.iter().map(|r| r.risk))
            .collect()
    }

    pub fn final_risk(&self) -> f64 {
        self.records.last().map_or(self.initial_risk, |r| r.risk)
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        let mut seen = vec![false; self.q()];
        for r in &self.records {
            seen[r.selected] = true;
        }
        (0..self.q()).filter(|&j| seen[j]).collect()
    }
}

/// Boosting state over a fixed design, response, family and weights.
pub(crate) struct Booster<'a> {
    design: &'a DesignBlock,
    fam: &'a FamilyKind,
    weights: Option<&'a [f64]>,
    learning_rate: f64,
    stats: Vec<ColumnStats>,
    sw: f64,
    eta: Vec<f64>,
    resid: Vec<f64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
    wgrad: Vec<f64>,
}

impl<'a> Booster<'a> {
    pub(crate) fn new(
        design: &'a DesignBlock,
        y: &'a [f64],
        fam: &'a FamilyKind,
        learning_rate: f64,
        weights: Option<&'a [f64]>,
    ) -> Result<Self> {
        let n = design.n();
        if y.len() != n {
            return Err(Error::DimensionMismatch { context: "response", expected: n, found: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        if !(learning_rate > 0.0 && learning_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must lie in (0, 1], got {learning_rate}"
            )));
        }
        if let FamilyKind::SpatialError(s) = fam {
            if s.n() != n {
                return Err(Error::DimensionMismatch {
                    context: "spatial structure",
                    expected: n,
                    found: s.n(),
                });
            }
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch { context: "weights", expected: n, found: w.len() });
            }
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidParameter("observation weights must be finite and >= 0".into()));
            }
        }
        let sw = weights.map_or(n as f64, |w| w.iter().sum());
        if sw <= 0.0 {
            return Err(Error::InvalidParameter("observation weights sum to zero".into()));
        }
        let stats = (0..design.q())
            .map(|j| {
                ColumnStats::new(design.column(j), weights)
                    .ok_or_else(|| Error::DegenerateColumn { name: design.names()[j].clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Booster {
            design,

            fam,
            weights,
            learning_rate,
            stats,
            sw,
            eta: vec![0.0; n],
            resid: y.to_vec(),
            grad: vec![0.0; n],
            scratch: vec![0.0; n],
            wgrad: vec![0.0; n],
        })
    }

    #[cfg(test)]
    pub(crate) fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Weighted empirical risk at the current linear predictor.
    pub(crate) fn risk(&mut self) -> f64 {
        self.fam.whiten_into(&self.resid, &mut self.scratch);
        let ss = match self.weights {
            Some(w) => self.scratch.iter().zip(w).map(|(e, wi)| wi * e * e).sum::<f64>(),
            None => self.scratch.iter().map(|e| e * e).sum::<f64>(),
        };
        self.fam.inv_scale() * ss
    }

    /// Mean pointwise risk over `idx` at the current linear predictor.
    pub(crate) fn mean_risk_on(&mut self, idx: &[usize]) -> f64 {
        self.fam.whiten_into(&self.resid, &mut self.scratch);
        let ss: f64 = idx.iter().map(|&i| self.scratch[i] * self.scratch[i]).sum();
        self.fam.inv_scale() * ss / idx.len() as f64
    }

    /// One boosting iteration; returns the selected column and its fit.
    pub(crate) fn step(&mut self) -> Result<(usize, BaseLearnerFit)> {
        self.fam
            .negative_gradient_from_residual(&self.resid, self.weights, &mut self.scratch, &mut self.grad);
        if self.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("negative gradient"));
        }
        let (v_mean, svv) = match self.weights {
            Some(w) => {
                for ((o, g), wi) in self.wgrad.iter_mut().zip(&self.grad).zip(w) {
                    *o = wi * g;
                }
                let m = self.wgrad.iter().sum::<f64>() / self.sw;
                let svv: f64 = self.grad.iter().zip(w).map(|(g, wi)| wi * (g - m) * (g - m)).sum();
                (m, svv)
            }
            None => {
                self.wgrad.copy_from_slice(&self.grad);
                let m = self.grad.iter().sum::<f64>() / self.sw;
                (m, self.grad.iter().map(|g| (g - m) * (g - m)).sum::<f64>())
            }
        };

        // argmin RSS = argmax Szv²/Sxx; strict comparison keeps the lowest index on ties.
        let mut best = (0usize, f64::NEG_INFINITY, 0.0f64);
        for (j, st) in self.stats.iter().enumerate() {
            let szv = dot(&st.centered, &self.wgrad);
            let gain = szv * szv / st.sxx;
            if gain > best.1 {
                best = (j, gain, szv);
            }
        }
        let (j, gain, szv) = best;
        let st = &self.stats[j];
        let slope = szv / st.sxx;
        let fit = BaseLearnerFit {
            intercept: v_mean - slope * st.mean,
            slope,
            rss: (svv - gain).max(0.0),
        };

        let z = self.design.column(j);
        let (a, b) = (self.learning_rate * fit.intercept, self.learning_rate * fit.slope);
        for ((e, r), &zi) in self.eta.iter_mut().zip(self.resid.iter_mut()).zip(z) {
            let inc = a + b * zi;
            *e += inc;
            *r -= inc;
        }
        Ok((j, fit))
    }
}

/// Runs `m_stop` boosting iterations from the zero offset.
///
/// `weights`, when given, enter the base-learner fits and the recorded risk;
/// zero-weight observations still contribute to the gradient through the
/// spatial transform.
pub fn boost_fit(
    design: &DesignBlock,
    y: &[f64],
    fam: &FamilyKind,
    m_stop: usize,
    learning_rate: f64,
    weights: Option<&[f64]>,
) -> Result<BoostPath> {
    if m_stop == 0 {
        return Err(Error::InvalidParameter("m_stop must be at least 1".into()));
    }
    let mut booster = Booster::new(design, y, fam, learning_rate, weights)?;
    let initial_risk = booster.risk();
    let mut records = Vec::with_capacity(m_stop);
    let mut intercept = 0.0;
    let mut coefficients = vec![0.0; design.q()];
    for _ in 0..m_stop {
        let (j, fit) = booster.step()?;
        intercept += learning_rate * fit.intercept;
        coefficients[j] += learning_rate * fit.slope;
        records.push(IterationRecord {
            selected: j,
            intercept_increment: fit.intercept,
            slope_increment: fit.slope,
            risk: booster.risk(),
        });
    }
    Ok(BoostPath { learning_rate, initial_risk, records, intercept, coefficients })
}

/// Intercept and coefficients after the first `m` iterations.
pub fn coefficients_at(path: &BoostPath, m: usize) -> Result<(f64, Vec<f64>)> {
    if m > path.m_stop() {
        return Err(Error::OutOfRange { m, max: path.m_stop() });
    }
    if m == path.m_stop() {
        return Ok((path.intercept, path.coefficients.clone()));
    }
    let s = path.learning_rate;
    let mut intercept = 0.0;
    let mut coef = vec![0.0; path.q()];
    for r in &path.records[..m] {
        intercept += s * r.intercept_increment;
        coef[r.selected] += s * r.slope_increment;
    }
    Ok((intercept, coef))
}

/// Risk reduction attributed to each base-learner over the path.
pub fn risk_attribution(path: &BoostPath) -> Vec<f64> {
    let mut out = vec![0.0; path.q()];
    let mut prev = path.initial_risk;
    for r in &path.records {
        out[r.selected] += prev - r.risk;
        prev = r.risk;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeselectionReport {
    pub attributions: Vec<f64>,
    pub threshold: f64,
    pub total_reduction: f64,
    pub retained: Vec<usize>,
    pub warning: Option<String>,
}

/// Keeps the base-learners whose attributed risk reduction is at least
/// `tau` times the total reduction.
pub fn deselect(path: &BoostPath, tau: f64) -> Result<DeselectionReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {tau}")));
    }
    let attributions = risk_attribution(path);
    let total_reduction = path.initial_risk - path.final_risk();
    let cut = tau * total_reduction;
    let retained: Vec<usize> = if total_reduction > 0.0 {
        attributions
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= cut)
            .map(|(j, _)| j)
            .collect()
    } else {
        Vec::new()
    };
    let warning = if retained.is_empty() {
        let msg = format!(
            "deselection retained no base-learners (total risk reduction {total_reduction:e})"
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(DeselectionReport { attributions, threshold: tau, total_reduction, retained, warning })
}
