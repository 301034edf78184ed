//! Loss families for boosting.
//!
//! The spatial-error family measures the squared Mahalanobis distance of the
//! residual under `Ω(λ) = σ²[(I − λW)ᵀ(I − λW)]⁻¹`. Since `Ω⁻¹` is known in
//! closed form as `(1/σ²)PᵀP` with `P = I − λW`, every quantity here is
//! computed with sparse products against `W`; nothing is ever inverted.
//!
//! The negative gradient keeps the factor 2 of the derivative of the
//! quadratic form. Relative to conventions that drop it, this is the same as
//! doubling the learning rate.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::weights::WeightMatrix;

/// Autoregressive disturbance structure `(λ, σ²)` over a weight matrix.
#[derive(Debug, Clone)]
pub struct SpatialErrorStructure {
    lambda: f64,
    sigma2: f64,
    weights: Arc<WeightMatrix>,
}

impl SpatialErrorStructure {
    pub fn new(lambda: f64, sigma2: f64, weights: Arc<WeightMatrix>) -> Result<Self> {
        if !lambda.is_finite() || lambda.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "spatial parameter must satisfy |lambda| < 1, got {lambda}"
            )));
        }
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "innovation variance must be positive, got {sigma2}"
            )));
        }
        Ok(SpatialErrorStructure { lambda, sigma2, weights })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn weights(&self) -> &Arc<WeightMatrix> {
        &self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.n()
    }

    /// `out = (I − λW) x`.
    pub fn apply_precision_factor(&self, x: &[f64], out: &mut [f64]) {
        self.weights.lag_into(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi - self.lambda * *o;
        }
    }

    /// `out = (I − λW)ᵀ x`.
    pub fn apply_precision_factor_transpose(&self, x: &[f64], out: &mut [f64]) {
        self.weights.lag_transpose_into(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi - self.lambda * *o;
        }
    }

    /// Dense `I − λW`.
    pub fn precision_factor_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::identity(n, n) - self.weights.to_dense() * self.lambda
    }

    /// Solves `(I − λW) u = ε`.
    ///
    /// Uses the Neumann iteration `u ← ε + λWu`, which contracts whenever
    /// `|λ|·‖W‖∞ < 1` (always for row-normalized `W`), and falls back to a
    /// dense LU factorization otherwise.
    pub fn solve_precision_factor(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if eps.len() != n {
            return Err(Error::DimensionMismatch {
                context: "disturbance solve",
                expected: n,
                found: eps.len(),
            });
        }
        let w = &self.weights;
        let max_row = w.row_sums().into_iter().fold(0.0f64, f64::max);
        if self.lambda.abs() * max_row < 1.0 {
            let scale = eps.iter().map(|e| e.abs()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
            let mut u = eps.to_vec();
            let mut lag = vec![0.0; n];
            for _ in 0..100_000 {
                w.lag_into(&u, &mut lag);
                let mut delta = 0.0f64;
                for i in 0..n {
                    let next = eps[i] + self.lambda * lag[i];
                    delta = delta.max((next - u[i]).abs());
                    u[i] = next;
                }
                if delta <= 1e-15 * scale {
                    return Ok(u);
                }
            }
        }
        let lu = self.precision_factor_dense().lu();
        lu.solve(&nalgebra::DVector::from_column_slice(eps))
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| Error::Singular("I - lambda W".into()))
    }
}

#[derive(Debug, Clone)]
pub enum FamilyKind {
    SpatialError(SpatialErrorStructure),
    SquaredError,
}

impl FamilyKind {
    pub fn spatial(lambda: f64, sigma2: f64, weights: Arc<WeightMatrix>) -> Result<Self> {
        SpatialErrorStructure::new(lambda, sigma2, weights).map(FamilyKind::SpatialError)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::SpatialError(_) => "spatial_error",
            FamilyKind::SquaredError => "squared_error",
        }
    }

    fn check(&self, y: &[f64], eta: &[f64]) -> Result<()> {
        if y.len() != eta.len() {
            return Err(Error::DimensionMismatch {
                context: "response vs linear predictor",
                expected: y.len(),
                found: eta.len(),
            });
        }
        if let FamilyKind::SpatialError(s) = self {
            if s.n() != y.len() {
                return Err(Error::DimensionMismatch {
                    context: "spatial structure",
                    expected: s.n(),
                    found: y.len(),
                });
            }
        }
        if y.iter().chain(eta).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response or linear predictor"));
        }
        Ok(())
    }

    /// Whitened residual: `P(y − η)` for the spatial family, `y − η` otherwise.
    pub(crate) fn whiten_into(&self, resid: &[f64], out: &mut [f64]) {
        match self {
            FamilyKind::SpatialError(s) => s.apply_precision_factor(resid, out),
            FamilyKind::SquaredError => out.copy_from_slice(resid),
        }
    }

    pub(crate) fn inv_scale(&self) -> f64 {
        match self {
            FamilyKind::SpatialError(s) => 1.0 / s.sigma2,
            FamilyKind::SquaredError => 1.0,
        }
    }

    /// Negative gradient at residual `r = y − η` into `out`; `scratch` is
    /// overwritten. With observation weights `w` the spatial family returns
    /// `(2/σ²) D⁻¹ Pᵀ D P r` (`D = diag(w)`, zero weights left undivided), so a
    /// weighted base-learner fit descends the weighted risk.
    pub(crate) fn negative_gradient_from_residual(
        &self,
        resid: &[f64],
        weights: Option<&[f64]>,
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        match self {
            FamilyKind::SpatialError(s) => {
                s.apply_precision_factor(resid, scratch);
                if let Some(w) = weights {
                    scratch.iter_mut().zip(w).for_each(|(v, &wi)| *v *= wi);
                }
                s.apply_precision_factor_transpose(scratch, out);
                let c = 2.0 / s.sigma2;
                match weights {
                    // Divide back by w so the weighted base-learner fit sees D⁻¹∇.
                    Some(w) => out.iter_mut().zip(w).for_each(|(v, &wi)| {
                        *v *= if wi > 0.0 { c / wi } else { c };
                    }),
                    None => out.iter_mut().for_each(|v| *v *= c),
                }
            }
            FamilyKind::SquaredError => {
                for (o, &r) in out.iter_mut().zip(resid) {
                    *o = 2.0 * r;
                }
            }
        }
    }
}

fn residual(y: &[f64], eta: &[f64]) -> Vec<f64> {
    y.iter().zip(eta).map(|(a, b)| a - b).collect()
}

/// `(1/σ²)‖P(y − η)‖²` for the spatial family, `‖y − η‖²` for squared error.
pub fn loss(y: &[f64], eta: &[f64], fam: &FamilyKind) -> Result<f64> {
    fam.check(y, eta)?;
    let r = residual(y, eta);
    let mut e = vec![0.0; r.len()];
    fam.whiten_into(&r, &mut e);
    Ok(fam.inv_scale() * e.iter().map(|v| v * v).sum::<f64>())
}

/// `(2/σ²)PᵀP(y − η)` for the spatial family, `2(y − η)` for squared error.
pub fn negative_gradient(y: &[f64], eta: &[f64], fam: &FamilyKind) -> Result<Vec<f64>> {
    fam.check(y, eta)?;
    let r = residual(y, eta);
    let mut scratch = vec![0.0; r.len()];
    let mut out = vec![0.0; r.len()];
    fam.negative_gradient_from_residual(&r, None, &mut scratch, &mut out);
    Ok(out)
}

/// Per-observation contributions `e_i²/σ²` of the whitened residual
/// `e = P(y − η)`; they sum to [`loss`].
pub fn pointwise_risk(y: &[f64], eta: &[f64], fam: &FamilyKind) -> Result<Vec<f64>> {
    fam.check(y, eta)?;
    let r = residual(y, eta);
    let mut e = vec![0.0; r.len()];
    fam.whiten_into(&r, &mut e);
    let c = fam.inv_scale();
    Ok(e.into_iter().map(|v| c * v * v).collect())
}

/// `log|det(I − λW)|` from a dense LU factorization.
pub fn log_det_precision(s: &SpatialErrorStructure) -> Result<f64> {
    if s.lambda == 0.0 {
        return Ok(0.0);
    }
    let lu = s.precision_factor_dense().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let p = u[(i, i)].abs();
        if !p.is_finite() || p < f64::MIN_POSITIVE {
            return Err(Error::Singular(format!("zero pivot {i} in I - lambda W")));
        }
        acc += p.ln();
    }
    Ok(acc)
}
