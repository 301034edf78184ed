//! Moment estimation of the spatial parameters and a feasible GLS comparator.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::boost::DesignBlock;
use crate::error::{Error, Result};
use crate::family::SpatialErrorStructure;
use crate::weights::WeightMatrix;

pub const LAMBDA_BOUND: f64 = 0.999;
pub const SIGMA2_FLOOR: f64 = 1e-10;
const GRID_STEP: f64 = 0.01;
const GOLDEN_TOL: f64 = 1e-8;
const BOUNDARY_TOL: f64 = 1e-6;

/// Three sample moment equations `G·(λ, λ², σ²)ᵀ ≈ g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    pub big_g: Matrix3<f64>,
    pub g: Vector3<f64>,
    pub n: usize,
}

impl MomentSystem {
    /// `‖G·(λ, λ², σ²)ᵀ − g‖²`.
    pub fn objective(&self, lambda: f64, sigma2: f64) -> f64 {
        (self.big_g * Vector3::new(lambda, lambda * lambda, sigma2) - self.g).norm_squared()
    }

    /// Least-squares σ² for fixed λ, floored at [`SIGMA2_FLOOR`].
    /// The flag reports whether the floor was active.
    pub fn profile_sigma2(&self, lambda: f64) -> (f64, bool) {
        let a = self.big_g.column(0) * lambda + self.big_g.column(1) * (lambda * lambda) - self.g;
        let c = self.big_g.column(2);
        let s = -a.dot(&c) / c.dot(&c);
        if s < SIGMA2_FLOOR || !s.is_finite() {
            (SIGMA2_FLOOR, true)
        } else {
            (s, false)
        }
    }

    fn profiled(&self, lambda: f64) -> f64 {
        self.objective(lambda, self.profile_sigma2(lambda).0)
    }
}

pub fn build_moment_system(u_tilde: &[f64], w: &WeightMatrix) -> Result<MomentSystem> {
    let n = w.n();
    if u_tilde.len() != n {
        return Err(Error::DimensionMismatch { context: "residuals", expected: n, found: u_tilde.len() });
    }
    if !w.is_row_normalized() {
        return Err(Error::InvalidParameter("moment system requires a row-normalized W".into()));
    }
    if u_tilde.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("first-step residuals"));
    }
    let u = u_tilde;
    let mut ub = vec![0.0; n];
    let mut ubb = vec![0.0; n];
    w.lag_into(u, &mut ub);
    w.lag_into(&ub, &mut ubb);
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let nf = n as f64;
    let (uu, u_ub, ub_ub, u_ubb, ub_ubb, ubb_ubb) =
        (d(u, u), d(u, &ub), d(&ub, &ub), d(u, &ubb), d(&ub, &ubb), d(&ubb, &ubb));
    #[rustfmt::skip]
    let big_g = Matrix3::new(
        2.0 * u_ub / nf,              -ub_ub / nf,   1.0,
        2.0 * ub_ubb / nf,            -ubb_ubb / nf, w.trace_wtw() / nf,
        (u_ubb + ub_ub) / nf,         -ub_ubb / nf,  0.0,
    );
    let g = Vector3::new(uu / nf, ub_ub / nf, u_ub / nf);
    Ok(MomentSystem { big_g, g, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub lambda_hat: f64,
    pub sigma2_hat: f64,
    pub objective_value: f64,
    /// λ̂ lies within 1e-6 of the search box edge.
    pub at_boundary: bool,
    /// The σ² profile hit its floor.
    pub sigma2_clamped: bool,
}

/// Nonlinear least squares for (λ, σ²): σ² is profiled out in closed form
/// and λ is found by a 0.01 grid followed by golden-section refinement.
pub fn nls_estimate(sys: &MomentSystem) -> Result<MomentEstimate> {
    if sys.big_g.iter().chain(sys.g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("moment system"));
    }
    let first_two = sys.big_g.columns(0, 2);
    if first_two.iter().all(|v| v.abs() <= f64::MIN_POSITIVE) {
        return Err(Error::NonIdentified("residuals are zero; moment system is degenerate".into()));
    }

    let steps = ((2.0 * LAMBDA_BOUND) / GRID_STEP).floor() as usize;
    let mut grid: Vec<f64> = (0..=steps).map(|k| -LAMBDA_BOUND + k as f64 * GRID_STEP).collect();
    if *grid.last().unwrap() < LAMBDA_BOUND {
        grid.push(LAMBDA_BOUND);
    }
    let (mut best_l, mut best_f) = (grid[0], sys.profiled(grid[0]));
    for &l in &grid[1..] {
        let f = sys.profiled(l);
        if f < best_f {
            best_l = l;
            best_f = f;
        }
    }

    let (mut a, mut b) = (
        (best_l - GRID_STEP).max(-LAMBDA_BOUND),
        (best_l + GRID_STEP).min(LAMBDA_BOUND),
    );
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (sys.profiled(x1), sys.profiled(x2));
    while b - a >= GOLDEN_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = sys.profiled(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = sys.profiled(x2);
        }
    }
    for (l, f) in [(x1, f1), (x2, f2)] {
        if f < best_f {
            best_l = l;
            best_f = f;
        }
    }

    let (sigma2_hat, sigma2_clamped) = sys.profile_sigma2(best_l);
    let at_boundary = LAMBDA_BOUND - best_l.abs() <= BOUNDARY_TOL;
    if at_boundary {
        log::warn!("moment estimate of lambda at search boundary ({best_l})");
    }
    if sigma2_clamped {
        log::warn!("moment estimate of sigma2 clamped at {SIGMA2_FLOOR}");
    }
    Ok(MomentEstimate {
        lambda_hat: best_l,
        sigma2_hat,
        objective_value: sys.objective(best_l, sigma2_hat),
        at_boundary,
        sigma2_clamped,
    })
}

/// Intercept plus one coefficient per design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearFit {
    pub fn fitted(&self, design: &DesignBlock) -> Vec<f64> {
        let mut eta = vec![self.intercept; design.n()];
        for (j, &c) in self.coefficients.iter().enumerate() {
            if c != 0.0 {
                for (e, z) in eta.iter_mut().zip(design.column(j)) {
                    *e += c * z;
                }
            }
        }
        eta
    }
}

/// Least squares on `[1, Z]` after applying `transform` to every column and to `y`.
fn transformed_least_squares(
    design: &DesignBlock,
    y: &[f64],
    transform: impl Fn(&[f64], &mut [f64]),
) -> Result<LinearFit> {
    let (n, q) = (design.n(), design.q());
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "response", expected: n, found: y.len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response"));
    }
    if q + 1 > n {
        return Err(Error::RankDeficient(format!(
            "{} parameters with {n} observations; least squares has no unique solution",
            q + 1
        )));
    }
    let mut x = DMatrix::zeros(n, q + 1);
    let ones = vec![1.0; n];
    let mut buf = vec![0.0; n];
    transform(&ones, &mut buf);
    x.column_mut(0).copy_from_slice(&buf);
    for j in 0..q {
        transform(design.column(j), &mut buf);
        x.column_mut(j + 1).copy_from_slice(&buf);
    }
    transform(y, &mut buf);
    let rhs = DVector::from_column_slice(&buf);

    let qr = x.qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * max_diag) {
        return Err(Error::RankDeficient("design with intercept is not of full column rank".into()));
    }
    let qty = qr.q().transpose() * rhs;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    Ok(LinearFit { intercept: beta[0], coefficients: beta.as_slice()[1..].to_vec() })
}

/// Ordinary least squares with intercept.
pub fn fit_ols(design: &DesignBlock, y: &[f64]) -> Result<LinearFit> {
    transformed_least_squares(design, y, |x, out| out.copy_from_slice(x))
}

/// Generalized least squares with weight `PᵀP`, `P = I − λW`.
pub fn fit_fgls(design: &DesignBlock, y: &[f64], s: &SpatialErrorStructure) -> Result<LinearFit> {
    if s.n() != design.n() {
        return Err(Error::DimensionMismatch { context: "spatial structure", expected: design.n(), found: s.n() });
    }
    transformed_least_squares(design, y, |x, out| s.apply_precision_factor(x, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{build_circular, row_normalize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn ring(n: usize, k: usize) -> Arc<WeightMatrix> {
        Arc::new(row_normalize(&build_circular(n, k).unwrap()).unwrap())
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn design(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DesignBlock {
        let data: Vec<f64> = (0..n * q).map(|_| rng.random_range(-2.0..2.0)).collect();
        DesignBlock::new(
            DMatrix::from_column_slice(n, q, &data),
            (0..q).map(|j| format!("x{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_residuals() {
        let w = ring(10, 2);
        let sys = build_moment_system(&[0.0; 10], &w).unwrap();
        assert_eq!(sys.g, Vector3::zeros());
        for i in 0..3 {
            assert_eq!(sys.big_g[(i, 0)], 0.0);
            assert_eq!(sys.big_g[(i, 1)], 0.0);
        }
        assert_eq!(sys.big_g[(0, 2)], 1.0);
        assert!((sys.big_g[(1, 2)] - w.trace_wtw() / 10.0).abs() < 1e-15);
        assert_eq!(sys.big_g[(2, 2)], 0.0);
        assert!(matches!(nls_estimate(&sys), Err(Error::NonIdentified(_))));
    }

    #[test]
    fn ring3_dense_oracle() {
        let w = ring(3, 1);
        let wd = w.to_dense();
        let u = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let ub = &wd * &u;
        let ubb = &wd * &ub;
        let tr = (wd.transpose() * &wd).trace();
        let n = 3.0;
        let expected_g = Matrix3::new(
            2.0 * u.dot(&ub) / n,
            -ub.dot(&ub) / n,
            1.0,
            2.0 * ubb.dot(&ub) / n,
            -ubb.dot(&ubb) / n,
            tr / n,
            (u.dot(&ubb) + ub.dot(&ub)) / n,
            -ub.dot(&ubb) / n,
            0.0,
        );
        let expected_v = Vector3::new(u.dot(&u) / n, ub.dot(&ub) / n, u.dot(&ub) / n);
        let sys = build_moment_system(u.as_slice(), &w).unwrap();
        assert!((sys.big_g - expected_g).abs().max() < 1e-14);
        assert!((sys.g - expected_v).abs().max() < 1e-14);
        // every neighbour pair of the 3-ring, weights 1/2
        assert!((tr - 1.5).abs() < 1e-15);
        assert!((sys.g[0] - 14.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn trace_of_ring_400_5() {
        let w = ring(400, 5);
        assert!((w.trace_wtw() - 40.0).abs() < 1e-10);
        let wd = w.to_dense();
        assert!(((wd.transpose() * &wd).trace() - 40.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_unnormalized_and_nonfinite() {
        let raw = build_circular(5, 1).unwrap();
        assert!(build_moment_system(&[1.0; 5], &raw).is_err());
        let w = ring(5, 1);
        assert!(matches!(
            build_moment_system(&[1.0, f64::NAN, 0.0, 0.0, 0.0], &w),
            Err(Error::NonFinite(_))
        ));
        assert!(build_moment_system(&[1.0; 4], &w).is_err());
    }

    #[test]
    fn iid_noise_gives_lambda_near_zero_and_lattice_agrees() {
        let w = ring(400, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let u = normals(&mut rng, 400);
        let sys = build_moment_system(&u, &w).unwrap();
        let est = nls_estimate(&sys).unwrap();
        assert!(est.lambda_hat.abs() < 0.1, "{}", est.lambda_hat);
        assert!(!est.at_boundary && !est.sigma2_clamped);

        // brute-force 2-D lattice without profiling
        let mut best = (0.0, 0.0, f64::INFINITY);
        for i in 0..=398 {
            let l = -0.995 + 0.005 * i as f64;
            for k in 1..=600 {
                let s2 = 0.005 * k as f64;
                let f = sys.objective(l, s2);
                if f < best.2 {
                    best = (l, s2, f);
                }
            }
        }
        assert!((best.0 - est.lambda_hat).abs() <= 0.0051);
        assert!((best.1 - est.sigma2_hat).abs() <= 0.0051 + 0.02);
        assert!(est.objective_value <= best.2 + 1e-15);
    }

    #[test]
    fn exact_disturbances_recover_lambda() {
        let w = ring(400, 5);
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = normals(&mut rng, 400);
            let s = SpatialErrorStructure::new(0.8, 1.0, w.clone()).unwrap();
            let u = s.solve_precision_factor(&eps).unwrap();
            total += nls_estimate(&build_moment_system(&u, &w).unwrap()).unwrap().lambda_hat;
        }
        assert!((total / 20.0 - 0.8).abs() < 0.05);
    }

    #[test]
    fn boundary_is_flagged() {
        // moments of a nearly unit-root field push λ to the edge
        let sys = MomentSystem {
            big_g: Matrix3::new(2.0, -1.0, 1.0, 2.0, -1.0, 0.1, 2.0, -1.0, 0.0),
            g: Vector3::new(5.0, 5.0, 5.0),
            n: 10,
        };
        let est = nls_estimate(&sys).unwrap();
        assert!(est.at_boundary);
        assert!((est.lambda_hat - LAMBDA_BOUND).abs() < 1e-6);
    }

    #[test]
    fn moment_identities_hold_in_simulation() {
        let n = 400;
        let w = ring(n, 5);
        let tr = w.trace_wtw() / n as f64;
        let mut stats = vec![Vec::new(), Vec::new(), Vec::new()];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let e = normals(&mut rng, n);
            let we = w.lag(&e).unwrap();
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
            stats[0].push(d(&e, &e));
            stats[1].push(d(&we, &we));
            stats[2].push(d(&we, &e));
        }
        for (s, target) in stats.iter().zip([1.0, tr, 0.0]) {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
            assert!((m - target).abs() < 5.0 * sd / (s.len() as f64).sqrt(), "{m} vs {target}");
        }
    }

    #[test]
    fn fgls_at_zero_lambda_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = design(&mut rng, 30, 3);
        let y = normals(&mut rng, 30);
        let s = SpatialErrorStructure::new(0.0, 2.7, ring(30, 2)).unwrap();
        let a = fit_fgls(&d, &y, &s).unwrap();
        let b = fit_ols(&d, &y).unwrap();
        assert!((a.intercept - b.intercept).abs() < 1e-12);
        for (x, z) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn fgls_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = design(&mut rng, 20, 2);
        let y = normals(&mut rng, 20);
        let s = SpatialErrorStructure::new(0.6, 1.0, ring(20, 2)).unwrap();
        let p = s.precision_factor_dense();
        let mut zt = DMatrix::from_element(20, 3, 1.0);
        zt.columns_mut(1, 2).copy_from(d.matrix());
        let a = zt.transpose() * p.transpose() * &p * &zt;
        let b = zt.transpose() * p.transpose() * &p * DVector::from_column_slice(&y);
        let oracle = a.lu().solve(&b).unwrap();
        let fit = fit_fgls(&d, &y, &s).unwrap();
        assert!((fit.intercept - oracle[0]).abs() < 1e-9);
        assert!((fit.coefficients[0] - oracle[1]).abs() < 1e-9);
        assert!((fit.coefficients[1] - oracle[2]).abs() < 1e-9);
    }

    #[test]
    fn fgls_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = design(&mut rng, 5, 5);
        let s = SpatialErrorStructure::new(0.3, 1.0, ring(5, 1)).unwrap();
        assert!(matches!(fit_fgls(&d, &[1.0; 5], &s), Err(Error::RankDeficient(_))));
        // duplicated column
        let c: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let dup = DesignBlock::new(
            DMatrix::from_column_slice(8, 2, &[c.clone(), c].concat()),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(fit_ols(&dup, &[1.0; 8]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn ols_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = design(&mut rng, 15, 2);
        let y: Vec<f64> = (0..15).map(|i| 1.0 + 2.0 * d.column(0)[i] - d.column(1)[i]).collect();
        let fit = fit_ols(&d, &y).unwrap();
        let eta = fit.fitted(&d);
        assert!(eta.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fgls_residuals_are_orthogonal(seed in 0u64..10_000, lambda in -0.9f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 25;
            let d = design(&mut rng, n, 3);
            let y = normals(&mut rng, n);
            let s = SpatialErrorStructure::new(lambda, 1.0, ring(n, 2)).unwrap();
            let fit = fit_fgls(&d, &y, &s).unwrap();
            let r: Vec<f64> = y.iter().zip(fit.fitted(&d)).map(|(a, b)| a - b).collect();
            let mut pr = vec![0.0; n];
            let mut ptpr = vec![0.0; n];
            s.apply_precision_factor(&r, &mut pr);
            s.apply_precision_factor_transpose(&pr, &mut ptpr);
            prop_assert!(ptpr.iter().sum::<f64>().abs() < 1e-8);
            for j in 0..3 {
                let v: f64 = d.column(j).iter().zip(&ptpr).map(|(a, b)| a * b).sum();
                prop_assert!(v.abs() < 1e-8);
            }
        }

        #[test]
        fn nls_beats_verification_grid(seed in 0u64..10_000, lambda in -0.8f64..0.8) {
            let n = 100;
            let w = ring(n, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = normals(&mut rng, n);
            let s = SpatialErrorStructure::new(lambda, 1.0, w.clone()).unwrap();
            let u = s.solve_precision_factor(&eps).unwrap();
            let sys = build_moment_system(&u, &w).unwrap();
            let est = nls_estimate(&sys).unwrap();
            prop_assert!(est.lambda_hat.abs() < 1.0 && est.sigma2_hat > 0.0);
            prop_assert!((est.objective_value - sys.objective(est.lambda_hat, est.sigma2_hat)).abs() < 1e-15);
            for i in 0..=398 {
                let l = -0.995 + 0.005 * i as f64;
                let (s2, _) = sys.profile_sigma2(l);
                prop_assert!(est.objective_value <= sys.objective(l, s2) + 1e-14);
            }
        }
    }
}
