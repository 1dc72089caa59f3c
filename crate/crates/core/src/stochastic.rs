//! Gaussian chance-constrained reserve sizing and sample VaR/CVaR.
//!
//! Both methods reduce to per-step aggregate requirements ΣR⁺ ≥ up and
//! ΣR⁻ ≥ down on top of the baseline dispatch. The two sides share the
//! risk budget evenly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dispatch::DispatchSolution;
use crate::netmodel::GridCase;
use crate::robust::{ReserveModel, ReserveOptions, ReserveSchedule, RobustError};

/// Diagonal jitter used when testing a covariance for positive semi-definiteness.
pub const PSD_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("covariance is not positive semi-definite")]
    NotPSD,
    #[error("risk level must lie in {range}, got {value}")]
    InvalidLevel { value: f64, range: &'static str },
    #[error("{n} samples are too few for level {rho} (need at least {need})")]
    InsufficientSamples { n: usize, need: usize, rho: f64 },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid gaussian model: {0}")]
    Model(String),
    #[error(transparent)]
    Robust(#[from] RobustError),
}

/// Standard-normal quantile φ⁻¹(p).
pub fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationRow {
    pub constraint: String,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
}

/// Forecast-error model w ~ N(μ, Σ). Each row maps w to an aggregate
/// imbalance (positive = deficit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub rows: Vec<AggregationRow>,
}

impl GaussianModel {
    pub fn from_json(text: &str) -> Result<Self, StochasticError> {
        let model: Self = serde_json::from_str(text).map_err(|e| StochasticError::Model(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let m = self.dims();
        DMatrix::from_fn(m, m, |i, j| self.cov[i][j])
    }

    pub fn validate(&self) -> Result<(), StochasticError> {
        let m = self.dims();
        if m == 0 {
            return Err(StochasticError::Model("empty mean".into()));
        }
        if self.cov.len() != m || self.cov.iter().any(|r| r.len() != m) {
            return Err(StochasticError::Model(format!("cov must be {m}×{m}")));
        }
        if let Some(l) = &self.labels {
            if l.len() != m {
                return Err(StochasticError::Model(format!("{} labels for {m} dimensions", l.len())));
            }
        }
        if self.rows.is_empty() {
            return Err(StochasticError::Model("no aggregation rows".into()));
        }
        for r in &self.rows {
            if r.constraint != "balance" {
                return Err(StochasticError::Model(format!("unsupported constraint {:?}", r.constraint)));
            }
            if r.a.len() != m {
                return Err(StochasticError::Model(format!("row A has {} entries, expected {m}", r.a.len())));
            }
        }
        let finite = self.mean.iter().chain(self.cov.iter().flatten()).chain(self.rows.iter().flat_map(|r| &r.a));
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(StochasticError::Model("non-finite entry".into()));
        }
        self.sqrt_factor().map(|_| ())
    }

    /// Lower Cholesky factor of Σ + jitter·I.
    pub fn sqrt_factor(&self) -> Result<DMatrix<f64>, StochasticError> {
        psd_factor(&self.cov_matrix())
    }

    /// One draw of w.
    pub fn sample<R: Rng + ?Sized>(&self, factor: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dims(), (0..self.dims()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let w = factor * z;
        w.iter().zip(&self.mean).map(|(a, b)| a + b).collect()
    }

    /// Aggregate imbalance A·w of the first balance row.
    pub fn imbalance(&self, w: &[f64]) -> f64 {
        self.rows[0].a.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, StochasticError> {
    let m = cov.nrows();
    if cov.ncols() != m {
        return Err(StochasticError::NotPSD);
    }
    for i in 0..m {
        for j in 0..i {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(StochasticError::NotPSD);
            }
        }
    }
    let jittered = cov + DMatrix::identity(m, m) * PSD_JITTER;
    jittered.cholesky().map(|c| c.l()).ok_or(StochasticError::NotPSD)
}

fn check_alpha(alpha: f64) -> Result<(), StochasticError> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(StochasticError::InvalidLevel { value: alpha, range: "(0, 0.5]" })
    }
}

/// Deterministic margin φ⁻¹(1−α)·‖A·Σ^{1/2}‖₂ for a single aggregation row.
pub fn gaussian_reserve_row(a: &[f64], cov: &DMatrix<f64>, alpha: f64) -> Result<f64, StochasticError> {
    check_alpha(alpha)?;
    if a.len() != cov.nrows() {
        return Err(StochasticError::Model(format!("row A has {} entries, expected {}", a.len(), cov.nrows())));
    }
    psd_factor(cov)?;
    let av = DVector::from_column_slice(a);
    let var = (av.transpose() * cov * &av)[(0, 0)].max(0.0);
    Ok(normal_quantile(1.0 - alpha) * var.sqrt())
}

/// Per-step aggregate reserve requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Requirement {
    pub up: f64,
    pub down: f64,
}

/// Two-sided requirement with α/2 on each side:
/// ΣR⁺ ≥ Aμ + φ⁻¹(1−α/2)σ_A, ΣR⁻ ≥ −Aμ + φ⁻¹(1−α/2)σ_A (worst row per side).
pub fn chance_requirement(model: &GaussianModel, alpha: f64) -> Result<Requirement, StochasticError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StochasticError::InvalidLevel { value: alpha, range: "(0, 1)" });
    }
    model.validate()?;
    let cov = model.cov_matrix();
    let mut req = Requirement { up: 0.0, down: 0.0 };
    for row in &model.rows {
        let margin = gaussian_reserve_row(&row.a, &cov, alpha / 2.0)?;
        let shift: f64 = row.a.iter().zip(&model.mean).map(|(a, m)| a * m).sum();
        req.up = req.up.max(shift + margin);
        req.down = req.down.max(-shift + margin);
    }
    Ok(req)
}

/// Baseline dispatch plus reserves meeting `req` at every step.
pub fn solve_with_requirement(
    case: &GridCase,
    req: Requirement,
    opts: &ReserveOptions,
) -> Result<(DispatchSolution, ReserveSchedule), StochasticError> {
    let mut model = ReserveModel::new(case, opts)?;
    for k in 0..case.steps() {
        model.add_requirement(k, req.up, req.down)?;
    }
    Ok(model.solve()?)
}

pub fn solve_chance(case: &GridCase, model: &GaussianModel, alpha: f64) -> Result<(DispatchSolution, ReserveSchedule), StochasticError> {
    solve_chance_with(case, model, alpha, &ReserveOptions::default())
}

pub fn solve_chance_with(
    case: &GridCase,
    model: &GaussianModel,
    alpha: f64,
    opts: &ReserveOptions,
) -> Result<(DispatchSolution, ReserveSchedule), StochasticError> {
    check_alpha(alpha)?;
    let req = chance_requirement(model, alpha)?;
    solve_with_requirement(case, req, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub var_value: f64,
    pub cvar_value: f64,
    pub level: f64,
    pub n: usize,
}

/// Empirical VaR (higher-interpolation (1−ρ)-quantile) and CVaR (mean of
/// samples at or above VaR).
pub fn estimate_var_cvar(samples: &[f64], rho: f64) -> Result<RiskEstimate, StochasticError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(StochasticError::InvalidLevel { value: rho, range: "(0, 1]" });
    }
    let need = (1.0 / rho - 1e-9).ceil() as usize;
    if samples.len() < need.max(1) {
        return Err(StochasticError::InsufficientSamples { n: samples.len(), need: need.max(1), rho });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(StochasticError::NonFinite(i));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = (((n - 1) as f64) * (1.0 - rho) - 1e-9).ceil().max(0.0) as usize;
    let var_value = sorted[idx.min(n - 1)];
    let tail = &sorted[sorted.partition_point(|&v| v < var_value)..];
    let cvar_value = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(RiskEstimate { var_value, cvar_value: cvar_value.max(var_value), level: rho, n })
}

/// CVaR sizing from historical aggregate imbalances (positive = deficit),
/// with ρ/2 on each side.
pub fn cvar_requirement(imbalances: &[f64], rho: f64) -> Result<Requirement, StochasticError> {
    let up = estimate_var_cvar(imbalances, rho / 2.0)?;
    let neg: Vec<f64> = imbalances.iter().map(|v| -v).collect();
    let down = estimate_var_cvar(&neg, rho / 2.0)?;
    Ok(Requirement { up: up.cvar_value.max(0.0), down: down.cvar_value.max(0.0) })
}

pub fn solve_cvar(case: &GridCase, imbalances: &[f64], rho: f64) -> Result<(DispatchSolution, ReserveSchedule), StochasticError> {
    let req = cvar_requirement(imbalances, rho)?;
    solve_with_requirement(case, req, &ReserveOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    // φ⁻¹ at the exact binary values of p, 30-digit reference arithmetic.
    const QUANTILES: &[(f64, f64)] = &[
        (1e-10, -6.3613409024040561991),
        (1e-06, -4.7534243088228989573),
        (0.001, -3.0902323061678135354),
        (0.01, -2.3263478740408410931),
        (0.025, -1.9599639845400542118),
        (0.05, -1.644853626951472688),
        (0.1, -1.2815515655446004353),
        (0.25, -0.6744897501960817432),
        (0.4, -0.25334710313579974132),
        (0.5, 0.0),
        (0.6, 0.25334710313579974132),
        (0.75, 0.6744897501960817432),
        (0.9, 1.2815515655446005935),
        (0.95, 1.6448536269514722843),
        (0.975, 1.9599639845400538556),
        (0.99, 2.3263478740408407676),
        (0.999, 3.0902323061678132778),
        (0.999999, 4.7534243088170877657),
    ];

    #[test]
    fn quantile_matches_reference_table() {
        for &(p, z) in QUANTILES {
            assert!((normal_quantile(p) - z).abs() <= 1e-9, "p={p}: {} vs {z}", normal_quantile(p));
        }
    }

    #[test]
    fn reserve_row_examples() {
        let cov = DMatrix::from_element(1, 1, 0.04);
        let m = gaussian_reserve_row(&[1.0], &cov, 0.05).unwrap();
        assert_abs_diff_eq!(m, 1.6448536269514722843 * 0.2, epsilon = 1e-9);
        assert_eq!(gaussian_reserve_row(&[1.0], &DMatrix::zeros(1, 1), 0.05).unwrap(), 0.0);
        assert_eq!(gaussian_reserve_row(&[1.0], &cov, 0.5).unwrap(), 0.0);
        assert!(matches!(gaussian_reserve_row(&[1.0], &cov, 0.0), Err(StochasticError::InvalidLevel { .. })));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(gaussian_reserve_row(&[1.0, 0.0], &bad, 0.05), Err(StochasticError::NotPSD));
    }

    #[test]
    fn var_cvar_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = estimate_var_cvar(&s, 0.05).unwrap();
        // Oracle: sort, take the higher-interpolated index, average the tail.
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = (99.0_f64 * 0.95).ceil() as usize;
        let tail: Vec<f64> = sorted.iter().copied().filter(|&v| v >= sorted[idx]).collect();
        assert_eq!(r.var_value, sorted[idx]);
        assert_eq!(r.var_value, 96.0);
        assert_eq!(r.cvar_value, tail.iter().sum::<f64>() / tail.len() as f64);
        assert_eq!(r.cvar_value, 98.0);

        let c = estimate_var_cvar(&[2.5; 20], 0.1).unwrap();
        assert_eq!((c.var_value, c.cvar_value), (2.5, 2.5));

        let full = estimate_var_cvar(&[3.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!((full.var_value, full.cvar_value), (1.0, 2.0));

        assert!(matches!(estimate_var_cvar(&s[..19], 0.05), Err(StochasticError::InsufficientSamples { .. })));
    }

    proptest! {
        #[test]
        fn cvar_dominates_var_and_decreases_in_level(
            xs in prop::collection::vec(-10.0f64..10.0, 20..200),
            r1 in 0.05f64..1.0,
            r2 in 0.05f64..1.0,
        ) {
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let a = estimate_var_cvar(&xs, lo).unwrap();
            let b = estimate_var_cvar(&xs, hi).unwrap();
            prop_assert!(a.cvar_value >= a.var_value);
            prop_assert!(a.cvar_value >= b.cvar_value - 1e-12);
        }

        #[test]
        fn margin_is_homogeneous_in_std(lambda in 0.0f64..10.0, s in 0.01f64..1.0, alpha in 0.001f64..0.5) {
            let base = gaussian_reserve_row(&[1.0], &DMatrix::from_element(1, 1, s * s), alpha).unwrap();
            let scaled = gaussian_reserve_row(&[1.0], &DMatrix::from_element(1, 1, (lambda * s).powi(2)), alpha).unwrap();
            prop_assert!((scaled - lambda * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
        }
    }
}
