//! Wasserstein ambiguity sets built from historical disturbance samples and
//! their deterministic counterpart: a finite vertex set U enforced through
//! the robust recourse machinery.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::DispatchSolution;
use crate::netmodel::{DeviceKind, GridCase};
use crate::robust::{self, Channel, Dimension, DisturbanceSpec, ReserveOptions, ReserveSchedule, RobustError, MAX_VERTEX_DIMS};

/// Floor applied to covariance eigenvalues before taking square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;
const GOLDEN_MAX_ITER: usize = 200;
const SIGMA_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DroError {
    #[error("invalid sample set: {0}")]
    Samples(String),
    #[error("{0}")]
    Domain(String),
    #[error("C search did not converge")]
    NonConvergence,
    #[error("no σ ≤ {sigma_max} certifies level {rho} at radius {epsilon}")]
    NoFeasibleSigma { epsilon: f64, rho: f64, sigma_max: f64 },
    #[error("{m} dimensions exceed the vertex budget of {max}", max = MAX_VERTEX_DIMS)]
    VertexBudgetExceeded { m: usize },
    #[error(transparent)]
    Robust(#[from] RobustError),
}

/// Historical samples ζ̂ ∈ R^m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSet {
    pub dims: usize,
    #[serde(default)]
    pub labels: Vec<String>,
    pub samples: Vec<Vec<f64>>,
}

/// Moments and whitened samples v̂ = Σ̂^{-1/2}(ζ̂ − μ̂).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub cov_sqrt: DMatrix<f64>,
    pub whitened: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn from_json(text: &str) -> Result<Self, DroError> {
        let set: Self = serde_json::from_str(text).map_err(|e| DroError::Samples(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), DroError> {
        if self.dims == 0 {
            return Err(DroError::Samples("dims must be positive".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != self.dims {
            return Err(DroError::Samples(format!("{} labels for {} dims", self.labels.len(), self.dims)));
        }
        if self.samples.is_empty() {
            return Err(DroError::Samples("no samples".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != self.dims {
                return Err(DroError::Samples(format!("sample {i} has {} entries, expected {}", s.len(), self.dims)));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(DroError::Samples(format!("sample {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample mean, unbiased covariance (N−1) and whitening. Needs N ≥ 2.
    pub fn stats(&self) -> Result<SampleStats, DroError> {
        self.validate()?;
        let (n, m) = (self.samples.len(), self.dims);
        if n < 2 {
            return Err(DroError::Samples(format!("need at least 2 samples, got {n}")));
        }
        let mean: Vec<f64> = (0..m).map(|j| self.samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
        let mut cov = DMatrix::zeros(m, m);
        for s in &self.samples {
            let d = DVector::from_iterator(m, s.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
        let (cov_sqrt, inv_sqrt) = sym_sqrt(&cov);
        let whitened = self
            .samples
            .iter()
            .map(|s| {
                let d = DVector::from_iterator(m, s.iter().zip(&mean).map(|(a, b)| a - b));
                (&inv_sqrt * d).iter().copied().collect()
            })
            .collect();
        Ok(SampleStats { mean, cov, cov_sqrt, whitened })
    }
}

/// Symmetric square root and inverse square root with eigenvalue floor.
pub fn sym_sqrt(cov: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(cov.clone());
    let v = &eig.eigenvectors;
    let ev: Vec<f64> = eig.eigenvalues.iter().map(|&e| e.max(EIGEN_FLOOR)).collect();
    let d = DMatrix::from_diagonal(&DVector::from_iterator(ev.len(), ev.iter().map(|e| e.sqrt())));
    let di = DMatrix::from_diagonal(&DVector::from_iterator(ev.len(), ev.iter().map(|e| 1.0 / e.sqrt())));
    (v * d * v.transpose(), v * di * v.transpose())
}

/// Objective of the C search at α: √((1 + ln((1/N)Σ e^{α d_k})) / (2α)).
fn c_objective(alpha: f64, d: &[f64]) -> f64 {
    let top = d.iter().copied().fold(f64::NEG_INFINITY, f64::max) * alpha;
    let lse = top + (d.iter().map(|&x| (alpha * x - top).exp()).sum::<f64>() / d.len() as f64).ln();
    ((1.0 + lse) / (2.0 * alpha)).sqrt()
}

/// C = 2·inf_{α>0} √((1/(2α))(1 + ln((1/N)Σ e^{α‖ζ̂−μ̂‖₁²}))).
pub fn estimate_c(samples: &[Vec<f64>]) -> Result<f64, DroError> {
    if samples.is_empty() {
        return Err(DroError::Samples("no samples".into()));
    }
    let m = samples[0].len();
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..m).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let d: Vec<f64> = samples.iter().map(|s| s.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f64>().powi(2)).collect();
    let scale = d.iter().sum::<f64>() / n;
    if scale <= 0.0 {
        // All samples coincide: the objective decreases to 0 as α → ∞.
        return Ok(0.0);
    }
    // Search in log α over [1e-6, 50] in units of 1/mean(d²); coarse grid to
    // bracket, golden section to polish.
    let (lo, hi) = ((1e-6 / scale).ln(), (50.0 / scale).ln());
    let f = |t: f64| c_objective(t.exp(), &d);
    const GRID: usize = 400;
    let step = (hi - lo) / GRID as f64;
    let best = (0..=GRID).map(|i| lo + i as f64 * step).min_by(|a, b| f(*a).total_cmp(&f(*b))).expect("grid");
    let (mut a, mut b) = ((best - step).max(lo), (best + step).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut converged = false;
    for _ in 0..GOLDEN_MAX_ITER {
        if b - a <= 1e-12 {
            converged = true;
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if !converged {
        return Err(DroError::NonConvergence);
    }
    let v = f(best).min(f1).min(f2);
    if !v.is_finite() {
        return Err(DroError::NonConvergence);
    }
    Ok(2.0 * v)
}

/// How the confidence term of the radius is specified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonLevel {
    /// ε = C·√(ln(1/ρ)/N)
    Rho(f64),
    /// ε = C·√(ln(1/(1−β))/N)
    Confidence(f64),
}

/// ε(N) = C·√(ln(1/ρ)/N).
pub fn wasserstein_radius(c: f64, n: usize, rho: f64) -> Result<f64, DroError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DroError::Domain(format!("rho must be in (0,1), got {rho}")));
    }
    if n == 0 {
        return Err(DroError::Domain("N must be at least 1".into()));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(DroError::Domain(format!("C must be finite and non-negative, got {c}")));
    }
    Ok(c * ((1.0 / rho).ln() / n as f64).sqrt())
}

pub fn wasserstein_radius_at(c: f64, n: usize, level: EpsilonLevel) -> Result<f64, DroError> {
    match level {
        EpsilonLevel::Rho(rho) => wasserstein_radius(c, n, rho),
        EpsilonLevel::Confidence(beta) => {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(DroError::Domain(format!("beta must be in (0,1), got {beta}")));
            }
            wasserstein_radius(c, n, 1.0 - beta)
        }
    }
}

/// h(σ, λ) = λε + (1/N)Σ(1 − λ(σ − ‖v̂‖∞)⁺)⁺ over sample norms.
pub fn h_value(sigma: f64, lambda: f64, norms: &[f64], epsilon: f64) -> f64 {
    let s: f64 = norms.iter().map(|&v| (1.0 - lambda * (sigma - v).max(0.0)).max(0.0)).sum();
    lambda * epsilon + s / norms.len() as f64
}

/// Exact min over λ ≥ 0 of h(σ, ·): h is convex piecewise-linear in λ with
/// breakpoints at 1/(σ − ‖v̂‖∞) for positive gaps, so the minimum sits at
/// λ = 0 or one of them. Returns (h, λ*).
pub fn inner_min(sigma: f64, norms: &[f64], epsilon: f64) -> (f64, f64) {
    let n = norms.len() as f64;
    let mut gaps: Vec<f64> = norms.iter().map(|&v| sigma - v).filter(|&g| g > 0.0).collect();
    gaps.sort_by(f64::total_cmp);
    let stuck = norms.len() - gaps.len();
    let mut best = (1.0, 0.0);
    let mut prefix = 0.0;
    for (j, &g) in gaps.iter().enumerate() {
        // λ = 1/g: gaps below g contribute 1 − a/g, the rest vanish.
        let partial = j as f64 - prefix / g;
        let h = epsilon / g + (stuck as f64 + partial) / n;
        if h < best.0 {
            best = (h, 1.0 / g);
        }
        prefix += g;
    }
    best
}

pub fn max_norms(whitened: &[Vec<f64>]) -> Vec<f64> {
    whitened.iter().map(|v| v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))).collect()
}

/// Smallest σ ∈ [0, σ_max] with min_λ h(σ, λ) ≤ ρ (certified upper end of
/// the bisection). σ_max defaults to 10·max‖v̂‖∞.
pub fn solve_sigma(whitened: &[Vec<f64>], epsilon: f64, rho: f64, sigma_max: Option<f64>) -> Result<(f64, f64), DroError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DroError::Domain(format!("rho must be in (0,1), got {rho}")));
    }
    if !(epsilon >= 0.0) {
        return Err(DroError::Domain(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if whitened.is_empty() {
        return Err(DroError::Samples("no samples".into()));
    }
    let norms = max_norms(whitened);
    let top = norms.iter().copied().fold(0.0, f64::max);
    let sigma_max = sigma_max.unwrap_or(10.0 * top);
    let ok = |s: f64| inner_min(s, &norms, epsilon).0 <= rho;
    if !ok(sigma_max) {
        return Err(DroError::NoFeasibleSigma { epsilon, rho, sigma_max });
    }
    let (mut lo, mut hi) = (0.0, sigma_max);
    if ok(0.0) {
        hi = 0.0;
    }
    while hi - lo > SIGMA_TOL {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (h, lambda) = inner_min(hi, &norms, epsilon);
    // Independent re-evaluation of the certificate.
    let check = h_value(hi, lambda, &norms, epsilon);
    if check > rho + 1e-9 {
        return Err(DroError::NoFeasibleSigma { epsilon, rho, sigma_max });
    }
    debug_assert!((check - h).abs() <= 1e-9);
    Ok((hi, lambda))
}

/// U = {Σ̂^{1/2}v + μ̂ : v ∈ {±σ}^m}, binary sign order (bit m−1−j set ⇒ −σ).
pub fn vertex_set(sigma: f64, mean: &[f64], cov: &DMatrix<f64>) -> Result<Vec<Vec<f64>>, DroError> {
    let (sqrt, _) = sym_sqrt(cov);
    vertices_from_sqrt(sigma, mean, &sqrt)
}

fn vertices_from_sqrt(sigma: f64, mean: &[f64], sqrt: &DMatrix<f64>) -> Result<Vec<Vec<f64>>, DroError> {
    let m = mean.len();
    if m > MAX_VERTEX_DIMS {
        return Err(DroError::VertexBudgetExceeded { m });
    }
    Ok((0..1usize << m)
        .map(|i| {
            let v = DVector::from_iterator(m, (0..m).map(|j| if (i >> (m - 1 - j)) & 1 == 1 { -sigma } else { sigma }));
            (sqrt * v).iter().zip(mean).map(|(a, b)| a + b).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityConfig {
    /// Violation level ρ used by the σ certificate.
    pub rho: f64,
    /// Level used in ε(N); defaults to `Rho(rho)`.
    pub level: Option<EpsilonLevel>,
    pub sigma_max: Option<f64>,
}

impl AmbiguityConfig {
    pub fn new(rho: f64) -> Self {
        Self { rho, level: None, sigma_max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmbiguitySet {
    #[serde(rename = "C")]
    pub c: f64,
    pub epsilon: f64,
    pub rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub n: usize,
    pub labels: Vec<String>,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub vertices: Vec<Vec<f64>>,
}

impl AmbiguitySet {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Per-coordinate bounding box of U.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.mean.len())
            .map(|j| {
                let it = self.vertices.iter().map(|v| v[j]);
                (it.clone().fold(f64::INFINITY, f64::min), it.fold(f64::NEG_INFINITY, f64::max))
            })
            .collect()
    }
}

pub fn build_ambiguity_set(samples: &SampleSet, cfg: &AmbiguityConfig) -> Result<AmbiguitySet, DroError> {
    let stats = samples.stats()?;
    let c = estimate_c(&samples.samples)?;
    let n = samples.len();
    let level = cfg.level.unwrap_or(EpsilonLevel::Rho(cfg.rho));
    let epsilon = wasserstein_radius_at(c, n, level)?;
    let (sigma, lambda) = solve_sigma(&stats.whitened, epsilon, cfg.rho, cfg.sigma_max)?;
    let vertices = vertices_from_sqrt(sigma, &stats.mean, &stats.cov_sqrt)?;
    let m = samples.dims;
    Ok(AmbiguitySet {
        c,
        epsilon,
        rho: cfg.rho,
        beta: match level {
            EpsilonLevel::Confidence(b) => Some(b),
            EpsilonLevel::Rho(_) => None,
        },
        sigma,
        lambda,
        n,
        labels: samples.labels.clone(),
        mean: stats.mean,
        cov: (0..m).map(|i| (0..m).map(|j| stats.cov[(i, j)]).collect()).collect(),
        vertices,
    })
}

/// Disturbance mapping for labelled coordinates: device ids of loads or pv
/// units, forecast errors added over the whole horizon. Box bounds are U's
/// bounding box widened to include 0.
pub fn label_spec(case: &GridCase, set: &AmbiguitySet) -> Result<DisturbanceSpec, DroError> {
    if set.labels.len() != set.mean.len() {
        return Err(DroError::Samples("labels are required to map coordinates onto the case".into()));
    }
    let bbox = set.bounding_box();
    let dims = set
        .labels
        .iter()
        .zip(bbox)
        .map(|(label, (lo, hi))| {
            let d = case.device_index(label).ok_or_else(|| DroError::Samples(format!("unknown device {label:?}")))?;
            let channel = match case.devices[d].kind {
                DeviceKind::Load => Channel::LoadForecastAdd,
                DeviceKind::Pv => Channel::PvForecastAdd,
                k => return Err(DroError::Samples(format!("{label}: {k} has no forecast channel"))),
            };
            Ok(Dimension { target: label.clone(), channel, lo: lo.min(0.0), hi: hi.max(0.0), steps: [0, case.steps() - 1] })
        })
        .collect::<Result<_, DroError>>()?;
    Ok(DisturbanceSpec::new(dims))
}

/// Dispatch with recourse feasibility at every point of U.
pub fn solve_dro(
    case: &GridCase,
    set: &AmbiguitySet,
    spec: &DisturbanceSpec,
) -> Result<(DispatchSolution, ReserveSchedule), DroError> {
    solve_dro_with(case, set, spec, &ReserveOptions::default())
}

pub fn solve_dro_with(
    case: &GridCase,
    set: &AmbiguitySet,
    spec: &DisturbanceSpec,
    opts: &ReserveOptions,
) -> Result<(DispatchSolution, ReserveSchedule), DroError> {
    if spec.len() != set.mean.len() {
        return Err(DroError::Samples(format!("mapping has {} dimensions, U has {}", spec.len(), set.mean.len())));
    }
    spec.validate(case)?;
    Ok(robust::solve_with_vertices(case, spec, &set.vertices, opts)?)
}
