//! Monte-Carlo validation of reserve schedules and the efficiency–resilience
//! sweep.
//!
//! Each scenario draws a supply shortfall at one step, deploys reserves
//! proportionally, and records whatever imbalance is left uncovered.
//! Scenario `i` uses its own ChaCha8 stream seeded with `seed ^ i`, so
//! results do not depend on thread count or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dispatch::DispatchSolution;
use crate::dro::{build_ambiguity_set, label_spec, solve_dro, AmbiguityConfig, SampleSet};
use crate::events::{EventModel, Mode};
use crate::netmodel::GridCase;
use crate::robust::{proportional_dispatch, solve_robust, DisturbanceSpec, ReserveSchedule};
use crate::stochastic::{estimate_var_cvar, solve_chance, solve_cvar, GaussianModel};

/// Uncovered imbalance below this is treated as numerical noise.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Source of per-scenario imbalances (positive = supply deficit).
pub trait ImbalanceSampler: Sync {
    fn sample(&self, sol: &DispatchSolution, step: usize, rng: &mut ChaCha8Rng) -> (Mode, f64);
}

impl ImbalanceSampler for EventModel {
    fn sample(&self, sol: &DispatchSolution, step: usize, rng: &mut ChaCha8Rng) -> (Mode, f64) {
        self.sample_imbalance(sol, step, rng)
    }
}

/// Aggregate imbalance A·w with w ~ N(μ, Σ).
pub struct GaussianSampler {
    model: GaussianModel,
    factor: nalgebra::DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(model: GaussianModel) -> Result<Self, crate::stochastic::StochasticError> {
        let factor = model.sqrt_factor()?;
        Ok(Self { model, factor })
    }
}

impl ImbalanceSampler for GaussianSampler {
    fn sample(&self, _sol: &DispatchSolution, _step: usize, rng: &mut ChaCha8Rng) -> (Mode, f64) {
        (Mode::Normal, self.model.imbalance(&self.model.sample(&self.factor, rng)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub scenario_id: usize,
    pub step: usize,
    pub mode: Mode,
    pub imbalance_pu: f64,
    pub deployed_pu: f64,
    pub violation_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub seed: u64,
    pub rho: f64,
    pub violation_probability: f64,
    /// Empirical VaR/CVaR of the violation magnitude at level ρ (absent when
    /// N is too small for the level).
    pub var_pu: Option<f64>,
    pub cvar_pu: Option<f64>,
    pub mean_violation_pu: f64,
    pub pass: bool,
    pub scenarios: Vec<Scenario>,
}

impl ValidationReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario_id,mode,violation_pu\n");
        for s in &self.scenarios {
            out.push_str(&format!("{},{},{}\n", s.scenario_id, s.mode, s.violation_pu));
        }
        out
    }

    pub fn resilience(&self) -> f64 {
        1.0 - self.violation_probability
    }
}

/// Runs `n` scenarios against the schedule; never fails on violations.
pub fn validate(
    case: &GridCase,
    sol: &DispatchSolution,
    schedule: &ReserveSchedule,
    sampler: &dyn ImbalanceSampler,
    n: usize,
    seed: u64,
    rho: f64,
) -> ValidationReport {
    let k_steps = case.steps().max(1);
    let scenarios: Vec<Scenario> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let step = i % k_steps;
            let (mode, d) = sampler.sample(sol, step, &mut rng);
            let act = proportional_dispatch(schedule, d, step);
            Scenario { scenario_id: i, step, mode, imbalance_pu: d, deployed_pu: act.deployed, violation_pu: act.shortfall }
        })
        .collect();
    let violations: Vec<f64> = scenarios.iter().map(|s| s.violation_pu).collect();
    let count = violations.iter().filter(|&&v| v > VIOLATION_TOL).count();
    let prob = if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let risk = estimate_var_cvar(&violations, rho).ok();
    ValidationReport {
        n,
        seed,
        rho,
        violation_probability: prob,
        var_pu: risk.map(|r| r.var_value),
        cvar_pu: risk.map(|r| r.cvar_value),
        mean_violation_pu: if n == 0 { 0.0 } else { violations.iter().sum::<f64>() / n as f64 },
        pass: prob <= rho,
        scenarios,
    }
}

/// Reserve sizing method swept by `pareto_sweep`.
pub enum SweepMethod<'a> {
    /// Grid values scale the disturbance box (a reserve budget multiplier).
    Robust(&'a DisturbanceSpec),
    /// Grid values are the violation level α.
    Chance(&'a GaussianModel),
    /// Grid values are ρ for the ambiguity set built from the samples.
    Dro(&'a SampleSet),
    /// Grid values are ρ; requirements from the aggregate (sum) of the samples.
    Cvar(&'a SampleSet),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub rho: f64,
    pub cost: f64,
    pub resilience: f64,
    pub total_reserves_pu: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("rho,cost,resilience,total_reserves_pu,seed\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.rho, p.cost, p.resilience, p.total_reserves_pu, p.seed));
    }
    out
}

/// Solves one grid point with the given method.
pub fn solve_point(case: &GridCase, method: &SweepMethod<'_>, value: f64) -> Result<(DispatchSolution, ReserveSchedule), String> {
    match method {
        SweepMethod::Robust(spec) => {
            let mut scaled = (*spec).clone();
            for d in &mut scaled.dims {
                d.lo *= value;
                d.hi *= value;
            }
            solve_robust(case, &scaled).map_err(|e| e.to_string())
        }
        SweepMethod::Chance(model) => solve_chance(case, model, value).map_err(|e| e.to_string()),
        SweepMethod::Dro(samples) => {
            let set = build_ambiguity_set(samples, &AmbiguityConfig::new(value)).map_err(|e| e.to_string())?;
            let spec = label_spec(case, &set).map_err(|e| e.to_string())?;
            solve_dro(case, &set, &spec).map_err(|e| e.to_string())
        }
        SweepMethod::Cvar(samples) => {
            let agg: Vec<f64> = samples.samples.iter().map(|s| s.iter().sum()).collect();
            solve_cvar(case, &agg, value).map_err(|e| e.to_string())
        }
    }
}

/// One solve and one validation per grid value; every point reuses `seed`
/// so the comparison across the grid is paired. Failed points carry their
/// error and NaN metrics.
pub fn pareto_sweep(
    case: &GridCase,
    method: &SweepMethod<'_>,
    grid: &[f64],
    sampler: &dyn ImbalanceSampler,
    n: usize,
    seed: u64,
) -> Vec<ParetoPoint> {
    grid.iter()
        .map(|&rho| match solve_point(case, method, rho) {
            Ok((sol, sched)) => {
                let rep = validate(case, &sol, &sched, sampler, n, seed, rho);
                ParetoPoint {
                    rho,
                    cost: sol.objective,
                    resilience: rep.resilience(),
                    total_reserves_pu: sched.total(),
                    seed,
                    error: None,
                }
            }
            Err(e) => ParetoPoint { rho, cost: f64::NAN, resilience: f64::NAN, total_reserves_pu: f64::NAN, seed, error: Some(e) },
        })
        .collect()
}
