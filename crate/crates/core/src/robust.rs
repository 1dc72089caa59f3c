//! Reserve co-optimization against a box of disturbances, real-time
//! proportional reserve control, and post-hoc verification tools.
//!
//! Reserves are expressed on each device's control axis in injection sign:
//! dg output, storage discharge, load shedding and released pv curtailment
//! all count as "up". A recourse block per disturbance vertex must find an
//! operating point whose controls stay inside `[setpoint − R⁻, setpoint + R⁺]`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{solve_with, ConicError, ConicProgram, SolveError, SolveOptions, SolveReport, SolveStatus, VarId};
use crate::dispatch::{
    build_block, extract_solution, objective_baseline, Block, BlockOptions, DispatchError, DispatchSolution,
    DEFAULT_LOSS_WEIGHT,
};
use crate::netmodel::{DeviceKind, GridCase, OperatingConditions};
use crate::powerflow::{add_loss_penalty, FlowModel};

/// Largest number of disturbance dimensions accepted for vertex enumeration.
pub const MAX_VERTEX_DIMS: usize = 12;
pub const BISECTION_TOL: f64 = 1e-4;
pub const BISECTION_MAX_ITER: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("{m} disturbance dimensions exceed the vertex budget of {max}", max = MAX_VERTEX_DIMS)]
    VertexBudgetExceeded { m: usize },
    #[error("no recourse covers vertex {index} (w = {w:?})")]
    InfeasibleRobust { index: usize, w: Vec<f64> },
    #[error("invalid disturbance spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("solver failure: {0}")]
    Solve(SolveError),
    #[error("bisection did not converge along direction {direction}")]
    BisectionNotConverged { direction: usize },
    #[error("degenerate active set: {0}")]
    DegenerateActiveSet(String),
    #[error("no feasible reserve gain along direction {direction}")]
    NoFeasibleGain { direction: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Fraction of rating lost: effective rating = rating·(1 − w).
    CapacityScale,
    PvForecastAdd,
    LoadForecastAdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub target: String,
    pub channel: Channel,
    pub lo: f64,
    pub hi: f64,
    /// Inclusive step window.
    pub steps: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct DisturbanceSpec {
    pub dims: Vec<Dimension>,
}

enum Target {
    Device(usize),
    Branch(usize),
}

impl DisturbanceSpec {
    pub fn new(dims: Vec<Dimension>) -> Self {
        Self { dims }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, RobustError> {
        serde_json::from_str(text).map_err(|e| RobustError::Spec(e.to_string()))
    }

    fn target(&self, case: &GridCase, j: usize) -> Result<Target, RobustError> {
        let dim = &self.dims[j];
        let bad = |msg: &str| RobustError::Spec(format!("dimension {j} ({}): {msg}", dim.target));
        if let Some(d) = case.device_index(&dim.target) {
            let kind = case.devices[d].kind;
            let ok = match dim.channel {
                Channel::CapacityScale => kind != DeviceKind::Load,
                Channel::PvForecastAdd => kind == DeviceKind::Pv,
                Channel::LoadForecastAdd => kind == DeviceKind::Load,
            };
            if !ok {
                return Err(bad("channel does not apply to this device kind"));
            }
            return Ok(Target::Device(d));
        }
        if let Some(l) = case.branch_index(&dim.target) {
            if dim.channel != Channel::CapacityScale {
                return Err(bad("branches only accept capacity_scale"));
            }
            return Ok(Target::Branch(l));
        }
        Err(bad("unknown target"))
    }

    pub fn validate(&self, case: &GridCase) -> Result<(), RobustError> {
        for (j, dim) in self.dims.iter().enumerate() {
            self.target(case, j)?;
            let bad = |msg: &str| RobustError::Spec(format!("dimension {j} ({}): {msg}", dim.target));
            if !(dim.lo.is_finite() && dim.hi.is_finite()) || dim.lo > dim.hi {
                return Err(bad("require finite lo <= hi"));
            }
            match dim.channel {
                Channel::CapacityScale if dim.lo < 0.0 || dim.hi > 1.0 => return Err(bad("capacity_scale bounds must lie in [0, 1]")),
                Channel::PvForecastAdd | Channel::LoadForecastAdd if dim.lo > 0.0 || dim.hi < 0.0 => {
                    return Err(bad("additive channels require lo <= 0 <= hi"))
                }
                _ => {}
            }
            if dim.steps[0] > dim.steps[1] || dim.steps[1] >= case.steps() {
                return Err(bad("step window outside the horizon"));
            }
        }
        Ok(())
    }

    pub fn nominal(&self) -> Vec<f64> {
        vec![0.0; self.dims.len()]
    }

    /// Box corners in binary sign order: coordinate j takes `lo` when bit
    /// (m−1−j) of the vertex index is set. Duplicate corners are dropped.
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>, RobustError> {
        let m = self.dims.len();
        if m > MAX_VERTEX_DIMS {
            return Err(RobustError::VertexBudgetExceeded { m });
        }
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(1 << m);
        for i in 0..(1usize << m) {
            let v: Vec<f64> = (0..m)
                .map(|j| if (i >> (m - 1 - j)) & 1 == 1 { self.dims[j].lo } else { self.dims[j].hi })
                .collect();
            if !out.contains(&v) {
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Operating conditions with disturbance `w` applied on top of nominal.
    pub fn conditions(&self, case: &GridCase, w: &[f64]) -> Result<OperatingConditions, RobustError> {
        let mut cond = OperatingConditions::nominal(case);
        self.apply(case, w, &mut cond)?;
        Ok(cond)
    }

    pub fn apply(&self, case: &GridCase, w: &[f64], cond: &mut OperatingConditions) -> Result<(), RobustError> {
        if w.len() != self.dims.len() {
            return Err(RobustError::Spec(format!("expected {} coordinates, got {}", self.dims.len(), w.len())));
        }
        for (j, dim) in self.dims.iter().enumerate() {
            let target = self.target(case, j)?;
            for k in dim.steps[0]..=dim.steps[1].min(case.steps() - 1) {
                match (&target, dim.channel) {
                    (Target::Device(d), Channel::CapacityScale) => cond.device_scale[*d][k] *= 1.0 - w[j],
                    (Target::Branch(l), _) => cond.branch_scale[*l][k] *= 1.0 - w[j],
                    (Target::Device(d), Channel::PvForecastAdd) => {
                        cond.pv_avail[*d][k] = (cond.pv_avail[*d][k] + w[j]).max(0.0);
                    }
                    (Target::Device(d), Channel::LoadForecastAdd) => {
                        let p = cond.load_p[*d][k];
                        let new_p = (p + w[j]).max(0.0);
                        if p > 0.0 {
                            cond.load_q[*d][k] *= new_p / p;
                        }
                        cond.load_p[*d][k] = new_p;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Physical range of a device's control axis (injection sign) under `cond`.
pub fn control_range(case: &GridCase, cond: &OperatingConditions, d: usize, k: usize) -> (f64, f64) {
    let dev = &case.devices[d];
    let s = cond.device_scale[d][k];
    match dev.kind {
        DeviceKind::Dg => (0.0, dev.smax_pu * s),
        DeviceKind::Storage => {
            let st = dev.storage.as_ref().expect("validated");
            let lim = (st.pmax_pu * s).min(dev.smax_pu * s);
            (-lim, lim)
        }
        DeviceKind::Load => (0.0, dev.curtail_max_frac * cond.load_p[d][k]),
        DeviceKind::Pv => (-cond.pv_avail[d][k].max(0.0), 0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReserve {
    pub id: String,
    pub kind: DeviceKind,
    /// Baseline setpoint on the control axis.
    pub setpoint: Vec<f64>,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
    /// Nominal physical control range.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveSchedule {
    pub devices: Vec<DeviceReserve>,
}

impl ReserveSchedule {
    /// Zero reserves around the setpoints of `sol`.
    pub fn from_solution(case: &GridCase, sol: &DispatchSolution) -> Self {
        let cond = OperatingConditions::nominal(case);
        let k_steps = case.steps();
        let devices = case
            .devices
            .iter()
            .enumerate()
            .map(|(d, dev)| {
                let (lower, upper): (Vec<f64>, Vec<f64>) = (0..k_steps).map(|k| control_range(case, &cond, d, k)).unzip();
                DeviceReserve {
                    id: dev.id.clone(),
                    kind: dev.kind,
                    setpoint: (0..k_steps).map(|k| sol.devices[d].control(k)).collect(),
                    up: vec![0.0; k_steps],
                    down: vec![0.0; k_steps],
                    lower,
                    upper,
                }
            })
            .collect();
        Self { devices }
    }

    pub fn steps(&self) -> usize {
        self.devices.first().map_or(0, |d| d.up.len())
    }

    pub fn total_up(&self, k: usize) -> f64 {
        self.devices.iter().map(|d| d.up[k]).sum()
    }

    pub fn total_down(&self, k: usize) -> f64 {
        self.devices.iter().map(|d| d.down[k]).sum()
    }

    /// Σ over devices and steps of R⁺ + R⁻.
    pub fn total(&self) -> f64 {
        self.devices.iter().map(|d| d.up.iter().sum::<f64>() + d.down.iter().sum::<f64>()).sum()
    }

    /// Largest breach of `setpoint ± R` against the nominal control range.
    pub fn headroom_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in &self.devices {
            for k in 0..d.up.len() {
                worst = worst.max(d.setpoint[k] + d.up[k] - d.upper[k]);
                worst = worst.max(d.lower[k] - (d.setpoint[k] - d.down[k]));
                worst = worst.max(-d.up[k]).max(-d.down[k]);
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,device,kind,setpoint_pu,up_pu,down_pu\n");
        for k in 0..self.steps() {
            for d in &self.devices {
                out.push_str(&format!("{k},{},{},{},{},{}\n", d.id, d.kind, d.setpoint[k], d.up[k], d.down[k]));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ReserveOptions {
    pub model: FlowModel,
    pub solve: SolveOptions,
}

impl Default for ReserveOptions {
    fn default() -> Self {
        Self { model: FlowModel::Linear, solve: SolveOptions::default() }
    }
}

/// Band-relaxation amounts when the disturbance itself moves a device's
/// physical range: (extra room above, extra room below).
fn band_relaxation(case: &GridCase, nominal: &OperatingConditions, cond: &OperatingConditions, d: usize, k: usize) -> (f64, f64) {
    let (lo0, hi0) = control_range(case, nominal, d, k);
    let (lo1, hi1) = control_range(case, cond, d, k);
    ((lo1 - lo0).max(0.0), (hi0 - hi1).max(0.0))
}

/// Baseline dispatch with reserve variables; recourse blocks and aggregate
/// requirements are added on top before solving.
pub struct ReserveModel<'a> {
    case: &'a GridCase,
    opts: ReserveOptions,
    pub prog: ConicProgram,
    pub base: Block,
    nominal: OperatingConditions,
    pub up: Vec<Vec<VarId>>,
    pub down: Vec<Vec<VarId>>,
    blocks: usize,
}

impl<'a> ReserveModel<'a> {
    pub fn new(case: &'a GridCase, opts: &ReserveOptions) -> Result<Self, RobustError> {
        let nominal = OperatingConditions::nominal(case);
        let mut prog = ConicProgram::new();
        let base = build_block(case, &mut prog, &nominal, &BlockOptions { model: opts.model, ..Default::default() })?;
        objective_baseline(case, &mut prog, &base.dev)?;
        add_loss_penalty(case, &mut prog, &base.net, DEFAULT_LOSS_WEIGHT)?;
        let mut up = Vec::with_capacity(case.devices.len());
        let mut down = Vec::with_capacity(case.devices.len());
        for (d, dev) in case.devices.iter().enumerate() {
            let mut us = Vec::with_capacity(case.steps());
            let mut ds = Vec::with_capacity(case.steps());
            for k in 0..case.steps() {
                let (lo, hi) = control_range(case, &nominal, d, k);
                let width = (hi - lo).max(0.0);
                let r_up = prog.add_var(format!("Rup[{},{k}]", dev.id), 0.0, width)?;
                let r_dn = prog.add_var(format!("Rdn[{},{k}]", dev.id), 0.0, width)?;
                prog.add_cost(r_up, dev.reserve_cost)?;
                prog.add_cost(r_dn, dev.reserve_cost)?;
                if width > 0.0 {
                    let (x, s) = base.dev.control(d, k, dev.kind);
                    // setpoint + R⁺ ≤ hi, setpoint − R⁻ ≥ lo
                    prog.add_le(&[(x, s), (r_up, 1.0)], hi)?;
                    prog.add_ge(&[(x, s), (r_dn, -1.0)], lo)?;
                }
                us.push(r_up);
                ds.push(r_dn);
            }
            up.push(us);
            down.push(ds);
        }
        Ok(Self { case, opts: opts.clone(), prog, base, nominal, up, down, blocks: 0 })
    }

    /// Adds a recourse block that must be feasible under `cond` with controls
    /// kept inside the reserve bands.
    pub fn add_recourse(&mut self, cond: &OperatingConditions) -> Result<Block, RobustError> {
        let prefix = format!("v{}/", self.blocks);
        self.blocks += 1;
        let block =
            build_block(self.case, &mut self.prog, cond, &BlockOptions { model: self.opts.model, prefix: &prefix, line_limits: true })?;
        for (d, dev) in self.case.devices.iter().enumerate() {
            for k in 0..self.case.steps() {
                let (xb, s) = self.base.dev.control(d, k, dev.kind);
                let (xv, _) = block.dev.control(d, k, dev.kind);
                let (relax_up, relax_dn) = band_relaxation(self.case, &self.nominal, cond, d, k);
                // s·xv − s·xb − R⁺ ≤ relax_up ; s·xv − s·xb + R⁻ ≥ −relax_dn
                self.prog.add_le(&[(xv, s), (xb, -s), (self.up[d][k], -1.0)], relax_up)?;
                self.prog.add_ge(&[(xv, s), (xb, -s), (self.down[d][k], 1.0)], -relax_dn)?;
            }
        }
        Ok(block)
    }

    /// Aggregate requirement ΣR⁺ ≥ up, ΣR⁻ ≥ down at step k.
    pub fn add_requirement(&mut self, k: usize, up: f64, down: f64) -> Result<(), RobustError> {
        if up > 0.0 {
            let row: Vec<(VarId, f64)> = self.up.iter().map(|u| (u[k], 1.0)).collect();
            self.prog.add_ge(&row, up)?;
        }
        if down > 0.0 {
            let row: Vec<(VarId, f64)> = self.down.iter().map(|u| (u[k], 1.0)).collect();
            self.prog.add_ge(&row, down)?;
        }
        Ok(())
    }

    pub fn solve(self) -> Result<(DispatchSolution, ReserveSchedule), RobustError> {
        let report = solve_with(&self.prog, &self.opts.solve);
        if report.status != SolveStatus::Optimal {
            return Err(RobustError::Solve(report.require_optimal().unwrap_err()));
        }
        Ok(self.extract(&report))
    }

    fn extract(&self, report: &SolveReport) -> (DispatchSolution, ReserveSchedule) {
        let x = &report.x;
        let reserve_cost: f64 = self
            .case
            .devices
            .iter()
            .enumerate()
            .map(|(d, dev)| dev.reserve_cost * (0..self.case.steps()).map(|k| x[self.up[d][k]] + x[self.down[d][k]]).sum::<f64>())
            .sum();
        let sol = extract_solution(self.case, &self.base, &self.nominal, report, reserve_cost);
        let mut schedule = ReserveSchedule::from_solution(self.case, &sol);
        for (d, dr) in schedule.devices.iter_mut().enumerate() {
            for k in 0..dr.up.len() {
                dr.up[k] = x[self.up[d][k]].max(0.0);
                dr.down[k] = x[self.down[d][k]].max(0.0);
            }
        }
        (sol, schedule)
    }
}

/// Reserve co-optimization with full recourse at every corner of the spec box.
pub fn solve_robust(case: &GridCase, spec: &DisturbanceSpec) -> Result<(DispatchSolution, ReserveSchedule), RobustError> {
    solve_robust_with(case, spec, &ReserveOptions::default())
}

pub fn solve_robust_with(
    case: &GridCase,
    spec: &DisturbanceSpec,
    opts: &ReserveOptions,
) -> Result<(DispatchSolution, ReserveSchedule), RobustError> {
    spec.validate(case)?;
    let vertices = spec.vertices()?;
    solve_with_vertices(case, spec, &vertices, opts)
}

/// Recourse-feasibility enforced at each listed disturbance point.
pub fn solve_with_vertices(
    case: &GridCase,
    spec: &DisturbanceSpec,
    vertices: &[Vec<f64>],
    opts: &ReserveOptions,
) -> Result<(DispatchSolution, ReserveSchedule), RobustError> {
    let nominal = spec.nominal();
    let active: Vec<&Vec<f64>> = vertices.iter().filter(|v| **v != nominal).collect();
    let mut model = ReserveModel::new(case, opts)?;
    let conds = active.iter().map(|v| spec.conditions(case, v)).collect::<Result<Vec<_>, _>>()?;
    for cond in &conds {
        model.add_recourse(cond)?;
    }
    match model.solve() {
        Err(RobustError::Solve(SolveError::Infeasible)) => {
            // Name the first vertex that cannot be covered on its own.
            for (i, v) in vertices.iter().enumerate() {
                let mut single = ReserveModel::new(case, opts)?;
                if *v != nominal {
                    single.add_recourse(&spec.conditions(case, v)?)?;
                }
                if let Err(RobustError::Solve(SolveError::Infeasible)) = single.solve() {
                    return Err(RobustError::InfeasibleRobust { index: i, w: v.clone() });
                }
            }
            Err(RobustError::InfeasibleRobust { index: vertices.len(), w: vec![] })
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Activation {
    /// Signed activation per device (positive raises injection).
    pub per_device: Vec<(String, f64)>,
    pub deployed: f64,
    pub shortfall: f64,
}

/// Splits `amount ≥ 0` across `caps` in proportion to capacity; the last
/// nonzero capacity absorbs the rounding remainder so the sum is exact.
pub fn proportional_split(caps: &[f64], amount: f64) -> (Vec<f64>, f64) {
    let total: f64 = caps.iter().sum();
    let amount = amount.max(0.0);
    if amount >= total {
        return (caps.to_vec(), amount - total);
    }
    let mut out = vec![0.0; caps.len()];
    let Some(last) = caps.iter().rposition(|&c| c > 0.0) else {
        return (out, amount);
    };
    let ratio = amount / total;
    let mut used = 0.0;
    for (i, &c) in caps.iter().enumerate().take(last) {
        out[i] = c * ratio;
        used += out[i];
    }
    out[last] = (amount - used).clamp(0.0, caps[last]);
    (out, 0.0)
}

/// Real-time reserve deployment for an imbalance (positive = deficit).
pub fn proportional_dispatch(schedule: &ReserveSchedule, imbalance_pu: f64, step: usize) -> Activation {
    let deficit = imbalance_pu > 0.0;
    let caps: Vec<f64> =
        schedule.devices.iter().map(|d| if deficit { d.up[step] } else { d.down[step] }.max(0.0)).collect();
    let (acts, shortfall) = proportional_split(&caps, imbalance_pu.abs());
    let sign = if deficit { 1.0 } else { -1.0 };
    Activation {
        per_device: schedule.devices.iter().zip(&acts).map(|(d, &a)| (d.id.clone(), sign * a)).collect(),
        deployed: acts.iter().sum(),
        shortfall,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Margins {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Margins {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Constraint margins c(w) at the fixed baseline setpoints: c ≤ 0 iff the
/// unchanged dispatch stays feasible under disturbance `w`.
pub fn compute_margins(case: &GridCase, sol: &DispatchSolution, spec: &DisturbanceSpec, w: &[f64]) -> Result<Margins, RobustError> {
    let cond = spec.conditions(case, w)?;
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut push = |n: String, v: f64| {
        names.push(n);
        values.push(v);
    };
    let k_steps = case.steps();
    let nb = case.buses.len();
    for k in 0..k_steps {
        let mut p_inj = vec![0.0; nb];
        let mut q_inj = vec![0.0; nb];
        let mut supply = 0.0;
        let mut demand = 0.0;
        for (d, dev) in case.devices.iter().enumerate() {
            let s = &sol.devices[d];
            let n = case.bus_index(&dev.bus).expect("validated");
            let (lo, hi) = control_range(case, &cond, d, k);
            let u = s.control(k);
            push(format!("cap_hi[{},{k}]", dev.id), u - hi);
            push(format!("cap_lo[{},{k}]", dev.id), lo - u);
            let (p, q) = match dev.kind {
                DeviceKind::Dg | DeviceKind::Storage => (u.clamp(lo, hi), s.q_pu[k]),
                DeviceKind::Pv => {
                    let g = dev.smax_pu * cond.device_scale[d][k];
                    let out = (cond.pv_avail[d][k] + u).max(0.0).min(g);
                    (out, s.q_pu[k])
                }
                DeviceKind::Load => {
                    let shed = u.clamp(lo, hi);
                    let p = cond.load_p[d][k];
                    let q = if p > 0.0 { cond.load_q[d][k] * (p - shed) / p } else { cond.load_q[d][k] };
                    (-(p - shed), -q)
                }
            };
            if p >= 0.0 {
                supply += p;
            } else {
                demand -= p;
            }
            p_inj[n] += p;
            q_inj[n] += q;
        }
        push(format!("balance_deficit[{k}]"), demand - supply);
        push(format!("balance_surplus[{k}]"), supply - demand);

        // Lossless flows from subtree sums, voltages from the root outward.
        let order = bfs_order(case);
        let mut sub_p = p_inj.clone();
        let mut sub_q = q_inj.clone();
        for &n in order.iter().rev() {
            if let Some(l) = parent_branch(case, n) {
                let f = case.bus_index(&case.branches[l].from).expect("validated");
                sub_p[f] += sub_p[n];
                sub_q[f] += sub_q[n];
            }
        }
        let mut wv = vec![1.0; nb];
        for &n in &order {
            if let Some(l) = parent_branch(case, n) {
                let br = &case.branches[l];
                let f = case.bus_index(&br.from).expect("validated");
                let (pf, qf) = (-sub_p[n], -sub_q[n]);
                let (r, x) = br.diag(0);
                wv[n] = wv[f] - 2.0 * (r * pf + x * qf);
                if let Some(smax) = br.smax_pu {
                    push(format!("line[{},{k}]", br.id), pf.hypot(qf) - smax * cond.branch_scale[l][k]);
                }
            }
        }
        for (n, bus) in case.buses.iter().enumerate() {
            push(format!("vmax[{},{k}]", bus.id), wv[n] - bus.vmax_pu.powi(2));
            push(format!("vmin[{},{k}]", bus.id), bus.vmin_pu.powi(2) - wv[n]);
        }
    }
    Ok(Margins { names, values })
}

fn bfs_order(case: &GridCase) -> Vec<usize> {
    crate::netmodel::downstream_map(case).map(|m| m.order).unwrap_or_default()
}

fn parent_branch(case: &GridCase, bus: usize) -> Option<usize> {
    let id = &case.buses[bus].id;
    case.branches.iter().position(|b| &b.to == id)
}

/// How controls may move in a recourse-feasibility check.
#[derive(Debug, Clone, Copy)]
pub enum RecoursePolicy<'a> {
    /// Controls stay within the schedule's reserve bands.
    Bands(&'a ReserveSchedule),
    /// Controls move freely within physical limits; load shedding may be
    /// frozen at its setpoint so only generation headroom counts.
    Free { schedule: &'a ReserveSchedule, allow_load_shed: bool },
}

impl RecoursePolicy<'_> {
    fn schedule(&self) -> &ReserveSchedule {
        match self {
            RecoursePolicy::Bands(s) => s,
            RecoursePolicy::Free { schedule, .. } => schedule,
        }
    }
}

/// Solves for a recourse operating point under `w`; returns the report and
/// the block handles (status Infeasible when none exists).
pub fn recourse_solve(
    case: &GridCase,
    spec: &DisturbanceSpec,
    w: &[f64],
    policy: RecoursePolicy<'_>,
    model: FlowModel,
) -> Result<(SolveReport, Block), RobustError> {
    let nominal = OperatingConditions::nominal(case);
    let cond = spec.conditions(case, w)?;
    let mut prog = ConicProgram::new();
    let block = build_block(case, &mut prog, &cond, &BlockOptions { model, ..Default::default() })?;
    let sched = policy.schedule();
    for (d, dev) in case.devices.iter().enumerate() {
        let dr = &sched.devices[d];
        for k in 0..case.steps() {
            let (xv, s) = block.dev.control(d, k, dev.kind);
            let (lo, hi) = (prog.lo[xv], prog.hi[xv]);
            let (relax_up, relax_dn) = band_relaxation(case, &nominal, &cond, d, k);
            let band = match policy {
                RecoursePolicy::Bands(_) => Some((dr.setpoint[k] - dr.down[k] - relax_dn, dr.setpoint[k] + dr.up[k] + relax_up)),
                RecoursePolicy::Free { allow_load_shed: false, .. } if dev.kind == DeviceKind::Load => {
                    Some((dr.setpoint[k] - relax_dn, dr.setpoint[k] + relax_up))
                }
                RecoursePolicy::Free { .. } => None,
            };
            if let Some((ulo, uhi)) = band {
                // Map the control-axis band back onto the variable and intersect.
                let (vlo, vhi) = if s > 0.0 { (ulo, uhi) } else { (-uhi, -ulo) };
                let (nlo, nhi) = (lo.max(vlo), hi.min(vhi));
                if nlo > nhi + 1e-9 {
                    return Ok((infeasible_report(&prog), block));
                }
                prog.set_bounds(xv, nlo.min(nhi), nhi)?;
            }
        }
    }
    let report = solve_with(&prog, &SolveOptions::default());
    Ok((report, block))
}

fn infeasible_report(prog: &ConicProgram) -> SolveReport {
    SolveReport {
        status: SolveStatus::Infeasible,
        x: vec![0.0; prog.num_vars()],
        objective: f64::NAN,
        primal_residual: 0.0,
        bound_violation: 0.0,
        cone_violation: 0.0,
        iterations: 0,
        duals: Default::default(),
    }
}

pub fn recourse_feasible(
    case: &GridCase,
    spec: &DisturbanceSpec,
    w: &[f64],
    policy: RecoursePolicy<'_>,
) -> Result<bool, RobustError> {
    let (rep, _) = recourse_solve(case, spec, w, policy, FlowModel::Linear)?;
    match rep.status {
        SolveStatus::Optimal => Ok(true),
        SolveStatus::Infeasible => Ok(false),
        _ => Err(RobustError::Solve(rep.require_optimal().unwrap_err())),
    }
}

/// Independent re-verification: each vertex gets a fresh feasibility solve
/// with controls clamped to the reserve bands. Returns per-vertex verdicts.
pub fn verify_vertices(
    case: &GridCase,
    spec: &DisturbanceSpec,
    schedule: &ReserveSchedule,
    vertices: &[Vec<f64>],
) -> Result<Vec<bool>, RobustError> {
    vertices.par_iter().map(|w| recourse_feasible(case, spec, w, RecoursePolicy::Bands(schedule))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionRadius {
    pub dir: Vec<f64>,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusReport {
    pub radius: f64,
    pub per_direction: Vec<DirectionRadius>,
    /// Certified points w_nom + r_i·d_i.
    pub vertices: Vec<Vec<f64>>,
    pub vertices_checked: usize,
    pub margins_max: f64,
}

/// ±e_i for every spec dimension.
pub fn default_directions(m: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(2 * m);
    for i in 0..m {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; m];
            e[i] = sign;
            dirs.push(e);
        }
    }
    dirs
}

/// Largest step along `dir` from `w0` that stays inside the spec box.
fn box_limit(spec: &DisturbanceSpec, w0: &[f64], dir: &[f64]) -> f64 {
    let mut r = f64::INFINITY;
    for (j, dim) in spec.dims.iter().enumerate() {
        if dir[j] > 0.0 {
            r = r.min((dim.hi - w0[j]) / dir[j]);
        } else if dir[j] < 0.0 {
            r = r.min((dim.lo - w0[j]) / dir[j]);
        }
    }
    r.max(0.0)
}

/// Bisection for the largest feasible step in `[0, r_max]`. Returns the
/// certified (feasible) end.
fn bisect<F: Fn(f64) -> Result<bool, RobustError>>(r_max: f64, feasible: F, direction: usize) -> Result<f64, RobustError> {
    if r_max <= 0.0 || !feasible(0.0)? {
        return Ok(0.0);
    }
    if feasible(r_max)? {
        return Ok(r_max);
    }
    let (mut lo, mut hi) = (0.0, r_max);
    for _ in 0..BISECTION_MAX_ITER {
        if hi - lo <= BISECTION_TOL {
            return Ok(lo);
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= BISECTION_TOL {
        Ok(lo)
    } else {
        Err(RobustError::BisectionNotConverged { direction })
    }
}

pub fn feasibility_radius(
    case: &GridCase,
    solution: &DispatchSolution,
    spec: &DisturbanceSpec,
    w_nom: &[f64],
    directions: Option<&[Vec<f64>]>,
    policy: RecoursePolicy<'_>,
) -> Result<RadiusReport, RobustError> {
    spec.validate(case)?;
    let owned;
    let dirs = match directions {
        Some(d) => d,
        None => {
            owned = default_directions(spec.len());
            &owned
        }
    };
    let radii: Vec<f64> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let r_max = box_limit(spec, w_nom, dir);
            let point = |r: f64| -> Vec<f64> { w_nom.iter().zip(dir).map(|(a, b)| a + r * b).collect() };
            bisect(r_max, |r| recourse_feasible(case, spec, &point(r), policy), i)
        })
        .collect::<Result<_, _>>()?;
    let vertices: Vec<Vec<f64>> =
        dirs.iter().zip(&radii).map(|(dir, r)| w_nom.iter().zip(dir).map(|(a, b)| a + r * b).collect()).collect();
    let mut margins_max = f64::NEG_INFINITY;
    for v in &vertices {
        margins_max = margins_max.max(compute_margins(case, solution, spec, v)?.max());
    }
    Ok(RadiusReport {
        radius: radii.iter().copied().fold(f64::INFINITY, f64::min),
        per_direction: dirs.iter().zip(&radii).map(|(d, &r)| DirectionRadius { dir: d.clone(), r }).collect(),
        vertices_checked: vertices.len(),
        vertices,
        margins_max,
    })
}

/// Constraints pinned at a solution: active bounds and cones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActiveSet {
    pub lower: Vec<VarId>,
    pub upper: Vec<VarId>,
    pub cones: Vec<usize>,
}

impl ActiveSet {
    /// Reads the active set from primal values and multipliers. A constraint
    /// that is tight with a vanishing multiplier (or slack with a positive
    /// one) violates strict complementarity and is rejected.
    pub fn detect(prog: &ConicProgram, report: &SolveReport) -> Result<Self, RobustError> {
        const GAP: f64 = 1e-6;
        const MULT: f64 = 1e-6;
        let x = &report.x;
        let mut set = ActiveSet::default();
        let classify = |gap: f64, mult: f64, what: String| -> Result<bool, RobustError> {
            match (gap <= GAP, mult > MULT) {
                (true, true) => Ok(true),
                (false, false) => Ok(false),
                (true, false) => Err(RobustError::DegenerateActiveSet(format!("{what} is tight with zero multiplier"))),
                (false, true) => Err(RobustError::DegenerateActiveSet(format!("{what} has a multiplier but is slack"))),
            }
        };
        for i in 0..prog.num_vars() {
            if prog.lo[i] == prog.hi[i] {
                continue;
            }
            let scale = 1.0_f64.max(x[i].abs());
            if prog.lo[i].is_finite()
                && classify((x[i] - prog.lo[i]) / scale, report.duals.lower[i], format!("lower bound of {}", prog.name(i)))?
            {
                set.lower.push(i);
            }
            if prog.hi[i].is_finite()
                && classify((prog.hi[i] - x[i]) / scale, report.duals.upper[i], format!("upper bound of {}", prog.name(i)))?
            {
                set.upper.push(i);
            }
        }
        for (c, cone) in prog.cones.iter().enumerate() {
            let t = x[cone[0]];
            let norm = cone[1..].iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
            let mult = report.duals.cones.get(c).map_or(0.0, |z| z[0]);
            if classify((t - norm) / 1.0_f64.max(t.abs()), mult, format!("cone {c}"))? {
                if t <= GAP {
                    return Err(RobustError::DegenerateActiveSet(format!("cone {c} is active at its apex")));
                }
                set.cones.push(c);
            }
        }
        Ok(set)
    }
}

/// Gain K with δx ≈ K·δw from the linearized active constraints of a
/// parametric program family `family(w)` solved at `w0`. The active system
/// must determine x uniquely (a nondegenerate vertex); otherwise
/// `DegenerateActiveSet` is returned.
pub fn sensitivity_gain<F>(family: F, w0: &[f64], report: &SolveReport, active: &ActiveSet) -> Result<DMatrix<f64>, RobustError>
where
    F: Fn(&[f64]) -> Result<ConicProgram, RobustError>,
{
    let prog = family(w0)?;
    let n = prog.num_vars();
    let m = w0.len();
    let x = &report.x;
    const H: f64 = 1e-4;
    let shifted: Vec<(ConicProgram, ConicProgram)> = (0..m)
        .map(|j| {
            let mut wp = w0.to_vec();
            let mut wm = w0.to_vec();
            wp[j] += H;
            wm[j] -= H;
            Ok((family(&wp)?, family(&wm)?))
        })
        .collect::<Result<_, RobustError>>()?;
    for (p, q) in &shifted {
        if p.num_vars() != n || q.num_vars() != n || p.eqs.len() != prog.eqs.len() {
            return Err(RobustError::DegenerateActiveSet("program structure changes with w".into()));
        }
    }
    let deriv = |f: &dyn Fn(&ConicProgram) -> f64, j: usize| (f(&shifted[j].0) - f(&shifted[j].1)) / (2.0 * H);

    let mut rows: Vec<(Vec<(usize, f64)>, Vec<f64>)> = Vec::new();
    for (r, row) in prog.eqs.iter().enumerate() {
        let rhs = (0..m).map(|j| deriv(&|p: &ConicProgram| p.eqs[r].rhs, j)).collect();
        rows.push((row.coeffs.clone(), rhs));
    }
    for i in 0..n {
        if prog.lo[i] == prog.hi[i] {
            rows.push((vec![(i, 1.0)], (0..m).map(|j| deriv(&|p: &ConicProgram| p.lo[i], j)).collect()));
        }
    }
    for &i in &active.lower {
        rows.push((vec![(i, 1.0)], (0..m).map(|j| deriv(&|p: &ConicProgram| p.lo[i], j)).collect()));
    }
    for &i in &active.upper {
        rows.push((vec![(i, 1.0)], (0..m).map(|j| deriv(&|p: &ConicProgram| p.hi[i], j)).collect()));
    }
    for &c in &active.cones {
        let cone = &prog.cones[c];
        let mut coeffs = vec![(cone[0], x[cone[0]])];
        coeffs.extend(cone[1..].iter().map(|&i| (i, -x[i])));
        rows.push((coeffs, vec![0.0; m]));
    }
    if rows.len() != n {
        return Err(RobustError::DegenerateActiveSet(format!("{} active rows for {} variables", rows.len(), n)));
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DMatrix::<f64>::zeros(n, m);
    for (r, (coeffs, rhs)) in rows.iter().enumerate() {
        for &(i, v) in coeffs {
            a[(r, i)] += v;
        }
        for j in 0..m {
            b[(r, j)] = rhs[j];
        }
    }
    let lu = a.full_piv_lu();
    if !lu.is_invertible() {
        return Err(RobustError::DegenerateActiveSet("linearized active system is singular".into()));
    }
    let k = lu.solve(&b).ok_or_else(|| RobustError::DegenerateActiveSet("singular active system".into()))?;
    Ok(k)
}

/// Baseline dispatch program with the disturbance `w` applied.
pub fn disturbed_baseline_program(case: &GridCase, spec: &DisturbanceSpec, w: &[f64]) -> Result<(ConicProgram, Block), RobustError> {
    let cond = spec.conditions(case, w)?;
    Ok(crate::dispatch::baseline_program(case, &cond, FlowModel::Linear, true)?)
}

/// Sensitivity of the baseline dispatch to the spec coordinates at `w0`.
pub fn dispatch_sensitivity(case: &GridCase, spec: &DisturbanceSpec, w0: &[f64]) -> Result<(DMatrix<f64>, SolveReport, ConicProgram), RobustError> {
    let family = |w: &[f64]| disturbed_baseline_program(case, spec, w).map(|(p, _)| p);
    let prog = family(w0)?;
    let report = solve_with(&prog, &SolveOptions { tol_feas: 1e-9, tol_gap: 1e-9, ..Default::default() });
    if report.status != SolveStatus::Optimal {
        return Err(RobustError::Solve(report.require_optimal().unwrap_err()));
    }
    let active = ActiveSet::detect(&prog, &report)?;
    let k = sensitivity_gain(family, w0, &report, &active)?;
    Ok((k, report, prog))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainTuning {
    pub direction: usize,
    pub alpha: f64,
    /// Control adjustments δu at w = w_nom + α·e (one per device and step).
    pub control_names: Vec<String>,
    pub delta_u: Vec<f64>,
    /// Margins c(w) at the baseline setpoints.
    pub margins: Vec<f64>,
}

impl GainTuning {
    /// Minimum-norm gain row for control `j`: k_j = δu_j·c/‖c‖², so k_jᵀc = δu_j.
    pub fn gain_row(&self, j: usize) -> Vec<f64> {
        let nrm2: f64 = self.margins.iter().map(|c| c * c).sum();
        if nrm2 == 0.0 {
            return vec![0.0; self.margins.len()];
        }
        self.margins.iter().map(|c| self.delta_u[j] * c / nrm2).collect()
    }
}

/// Largest α ∈ [0, box hi] such that a gain k exists with δu = kᵀc(w),
/// δu inside the reserve bands and g(u* + δu, w) ≤ 0 at w = w_nom + α·e_dir.
pub fn tune_reserve_gain(
    case: &GridCase,
    solution: &DispatchSolution,
    schedule: &ReserveSchedule,
    spec: &DisturbanceSpec,
    direction: usize,
) -> Result<GainTuning, RobustError> {
    spec.validate(case)?;
    if direction >= spec.len() {
        return Err(RobustError::Spec(format!("direction {direction} out of range")));
    }
    let w_nom = spec.nominal();
    let mut e = vec![0.0; spec.len()];
    e[direction] = 1.0;
    let point = |a: f64| -> Vec<f64> { w_nom.iter().zip(&e).map(|(w, d)| w + a * d).collect() };
    let policy = RecoursePolicy::Bands(schedule);
    let r_max = box_limit(spec, &w_nom, &e);
    let alpha = bisect(r_max, |a| recourse_feasible(case, spec, &point(a), policy), direction)?;
    if alpha < BISECTION_TOL {
        return Err(RobustError::NoFeasibleGain { direction });
    }
    let w = point(alpha);
    let (rep, block) = recourse_solve(case, spec, &w, policy, FlowModel::Linear)?;
    if rep.status != SolveStatus::Optimal {
        return Err(RobustError::NoFeasibleGain { direction });
    }
    let mut names = Vec::new();
    let mut du = Vec::new();
    for (d, dev) in case.devices.iter().enumerate() {
        for k in 0..case.steps() {
            let (xv, s) = block.dev.control(d, k, dev.kind);
            names.push(format!("{}[{k}]", dev.id));
            du.push(s * rep.x[xv] - schedule.devices[d].setpoint[k]);
        }
    }
    let margins = compute_margins(case, solution, spec, &w)?;
    Ok(GainTuning { direction, alpha, control_names: names, delta_u: du, margins: margins.values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn proportional_examples() {
        let (a, short) = proportional_split(&[2.0, 3.0], 1.0);
        assert_abs_diff_eq!(a[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 0.6, epsilon = 1e-15);
        assert_eq!(a[0] + a[1], 1.0);
        assert_eq!(short, 0.0);
        let (a, short) = proportional_split(&[2.0, 3.0], 10.0);
        assert_eq!(a, vec![2.0, 3.0]);
        assert_eq!(short, 5.0);
        let (a, _) = proportional_split(&[2.0, 3.0], 0.0);
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn vertex_order_is_binary() {
        let spec = DisturbanceSpec::new(vec![
            Dimension { target: "a".into(), channel: Channel::LoadForecastAdd, lo: -1.0, hi: 1.0, steps: [0, 0] },
            Dimension { target: "b".into(), channel: Channel::LoadForecastAdd, lo: -2.0, hi: 2.0, steps: [0, 0] },
        ]);
        let v = spec.vertices().unwrap();
        assert_eq!(v, vec![vec![1.0, 2.0], vec![1.0, -2.0], vec![-1.0, 2.0], vec![-1.0, -2.0]]);
    }

    #[test]
    fn vertex_budget_guard() {
        let dims = (0..13)
            .map(|i| Dimension { target: format!("d{i}"), channel: Channel::LoadForecastAdd, lo: 0.0, hi: 0.0, steps: [0, 0] })
            .collect();
        assert_eq!(DisturbanceSpec::new(dims).vertices(), Err(RobustError::VertexBudgetExceeded { m: 13 }));
    }

    #[test]
    fn pinned_variable_has_unit_gain() {
        let family = |w: &[f64]| -> Result<ConicProgram, RobustError> {
            let mut p = ConicProgram::new();
            let x = p.add_free("x")?;
            p.add_eq(&[(x, 1.0)], w[0])?;
            p.add_cost(x, 1.0)?;
            Ok(p)
        };
        let prog = family(&[0.3]).unwrap();
        let rep = crate::conic::solve_default(&prog);
        let act = ActiveSet::detect(&prog, &rep).unwrap();
        let k = sensitivity_gain(family, &[0.3], &rep, &act).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn marginal_generator_follows_load() {
        // P_dg − P_shed = load + w; shedding priced above generation, so it sits at its bound.
        let family = |w: &[f64]| -> Result<ConicProgram, RobustError> {
            let mut p = ConicProgram::new();
            let g = p.add_var("Pdg", 0.0, 2.0)?;
            let s = p.add_var("Pshed", 0.0, 1.0)?;
            p.add_eq(&[(g, 1.0), (s, 1.0)], 0.5 + w[0])?;
            p.add_cost(g, 1.0)?;
            p.add_cost(s, 100.0)?;
            Ok(p)
        };
        let prog = family(&[0.0]).unwrap();
        let rep = crate::conic::solve_default(&prog);
        let act = ActiveSet::detect(&prog, &rep).unwrap();
        let k = sensitivity_gain(family, &[0.0], &rep, &act).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(k[(1, 0)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn tie_is_degenerate() {
        // Two generators with equal cost: the split is not unique.
        let mut p = ConicProgram::new();
        let a = p.add_var("a", 0.0, 1.0).unwrap();
        let b = p.add_var("b", 0.0, 1.0).unwrap();
        p.add_eq(&[(a, 1.0), (b, 1.0)], 1.0).unwrap();
        p.add_cost(a, 1.0).unwrap();
        p.add_cost(b, 1.0).unwrap();
        let rep = crate::conic::solve_default(&p);
        let err = ActiveSet::detect(&p, &rep)
            .and_then(|act| sensitivity_gain(|_: &[f64]| Ok(p.clone()), &[0.0], &rep, &act));
        assert!(matches!(err, Err(RobustError::DegenerateActiveSet(_))), "{err:?}");
    }
}
