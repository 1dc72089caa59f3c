//! Baseline multi-period dispatch: device models and costs on top of a
//! network builder, plus solution extraction and export.

use serde::Serialize;
use thiserror::Error;

use crate::conic::{solve_with, ConicError, ConicProgram, SolveError, SolveOptions, SolveReport, SolveStatus, VarId};
use crate::netmodel::{DeviceKind, GridCase, OperatingConditions};
use crate::powerflow::{add_loss_penalty, build_network, total_losses, FlowModel, NetworkOptions, NetworkVars};

/// Price per pu of resistive losses in the lossy model.
pub const DEFAULT_LOSS_WEIGHT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("device {device}: negative cost coefficient")]
    NegativeCost { device: String },
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("infeasible case ({kind}): {detail}")]
    InfeasibleCase { kind: InfeasibleKind, detail: String },
    #[error("solver failure: {0}")]
    Solve(SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InfeasibleKind {
    Energy,
    Line,
    Voltage,
}

impl std::fmt::Display for InfeasibleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InfeasibleKind::Energy => "energy",
            InfeasibleKind::Line => "line",
            InfeasibleKind::Voltage => "voltage",
        };
        f.write_str(s)
    }
}

/// Handles of one device at one step. Unused slots are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeviceStepVars {
    /// Injected active power: dg output, storage P_b, pv output after curtailment.
    pub p: Option<VarId>,
    pub q: Option<VarId>,
    pub p_sc: Option<VarId>,
    pub p_lc: Option<VarId>,
    pub q_lc: Option<VarId>,
}

#[derive(Debug, Clone)]
pub struct DeviceVars {
    /// `[device][step]`
    pub steps: Vec<Vec<DeviceStepVars>>,
    /// Storage state of charge, K+1 entries starting at E0.
    pub soc: Vec<Option<Vec<VarId>>>,
    /// Storage (discharge, charge) split used by the cycling cost.
    pub cycling: Vec<Option<Vec<(VarId, VarId)>>>,
}

impl DeviceVars {
    /// Control variable of a device in injection sign: +1 raises the device's
    /// net injection. dg: P, storage: P_b, load: P_lc, pv: P_sc (sign −1).
    pub fn control(&self, device: usize, step: usize, kind: DeviceKind) -> (VarId, f64) {
        let v = &self.steps[device][step];
        match kind {
            DeviceKind::Dg | DeviceKind::Storage => (v.p.expect("p var"), 1.0),
            DeviceKind::Load => (v.p_lc.expect("p_lc var"), 1.0),
            DeviceKind::Pv => (v.p_sc.expect("p_sc var"), -1.0),
        }
    }
}

/// Network plus device variables for one operating instance.
#[derive(Debug, Clone)]
pub struct Block {
    pub net: NetworkVars,
    pub dev: DeviceVars,
}

#[derive(Debug, Clone)]
pub struct BlockOptions<'a> {
    pub model: FlowModel,
    pub prefix: &'a str,
    pub line_limits: bool,
}

impl Default for BlockOptions<'_> {
    fn default() -> Self {
        Self { model: FlowModel::Linear, prefix: "", line_limits: true }
    }
}

pub fn build_block(
    case: &GridCase,
    prog: &mut ConicProgram,
    cond: &OperatingConditions,
    opts: &BlockOptions<'_>,
) -> Result<Block, ConicError> {
    let net = build_network(
        case,
        prog,
        &NetworkOptions {
            model: opts.model,
            prefix: opts.prefix,
            branch_scale: Some(&cond.branch_scale),
            line_limits: opts.line_limits,
        },
    )?;
    let dev = build_devices(case, prog, &net, cond, opts.prefix)?;
    Ok(Block { net, dev })
}

/// Device models under nominal conditions, tied to `netvars`.
pub fn build_baseline(case: &GridCase, prog: &mut ConicProgram, netvars: &NetworkVars) -> Result<DeviceVars, ConicError> {
    build_devices(case, prog, netvars, &OperatingConditions::nominal(case), "")
}

pub fn build_devices(
    case: &GridCase,
    prog: &mut ConicProgram,
    net: &NetworkVars,
    cond: &OperatingConditions,
    pre: &str,
) -> Result<DeviceVars, ConicError> {
    let k_steps = case.steps();
    let dt = case.horizon.dt_hours;
    let mut steps = Vec::with_capacity(case.devices.len());
    let mut soc = Vec::with_capacity(case.devices.len());
    let mut cycling = Vec::with_capacity(case.devices.len());
    const INF: f64 = f64::INFINITY;

    for (d, dev) in case.devices.iter().enumerate() {
        let id = &dev.id;
        let mut series = Vec::with_capacity(k_steps);
        let mut soc_vars = None;
        let mut cyc = None;
        match dev.kind {
            DeviceKind::Dg => {
                for k in 0..k_steps {
                    let cap = dev.smax_pu * cond.device_scale[d][k];
                    let p = prog.add_var(format!("{pre}Pg[{id},{k}]"), 0.0, cap)?;
                    let q = prog.add_var(format!("{pre}Qg[{id},{k}]"), -cap, cap)?;
                    if cap > 0.0 {
                        let t = prog.add_var(format!("{pre}Sg[{id},{k}]"), cap, cap)?;
                        prog.add_soc(&[t, p, q])?;
                    }
                    series.push(DeviceStepVars { p: Some(p), q: Some(q), ..Default::default() });
                }
                if let Some(ramp) = dev.ramp_pu {
                    for k in 1..k_steps {
                        let (a, b) = (series[k].p.unwrap(), series[k - 1].p.unwrap());
                        prog.add_le(&[(a, 1.0), (b, -1.0)], ramp)?;
                        prog.add_ge(&[(a, 1.0), (b, -1.0)], -ramp)?;
                    }
                }
            }
            DeviceKind::Storage => {
                let st = dev.storage.as_ref().expect("validated storage");
                let e0 = prog.add_var(format!("{pre}E[{id},0]"), st.e0_pu_h, st.e0_pu_h)?;
                let mut es = vec![e0];
                let mut split = Vec::new();
                for k in 0..k_steps {
                    let s = cond.device_scale[d][k];
                    let pmax = st.pmax_pu * s;
                    let h = dev.smax_pu * s;
                    let p = prog.add_var(format!("{pre}Pb[{id},{k}]"), -pmax.min(h), pmax.min(h))?;
                    let q = prog.add_var(format!("{pre}Qb[{id},{k}]"), -h, h)?;
                    if h > 0.0 {
                        let t = prog.add_var(format!("{pre}Sb[{id},{k}]"), h, h)?;
                        prog.add_soc(&[t, p, q])?;
                    }
                    let e = prog.add_var(format!("{pre}E[{id},{}]", k + 1), st.emin_pu_h, st.emax_pu_h)?;
                    // E_{k+1} = E_k − η·P_b·Δt
                    prog.add_eq(&[(e, 1.0), (es[k], -1.0), (p, st.eta * dt)], 0.0)?;
                    es.push(e);
                    if dev.cost_at(0) > 0.0 {
                        let pos = prog.add_var(format!("{pre}Pb+[{id},{k}]"), 0.0, INF)?;
                        let neg = prog.add_var(format!("{pre}Pb-[{id},{k}]"), 0.0, INF)?;
                        prog.add_eq(&[(p, 1.0), (pos, -1.0), (neg, 1.0)], 0.0)?;
                        split.push((pos, neg));
                    }
                    series.push(DeviceStepVars { p: Some(p), q: Some(q), ..Default::default() });
                }
                soc_vars = Some(es);
                if !split.is_empty() {
                    cyc = Some(split);
                }
            }
            DeviceKind::Pv => {
                for k in 0..k_steps {
                    let avail = cond.pv_avail[d][k].max(0.0);
                    let g = dev.smax_pu * cond.device_scale[d][k];
                    let q_val = cond.pv_q[d][k];
                    let y_hi = if g > 0.0 { avail } else { 0.0 };
                    let y = prog.add_var(format!("{pre}Ppv[{id},{k}]"), 0.0, y_hi)?;
                    let sc = prog.add_var(format!("{pre}Psc[{id},{k}]"), 0.0, avail)?;
                    let q = prog.add_var(format!("{pre}Qpv[{id},{k}]"), q_val, q_val)?;
                    prog.add_eq(&[(y, 1.0), (sc, 1.0)], avail)?;
                    if g > 0.0 {
                        // (avail − P_sc)² + q² ≤ G²
                        let t = prog.add_var(format!("{pre}Spv[{id},{k}]"), g, g)?;
                        prog.add_soc(&[t, y, q])?;
                    }
                    series.push(DeviceStepVars { p: Some(y), q: Some(q), p_sc: Some(sc), ..Default::default() });
                }
            }
            DeviceKind::Load => {
                for k in 0..k_steps {
                    let p = cond.load_p[d][k];
                    let q = cond.load_q[d][k];
                    let lc = prog.add_var(format!("{pre}Plc[{id},{k}]"), 0.0, dev.curtail_max_frac * p)?;
                    let qlc = if p > 0.0 {
                        let v = prog.add_free(format!("{pre}Qlc[{id},{k}]"))?;
                        prog.add_eq(&[(v, 1.0), (lc, -q / p)], 0.0)?;
                        v
                    } else {
                        prog.add_var(format!("{pre}Qlc[{id},{k}]"), 0.0, 0.0)?
                    };
                    series.push(DeviceStepVars { p_lc: Some(lc), q_lc: Some(qlc), ..Default::default() });
                }
            }
        }
        steps.push(series);
        soc.push(soc_vars);
        cycling.push(cyc);
    }

    // Tie bus net injections to the devices at that bus.
    for (n, bus) in case.buses.iter().enumerate() {
        for k in 0..k_steps {
            let mut prow: Vec<(VarId, f64)> = net.p_net[n].iter().map(|s| (s[k], 1.0)).collect();
            let mut qrow: Vec<(VarId, f64)> = net.q_net[n].iter().map(|s| (s[k], 1.0)).collect();
            let (mut prhs, mut qrhs) = (0.0, 0.0);
            for (d, dev) in case.devices_at(&bus.id) {
                let v = &steps[d][k];
                match dev.kind {
                    DeviceKind::Load => {
                        prow.push((v.p_lc.unwrap(), -1.0));
                        qrow.push((v.q_lc.unwrap(), -1.0));
                        prhs -= cond.load_p[d][k];
                        qrhs -= cond.load_q[d][k];
                    }
                    _ => {
                        prow.push((v.p.unwrap(), -1.0));
                        qrow.push((v.q.unwrap(), -1.0));
                    }
                }
            }
            prog.add_eq(&prow, prhs)?;
            prog.add_eq(&qrow, qrhs)?;
        }
    }

    Ok(DeviceVars { steps, soc, cycling })
}

/// Adds the linear operating cost of every device to the objective.
pub fn objective_baseline(case: &GridCase, prog: &mut ConicProgram, dv: &DeviceVars) -> Result<(), DispatchError> {
    for (d, dev) in case.devices.iter().enumerate() {
        if dev.cost.iter().any(|&c| c < 0.0) || dev.reserve_cost < 0.0 {
            return Err(DispatchError::NegativeCost { device: dev.id.clone() });
        }
        for v in &dv.steps[d] {
            match dev.kind {
                DeviceKind::Dg => prog.add_cost(v.p.unwrap(), dev.cost_at(0))?,
                DeviceKind::Pv => prog.add_cost(v.p_sc.unwrap(), dev.cost_at(0))?,
                DeviceKind::Load => {
                    prog.add_cost(v.p_lc.unwrap(), dev.cost_at(0))?;
                    prog.add_cost(v.q_lc.unwrap(), dev.cost_at(1))?;
                }
                DeviceKind::Storage => {}
            }
        }
        if let Some(split) = &dv.cycling[d] {
            for &(pos, neg) in split {
                prog.add_cost(pos, dev.cost_at(0))?;
                prog.add_cost(neg, dev.cost_at(0))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub dg: f64,
    pub pv_curtailment: f64,
    pub load_curtailment_p: f64,
    pub load_curtailment_q: f64,
    pub storage_cycling: f64,
    pub losses: f64,
    pub reserves: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceSchedule {
    pub id: String,
    pub kind: DeviceKind,
    /// Net active injection (negative for loads and charging storage).
    pub p_pu: Vec<f64>,
    pub q_pu: Vec<f64>,
    /// End-of-step state of charge (storage only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soc_pu_h: Option<Vec<f64>>,
    /// P_sc for pv, P_lc for loads, zero otherwise.
    pub curtail_p_pu: Vec<f64>,
}

impl DeviceSchedule {
    /// Setpoint on the control axis used by reserves (see `DeviceVars::control`).
    pub fn control(&self, step: usize) -> f64 {
        match self.kind {
            DeviceKind::Dg | DeviceKind::Storage => self.p_pu[step],
            DeviceKind::Load => self.curtail_p_pu[step],
            DeviceKind::Pv => -self.curtail_p_pu[step],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub status: SolveStatus,
    pub objective: f64,
    pub primal_residual: f64,
    pub bound_violation: f64,
    pub cone_violation: f64,
    pub iterations: u32,
}

impl From<&SolveReport> for ReportSummary {
    fn from(r: &SolveReport) -> Self {
        Self {
            status: r.status,
            objective: r.objective,
            primal_residual: r.primal_residual,
            bound_violation: r.bound_violation,
            cone_violation: r.cone_violation,
            iterations: r.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchSolution {
    pub case: String,
    #[serde(serialize_with = "ser_model")]
    pub model: FlowModel,
    pub report: ReportSummary,
    pub objective: f64,
    pub costs: CostBreakdown,
    pub devices: Vec<DeviceSchedule>,
    /// Squared voltage `[bus][phase slot][step]`.
    pub w: Vec<Vec<Vec<f64>>>,
    pub p_flow: Vec<Vec<Vec<f64>>>,
    pub q_flow: Vec<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_sq: Option<Vec<Vec<Vec<f64>>>>,
    pub p_net: Vec<Vec<Vec<f64>>>,
    pub q_net: Vec<Vec<Vec<f64>>>,
}

fn ser_model<S: serde::Serializer>(m: &FlowModel, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match m {
        FlowModel::Linear => "linear",
        FlowModel::Socp => "socp",
    })
}

impl DispatchSolution {
    pub fn device(&self, id: &str) -> Option<&DeviceSchedule> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,step,device,kind,p_pu,q_pu,soc_pu_h,curtail_p_pu\n");
        let steps = self.devices.first().map_or(0, |d| d.p_pu.len());
        for k in 0..steps {
            for d in &self.devices {
                let soc = d.soc_pu_h.as_ref().map(|s| format!("{}", s[k])).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.case, k, d.id, d.kind, d.p_pu[k], d.q_pu[k], soc, d.curtail_p_pu[k]
                ));
            }
        }
        out
    }
}

/// Reads device schedules, network state and cost terms out of a solved block.
pub fn extract_solution(
    case: &GridCase,
    block: &Block,
    cond: &OperatingConditions,
    report: &SolveReport,
    reserve_cost: f64,
) -> DispatchSolution {
    let x = &report.x;
    let val = |v: Option<VarId>| v.map_or(0.0, |i| x[i]);
    let mut costs = CostBreakdown::default();
    let mut devices = Vec::with_capacity(case.devices.len());
    for (d, dev) in case.devices.iter().enumerate() {
        let vs = &block.dev.steps[d];
        let mut p = Vec::with_capacity(vs.len());
        let mut q = Vec::with_capacity(vs.len());
        let mut curtail = Vec::with_capacity(vs.len());
        for (k, v) in vs.iter().enumerate() {
            match dev.kind {
                DeviceKind::Load => {
                    let lc = val(v.p_lc);
                    let qlc = val(v.q_lc);
                    p.push(-(cond.load_p[d][k] - lc));
                    q.push(-(cond.load_q[d][k] - qlc));
                    curtail.push(lc);
                    costs.load_curtailment_p += dev.cost_at(0) * lc;
                    costs.load_curtailment_q += dev.cost_at(1) * qlc;
                }
                DeviceKind::Pv => {
                    p.push(val(v.p));
                    q.push(val(v.q));
                    curtail.push(val(v.p_sc));
                    costs.pv_curtailment += dev.cost_at(0) * val(v.p_sc);
                }
                DeviceKind::Dg => {
                    p.push(val(v.p));
                    q.push(val(v.q));
                    curtail.push(0.0);
                    costs.dg += dev.cost_at(0) * val(v.p);
                }
                DeviceKind::Storage => {
                    p.push(val(v.p));
                    q.push(val(v.q));
                    curtail.push(0.0);
                }
            }
        }
        if let Some(split) = &block.dev.cycling[d] {
            costs.storage_cycling += split.iter().map(|&(a, b)| dev.cost_at(0) * (x[a] + x[b])).sum::<f64>();
        }
        let soc = block.dev.soc[d].as_ref().map(|es| es[1..].iter().map(|&e| x[e]).collect());
        devices.push(DeviceSchedule {
            id: dev.id.clone(),
            kind: dev.kind,
            p_pu: p,
            q_pu: q,
            soc_pu_h: soc,
            curtail_p_pu: curtail,
        });
    }
    costs.reserves = reserve_cost;
    costs.losses = DEFAULT_LOSS_WEIGHT * total_losses(case, &block.net, x);
    costs.total = costs.losses
        + costs.dg
        + costs.pv_curtailment
        + costs.load_curtailment_p
        + costs.load_curtailment_q
        + costs.storage_cycling
        + costs.reserves;
    let net = &block.net;
    DispatchSolution {
        case: case.name.clone(),
        model: net.model,
        report: report.into(),
        objective: report.objective,
        costs,
        devices,
        w: NetworkVars::value(x, &net.w),
        p_flow: NetworkVars::value(x, &net.p_flow),
        q_flow: NetworkVars::value(x, &net.q_flow),
        i_sq: net.i_sq.as_ref().map(|i| NetworkVars::value(x, i)),
        p_net: NetworkVars::value(x, &net.p_net),
        q_net: NetworkVars::value(x, &net.q_net),
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOptions {
    pub model: FlowModel,
    /// Operating conditions; nominal forecasts when `None`.
    pub conditions: Option<OperatingConditions>,
    pub solve: SolveOptions,
    pub dump_lp: bool,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self { model: FlowModel::Linear, conditions: None, solve: SolveOptions::default(), dump_lp: false }
    }
}

/// Solution plus the optional standard-form listing of the program.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub solution: DispatchSolution,
    pub program: Option<String>,
}

pub fn solve_baseline(case: &GridCase) -> Result<DispatchSolution, DispatchError> {
    solve_baseline_with(case, &BaselineOptions::default()).map(|r| r.solution)
}

pub fn solve_baseline_with(case: &GridCase, opts: &BaselineOptions) -> Result<BaselineRun, DispatchError> {
    let cond = opts.conditions.clone().unwrap_or_else(|| OperatingConditions::nominal(case));
    let (prog, block) = baseline_program(case, &cond, opts.model, true)?;
    let report = solve_with(&prog, &opts.solve);
    match report.status {
        SolveStatus::Optimal => Ok(BaselineRun {
            solution: extract_solution(case, &block, &cond, &report, 0.0),
            program: opts.dump_lp.then(|| prog.dump_lp()),
        }),
        SolveStatus::Infeasible => Err(diagnose_infeasible(case, &cond, opts.model)),
        _ => Err(DispatchError::Solve(report.require_optimal().unwrap_err())),
    }
}

pub fn baseline_program(
    case: &GridCase,
    cond: &OperatingConditions,
    model: FlowModel,
    line_limits: bool,
) -> Result<(ConicProgram, Block), DispatchError> {
    let mut prog = ConicProgram::new();
    let block = build_block(case, &mut prog, cond, &BlockOptions { model, prefix: "", line_limits })?;
    objective_baseline(case, &mut prog, &block.dev)?;
    add_loss_penalty(case, &mut prog, &block.net, DEFAULT_LOSS_WEIGHT)?;
    Ok((prog, block))
}

/// Largest deliverable active power and the smallest unsheddable demand at a step.
fn aggregate_balance(case: &GridCase, cond: &OperatingConditions, k: usize) -> (f64, f64) {
    let mut supply = 0.0;
    let mut demand = 0.0;
    for (d, dev) in case.devices.iter().enumerate() {
        let s = cond.device_scale[d][k];
        match dev.kind {
            DeviceKind::Dg => supply += dev.smax_pu * s,
            DeviceKind::Pv => supply += cond.pv_avail[d][k].max(0.0).min(dev.smax_pu * s),
            DeviceKind::Storage => {
                let st = dev.storage.as_ref().expect("validated");
                supply += (st.pmax_pu * s).min(dev.smax_pu * s);
            }
            DeviceKind::Load => demand += cond.load_p[d][k] * (1.0 - dev.curtail_max_frac),
        }
    }
    (supply, demand)
}

/// Names the first violated aggregate: energy, then line, then voltage.
pub fn diagnose_infeasible(case: &GridCase, cond: &OperatingConditions, model: FlowModel) -> DispatchError {
    for k in 0..case.steps() {
        let (supply, demand) = aggregate_balance(case, cond, k);
        if demand > supply + 1e-9 {
            return DispatchError::InfeasibleCase {
                kind: InfeasibleKind::Energy,
                detail: format!("step {k}: minimum demand {demand:.6} pu exceeds deliverable supply {supply:.6} pu"),
            };
        }
    }
    let relaxed_lines = baseline_program(case, cond, model, false)
        .map(|(p, _)| crate::conic::solve_default(&p).status == SolveStatus::Optimal)
        .unwrap_or(false);
    if relaxed_lines {
        return DispatchError::InfeasibleCase {
            kind: InfeasibleKind::Line,
            detail: "feasible only after removing branch flow limits".into(),
        };
    }
    let mut wide = case.clone();
    for b in &mut wide.buses {
        b.vmin_pu = 1e-3;
        b.vmax_pu = 1e3;
    }
    let relaxed_voltage = baseline_program(&wide, cond, model, false)
        .map(|(p, _)| crate::conic::solve_default(&p).status == SolveStatus::Optimal)
        .unwrap_or(false);
    if relaxed_voltage {
        DispatchError::InfeasibleCase {
            kind: InfeasibleKind::Voltage,
            detail: "feasible only after removing voltage bounds".into(),
        }
    } else {
        DispatchError::InfeasibleCase {
            kind: InfeasibleKind::Energy,
            detail: "storage energy limits cannot meet demand over the horizon".into(),
        }
    }
}
