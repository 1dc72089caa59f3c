//! Grid case description: buses, branches, devices and forecasts on a
//! K-step horizon, ingested from the JSON case file and held in per-unit.
//!
//! Power quantities in the file are MW / MVA / MVAr / MWh and are divided by
//! `base_mva` on ingest. Impedances are already per-unit in the file.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("topology error: {0}")]
pub struct TopologyError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Pv,
    Dg,
    Storage,
    Load,
}

impl DeviceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceKind::Pv => "pv",
            DeviceKind::Dg => "dg",
            DeviceKind::Storage => "storage",
            DeviceKind::Load => "load",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: Vec<Phase>,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
    pub is_root: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    /// Parent-side bus (normalized so that `from` is closer to the root).
    pub from: String,
    pub to: String,
    pub phases: Vec<Phase>,
    pub r_pu: Vec<Vec<f64>>,
    pub x_pu: Vec<Vec<f64>>,
    /// Apparent-power limit per phase; `None` means unconstrained.
    pub smax_pu: Option<f64>,
}

impl Branch {
    /// Diagonal resistance and reactance for the phase at position `slot`.
    pub fn diag(&self, slot: usize) -> (f64, f64) {
        (self.r_pu[slot][slot], self.x_pu[slot][slot])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageParams {
    pub emin_pu_h: f64,
    pub emax_pu_h: f64,
    pub e0_pu_h: f64,
    pub pmax_pu: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub id: String,
    pub bus: String,
    pub kind: DeviceKind,
    pub smax_pu: f64,
    pub storage: Option<StorageParams>,
    /// Linear cost coefficients. dg: [a1]; pv: [a2]; load: [a3, a4]; storage: [a5].
    pub cost: Vec<f64>,
    /// Cost per pu of scheduled reserve (up or down).
    pub reserve_cost: f64,
    /// DG ramp limit per step in pu; `None` leaves ramping unconstrained.
    pub ramp_pu: Option<f64>,
    /// Largest curtailable share of a load's forecast.
    pub curtail_max_frac: f64,
}

impl Device {
    pub fn cost_at(&self, i: usize) -> f64 {
        self.cost.get(i).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub p_pu: Vec<f64>,
    pub q_pu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub steps: usize,
    pub dt_hours: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub horizon: Horizon,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub devices: Vec<Device>,
    pub forecasts: BTreeMap<String, Forecast>,
}

impl GridCase {
    pub fn steps(&self) -> usize {
        self.horizon.steps
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch_index(&self, id: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn device_index(&self, id: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }

    pub fn root_index(&self) -> usize {
        self.buses.iter().position(|b| b.is_root).expect("validated case has a root")
    }

    /// Forecast for a pv or load device; zeros for devices without one.
    pub fn forecast(&self, device: usize) -> Forecast {
        let d = &self.devices[device];
        self.forecasts.get(&d.id).cloned().unwrap_or_else(|| Forecast {
            p_pu: vec![0.0; self.steps()],
            q_pu: vec![0.0; self.steps()],
        })
    }

    /// Devices attached to bus `bus`, in case order.
    pub fn devices_at(&self, bus: &str) -> impl Iterator<Item = (usize, &Device)> {
        let bus = bus.to_string();
        self.devices.iter().enumerate().filter(move |(_, d)| d.bus == bus)
    }

    /// Writes the case back to the file schema (MW-scaled by `base_mva`).
    pub fn to_json(&self) -> Value {
        let file = CaseFile::from_case(self);
        serde_json::to_value(file).expect("case file serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("case file serializes")
    }
}

/// Per-step data the builders consume. Nominal values come from the case;
/// disturbance realizations are applied on top.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingConditions {
    /// Available PV active power per device/step (zero for non-pv).
    pub pv_avail: Vec<Vec<f64>>,
    pub pv_q: Vec<Vec<f64>>,
    pub load_p: Vec<Vec<f64>>,
    pub load_q: Vec<Vec<f64>>,
    /// Capacity multiplier per device/step.
    pub device_scale: Vec<Vec<f64>>,
    /// Flow-limit multiplier per branch/step.
    pub branch_scale: Vec<Vec<f64>>,
}

impl OperatingConditions {
    pub fn nominal(case: &GridCase) -> Self {
        let k = case.steps();
        let nd = case.devices.len();
        let mut pv_avail = vec![vec![0.0; k]; nd];
        let mut pv_q = vec![vec![0.0; k]; nd];
        let mut load_p = vec![vec![0.0; k]; nd];
        let mut load_q = vec![vec![0.0; k]; nd];
        for (i, d) in case.devices.iter().enumerate() {
            let f = case.forecast(i);
            match d.kind {
                DeviceKind::Pv => {
                    pv_avail[i] = f.p_pu;
                    pv_q[i] = f.q_pu;
                }
                DeviceKind::Load => {
                    load_p[i] = f.p_pu;
                    load_q[i] = f.q_pu;
                }
                _ => {}
            }
        }
        Self {
            pv_avail,
            pv_q,
            load_p,
            load_q,
            device_scale: vec![vec![1.0; k]; nd],
            branch_scale: vec![vec![1.0; k]; case.branches.len()],
        }
    }
}

/// Children of every bus in a radial case.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamMap {
    /// bus index -> child branch indices, sorted by branch id.
    pub children: Vec<Vec<usize>>,
    /// bus index -> parent branch index (None for the root).
    pub parent: Vec<Option<usize>>,
    /// Bus indices in breadth-first order from the root.
    pub order: Vec<usize>,
}

impl DownstreamMap {
    /// Children keyed by bus id, branch ids in deterministic order.
    pub fn by_id(&self, case: &GridCase) -> BTreeMap<String, Vec<String>> {
        case.buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let kids = self.children[i].iter().map(|&l| case.branches[l].id.clone()).collect();
                (b.id.clone(), kids)
            })
            .collect()
    }
}

/// Builds the parent/children map of a radial case, rejecting cycles and
/// disconnected buses. Branch orientation is taken from the case as stored.
pub fn downstream_map(case: &GridCase) -> Result<DownstreamMap, TopologyError> {
    let nb = case.buses.len();
    let roots: Vec<usize> = (0..nb).filter(|&i| case.buses[i].is_root).collect();
    if roots.len() != 1 {
        return Err(TopologyError(format!("expected exactly one root bus, found {}", roots.len())));
    }
    let root = roots[0];
    let mut parent: Vec<Option<usize>> = vec![None; nb];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (l, br) in case.branches.iter().enumerate() {
        let f = case
            .bus_index(&br.from)
            .ok_or_else(|| TopologyError(format!("branch {}: unknown bus {}", br.id, br.from)))?;
        let t = case
            .bus_index(&br.to)
            .ok_or_else(|| TopologyError(format!("branch {}: unknown bus {}", br.id, br.to)))?;
        if t == root {
            return Err(TopologyError(format!("branch {} feeds the root bus: cycle", br.id)));
        }
        if parent[t].is_some() {
            return Err(TopologyError(format!("bus {} has two parent branches: cycle", br.to)));
        }
        parent[t] = Some(l);
        children[f].push(l);
    }
    for kids in &mut children {
        kids.sort_by(|a, b| case.branches[*a].id.cmp(&case.branches[*b].id));
    }
    let mut order = Vec::with_capacity(nb);
    let mut seen = vec![false; nb];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for &l in &children[n] {
            let t = case.bus_index(&case.branches[l].to).expect("checked above");
            if seen[t] {
                return Err(TopologyError(format!("branch {} closes a cycle", case.branches[l].id)));
            }
            seen[t] = true;
            queue.push_back(t);
        }
    }
    if let Some(i) = (0..nb).find(|&i| !seen[i]) {
        return Err(TopologyError(format!("bus {} is not reachable from the root", case.buses[i].id)));
    }
    Ok(DownstreamMap { children, parent, order })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Accept and ignore unknown keys instead of rejecting them.
    pub lenient: bool,
}

pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase, CaseError> {
    load_case_with(path, LoadOptions::default())
}

pub fn load_case_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<GridCase, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CaseError::Parse(format!("{}: {e}", path.display())))?;
    parse_case(&text, opts)
}

pub fn parse_case(text: &str, opts: LoadOptions) -> Result<GridCase, CaseError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CaseError::Parse(e.to_string()))?;
    if !opts.lenient {
        check_keys(&value)?;
    }
    let file: CaseFile = serde_json::from_value(value).map_err(|e| CaseError::Parse(e.to_string()))?;
    file.into_case()
}

const TOP_KEYS: &[&str] = &["name", "base_mva", "horizon", "buses", "branches", "devices", "forecasts"];
const HORIZON_KEYS: &[&str] = &["steps", "dt_hours"];
const BUS_KEYS: &[&str] = &["id", "phases", "vmin_pu", "vmax_pu", "is_root"];
const BRANCH_KEYS: &[&str] = &["id", "from", "to", "phases", "r_pu", "x_pu", "smax_mva"];
const DEVICE_KEYS: &[&str] = &[
    "id",
    "bus",
    "kind",
    "smax_mva",
    "emin_mwh",
    "emax_mwh",
    "e0_mwh",
    "pmax_mw",
    "eta",
    "cost",
    "reserve_cost",
    "ramp_mw",
    "curtail_max_frac",
];
const FORECAST_KEYS: &[&str] = &["p_mw", "q_mvar"];

fn check_keys(value: &Value) -> Result<(), CaseError> {
    fn check(obj: &Value, allowed: &[&str], what: &str) -> Result<(), CaseError> {
        if let Some(map) = obj.as_object() {
            if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(CaseError::Validation(format!("{what}: unknown key \"{k}\"")));
            }
        }
        Ok(())
    }
    fn label(v: &Value, fallback: usize) -> String {
        v.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("#{fallback}"))
    }
    check(value, TOP_KEYS, "case")?;
    if let Some(h) = value.get("horizon") {
        check(h, HORIZON_KEYS, "horizon")?;
    }
    for (key, allowed, what) in
        [("buses", BUS_KEYS, "bus"), ("branches", BRANCH_KEYS, "branch"), ("devices", DEVICE_KEYS, "device")]
    {
        if let Some(items) = value.get(key).and_then(Value::as_array) {
            for (i, item) in items.iter().enumerate() {
                check(item, allowed, &format!("{what} {}", label(item, i)))?;
            }
        }
    }
    if let Some(map) = value.get("forecasts").and_then(Value::as_object) {
        for (id, f) in map {
            check(f, FORECAST_KEYS, &format!("forecast {id}"))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HorizonFile {
    steps: usize,
    dt_hours: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BusFile {
    id: String,
    phases: Vec<Phase>,
    vmin_pu: f64,
    vmax_pu: f64,
    #[serde(default)]
    is_root: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchFile {
    id: String,
    from: String,
    to: String,
    phases: Vec<Phase>,
    r_pu: Vec<Vec<f64>>,
    x_pu: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    smax_mva: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeviceFile {
    id: String,
    bus: String,
    kind: DeviceKind,
    smax_mva: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emin_mwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emax_mwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e0_mwh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pmax_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[serde(default)]
    cost: Vec<f64>,
    #[serde(default)]
    reserve_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ramp_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    curtail_max_frac: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForecastFile {
    p_mw: Vec<f64>,
    #[serde(default)]
    q_mvar: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseFile {
    name: String,
    base_mva: f64,
    horizon: HorizonFile,
    buses: Vec<BusFile>,
    branches: Vec<BranchFile>,
    devices: Vec<DeviceFile>,
    #[serde(default)]
    forecasts: BTreeMap<String, ForecastFile>,
}

fn invalid(msg: impl Into<String>) -> CaseError {
    CaseError::Validation(msg.into())
}

fn finite(v: f64, what: &str) -> Result<f64, CaseError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{what}: value must be finite")))
    }
}

impl CaseFile {
    fn from_case(case: &GridCase) -> Self {
        let b = case.base_mva;
        CaseFile {
            name: case.name.clone(),
            base_mva: b,
            horizon: HorizonFile { steps: case.horizon.steps, dt_hours: case.horizon.dt_hours },
            buses: case
                .buses
                .iter()
                .map(|bus| BusFile {
                    id: bus.id.clone(),
                    phases: bus.phases.clone(),
                    vmin_pu: bus.vmin_pu,
                    vmax_pu: bus.vmax_pu,
                    is_root: bus.is_root,
                })
                .collect(),
            branches: case
                .branches
                .iter()
                .map(|br| BranchFile {
                    id: br.id.clone(),
                    from: br.from.clone(),
                    to: br.to.clone(),
                    phases: br.phases.clone(),
                    r_pu: br.r_pu.clone(),
                    x_pu: br.x_pu.clone(),
                    smax_mva: br.smax_pu.map(|s| s * b),
                })
                .collect(),
            devices: case
                .devices
                .iter()
                .map(|d| {
                    let st = d.storage.as_ref();
                    DeviceFile {
                        id: d.id.clone(),
                        bus: d.bus.clone(),
                        kind: d.kind,
                        smax_mva: d.smax_pu * b,
                        emin_mwh: st.map(|s| s.emin_pu_h * b),
                        emax_mwh: st.map(|s| s.emax_pu_h * b),
                        e0_mwh: st.map(|s| s.e0_pu_h * b),
                        pmax_mw: st.map(|s| s.pmax_pu * b),
                        eta: st.map(|s| s.eta),
                        cost: d.cost.clone(),
                        reserve_cost: d.reserve_cost,
                        ramp_mw: d.ramp_pu.map(|r| r * b),
                        curtail_max_frac: (d.kind == DeviceKind::Load).then_some(d.curtail_max_frac),
                    }
                })
                .collect(),
            forecasts: case
                .forecasts
                .iter()
                .map(|(id, f)| {
                    (
                        id.clone(),
                        ForecastFile {
                            p_mw: f.p_pu.iter().map(|v| v * b).collect(),
                            q_mvar: Some(f.q_pu.iter().map(|v| v * b).collect()),
                        },
                    )
                })
                .collect(),
        }
    }

    fn into_case(self) -> Result<GridCase, CaseError> {
        let base = finite(self.base_mva, "base_mva")?;
        if base <= 0.0 {
            return Err(invalid("base_mva must be positive"));
        }
        if self.horizon.steps == 0 {
            return Err(invalid("horizon: steps must be at least 1"));
        }
        let dt = finite(self.horizon.dt_hours, "horizon dt_hours")?;
        if dt <= 0.0 {
            return Err(invalid("horizon: dt_hours must be positive"));
        }
        let steps = self.horizon.steps;

        let mut buses = Vec::with_capacity(self.buses.len());
        let mut bus_ids = BTreeSet::new();
        for b in self.buses {
            let what = format!("bus {}", b.id);
            if !bus_ids.insert(b.id.clone()) {
                return Err(invalid(format!("{what}: duplicate id")));
            }
            if b.phases.is_empty() {
                return Err(invalid(format!("{what}: phases must be nonempty")));
            }
            let phases = dedup_phases(&b.phases, &what)?;
            let vmin = finite(b.vmin_pu, &what)?;
            let vmax = finite(b.vmax_pu, &what)?;
            if !(0.0 < vmin && vmin < vmax) {
                return Err(invalid(format!("{what}: require 0 < vmin_pu < vmax_pu")));
            }
            buses.push(Bus { id: b.id, phases, vmin_pu: vmin, vmax_pu: vmax, is_root: b.is_root });
        }
        let roots = buses.iter().filter(|b| b.is_root).count();
        if roots != 1 {
            return Err(invalid(format!("expected exactly one root bus, found {roots}")));
        }

        let mut branches = Vec::with_capacity(self.branches.len());
        let mut branch_ids = BTreeSet::new();
        for br in self.branches {
            let what = format!("branch {}", br.id);
            if !branch_ids.insert(br.id.clone()) {
                return Err(invalid(format!("{what}: duplicate id")));
            }
            for end in [&br.from, &br.to] {
                if !bus_ids.contains(end) {
                    return Err(invalid(format!("{what}: unknown bus {end}")));
                }
            }
            if br.from == br.to {
                return Err(invalid(format!("{what}: self loop")));
            }
            if br.phases.is_empty() {
                return Err(invalid(format!("{what}: phases must be nonempty")));
            }
            let phases = dedup_phases(&br.phases, &what)?;
            let n = phases.len();
            for (name, m) in [("r_pu", &br.r_pu), ("x_pu", &br.x_pu)] {
                if m.len() != n || m.iter().any(|row| row.len() != n) {
                    return Err(invalid(format!("{what}: {name} must be {n}x{n}")));
                }
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("{what}: {name} must be finite")));
                }
            }
            let smax = match br.smax_mva {
                Some(s) => {
                    let s = finite(s, &what)?;
                    if s < 0.0 {
                        return Err(invalid(format!("{what}: smax_mva must be nonnegative")));
                    }
                    Some(s / base)
                }
                None => None,
            };
            branches.push(Branch {
                id: br.id,
                from: br.from,
                to: br.to,
                phases,
                r_pu: br.r_pu,
                x_pu: br.x_pu,
                smax_pu: smax,
            });
        }

        let mut devices = Vec::with_capacity(self.devices.len());
        let mut device_ids = BTreeSet::new();
        for d in self.devices {
            let what = format!("device {}", d.id);
            if !device_ids.insert(d.id.clone()) {
                return Err(invalid(format!("{what}: duplicate id")));
            }
            if !bus_ids.contains(&d.bus) {
                return Err(invalid(format!("{what}: unknown bus {}", d.bus)));
            }
            let smax = finite(d.smax_mva, &what)?;
            if smax < 0.0 {
                return Err(invalid(format!("{what}: smax_mva must be nonnegative")));
            }
            if d.cost.iter().any(|c| !c.is_finite()) || !d.reserve_cost.is_finite() {
                return Err(invalid(format!("{what}: costs must be finite")));
            }
            let storage = if d.kind == DeviceKind::Storage {
                let get = |v: Option<f64>, name: &str| -> Result<f64, CaseError> {
                    let v = v.ok_or_else(|| invalid(format!("{what}: storage requires {name}")))?;
                    finite(v, &what)
                };
                let emin = get(d.emin_mwh, "emin_mwh")? / base;
                let emax = get(d.emax_mwh, "emax_mwh")? / base;
                let e0 = get(d.e0_mwh, "e0_mwh")? / base;
                let pmax = get(d.pmax_mw, "pmax_mw")? / base;
                let eta = get(d.eta, "eta")?;
                if emin > emax {
                    return Err(invalid(format!("{what}: emin_mwh exceeds emax_mwh")));
                }
                if !(emin <= e0 && e0 <= emax) {
                    return Err(invalid(format!("{what}: e0_mwh outside [emin_mwh, emax_mwh]")));
                }
                if !(eta > 0.0 && eta <= 1.0) {
                    return Err(invalid(format!("{what}: eta must lie in (0, 1]")));
                }
                if pmax < 0.0 {
                    return Err(invalid(format!("{what}: pmax_mw must be nonnegative")));
                }
                Some(StorageParams { emin_pu_h: emin, emax_pu_h: emax, e0_pu_h: e0, pmax_pu: pmax, eta })
            } else {
                None
            };
            let ramp = match d.ramp_mw {
                Some(r) if finite(r, &what)? < 0.0 => {
                    return Err(invalid(format!("{what}: ramp_mw must be nonnegative")))
                }
                Some(r) => Some(r / base),
                None => None,
            };
            let frac = d.curtail_max_frac.unwrap_or(1.0);
            if !(0.0..=1.0).contains(&frac) {
                return Err(invalid(format!("{what}: curtail_max_frac must lie in [0, 1]")));
            }
            devices.push(Device {
                id: d.id,
                bus: d.bus,
                kind: d.kind,
                smax_pu: smax / base,
                storage,
                cost: d.cost,
                reserve_cost: d.reserve_cost,
                ramp_pu: ramp,
                curtail_max_frac: frac,
            });
        }

        let mut forecasts = BTreeMap::new();
        for (id, f) in self.forecasts {
            let what = format!("forecast {id}");
            let dev = devices
                .iter()
                .find(|d| d.id == id)
                .ok_or_else(|| invalid(format!("{what}: unknown device")))?;
            if !matches!(dev.kind, DeviceKind::Pv | DeviceKind::Load) {
                return Err(invalid(format!("{what}: only pv and load devices carry forecasts")));
            }
            let q = f.q_mvar.unwrap_or_else(|| vec![0.0; f.p_mw.len()]);
            if f.p_mw.len() != steps || q.len() != steps {
                return Err(invalid(format!("{what}: arrays must have length {steps}")));
            }
            if f.p_mw.iter().chain(q.iter()).any(|v| !v.is_finite()) {
                return Err(invalid(format!("{what}: values must be finite")));
            }
            if f.p_mw.iter().any(|&p| p < 0.0) {
                return Err(invalid(format!("{what}: p_mw must be nonnegative")));
            }
            if dev.kind == DeviceKind::Load && q.iter().any(|&v| v < 0.0) {
                return Err(invalid(format!("{what}: load q_mvar must be nonnegative")));
            }
            forecasts.insert(
                id,
                Forecast { p_pu: f.p_mw.iter().map(|v| v / base).collect(), q_pu: q.iter().map(|v| v / base).collect() },
            );
        }
        for d in &devices {
            if matches!(d.kind, DeviceKind::Pv | DeviceKind::Load) && !forecasts.contains_key(&d.id) {
                return Err(invalid(format!("device {}: missing forecast", d.id)));
            }
        }

        let mut case = GridCase {
            name: self.name,
            base_mva: base,
            horizon: Horizon { steps, dt_hours: dt },
            buses,
            branches,
            devices,
            forecasts,
        };
        normalize_orientation(&mut case)?;
        check_phases(&case)?;
        Ok(case)
    }
}

fn dedup_phases(phases: &[Phase], what: &str) -> Result<Vec<Phase>, CaseError> {
    let mut seen = BTreeSet::new();
    for p in phases {
        if !seen.insert(*p) {
            return Err(invalid(format!("{what}: repeated phase {p}")));
        }
    }
    Ok(phases.to_vec())
}

/// Orients every branch parent -> child by a breadth-first walk from the root
/// over the undirected edge set; rejects cycles and islands.
fn normalize_orientation(case: &mut GridCase) -> Result<(), CaseError> {
    let nb = case.buses.len();
    if case.branches.len() + 1 != nb {
        return Err(invalid(format!(
            "network is not radial: {} buses need {} branches, found {}",
            nb,
            nb - 1,
            case.branches.len()
        )));
    }
    let idx: HashMap<&str, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
    for (l, br) in case.branches.iter().enumerate() {
        let f = idx[br.from.as_str()];
        let t = idx[br.to.as_str()];
        adj[f].push((l, t));
        adj[t].push((l, f));
    }
    let root = case.root_index();
    let mut seen = vec![false; nb];
    let mut used = vec![false; case.branches.len()];
    let mut flip = vec![false; case.branches.len()];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(n) = queue.pop_front() {
        for &(l, m) in &adj[n] {
            if used[l] {
                continue;
            }
            used[l] = true;
            if seen[m] {
                return Err(invalid(format!("branch {}: closes a cycle", case.branches[l].id)));
            }
            seen[m] = true;
            flip[l] = case.branches[l].from != case.buses[n].id;
            queue.push_back(m);
        }
    }
    if let Some(i) = (0..nb).find(|&i| !seen[i]) {
        return Err(invalid(format!("bus {}: not connected to the root", case.buses[i].id)));
    }
    for (l, br) in case.branches.iter_mut().enumerate() {
        if flip[l] {
            std::mem::swap(&mut br.from, &mut br.to);
        }
    }
    Ok(())
}

fn check_phases(case: &GridCase) -> Result<(), CaseError> {
    for br in &case.branches {
        let from = &case.buses[case.bus_index(&br.from).expect("validated")];
        let to = &case.buses[case.bus_index(&br.to).expect("validated")];
        if let Some(p) = br.phases.iter().find(|p| !from.phases.contains(p) || !to.phases.contains(p)) {
            return Err(invalid(format!("branch {}: phase {p} not shared by both endpoints", br.id)));
        }
        if let Some(p) = to.phases.iter().find(|p| !br.phases.contains(p)) {
            return Err(invalid(format!("bus {}: phase {p} not fed by parent branch {}", to.id, br.id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_json() -> Value {
        serde_json::json!({
            "name": "t2",
            "base_mva": 1.0,
            "horizon": {"steps": 1, "dt_hours": 1.0},
            "buses": [
                {"id": "n0", "phases": ["a"], "vmin_pu": 0.95, "vmax_pu": 1.05, "is_root": true},
                {"id": "n1", "phases": ["a"], "vmin_pu": 0.95, "vmax_pu": 1.05}
            ],
            "branches": [
                {"id": "l01", "from": "n0", "to": "n1", "phases": ["a"], "r_pu": [[0.01]], "x_pu": [[0.02]], "smax_mva": 2.0}
            ],
            "devices": [
                {"id": "dg", "bus": "n0", "kind": "dg", "smax_mva": 1.2, "cost": [1.0]},
                {"id": "ld", "bus": "n1", "kind": "load", "smax_mva": 1.0, "cost": [100.0, 100.0]}
            ],
            "forecasts": {"ld": {"p_mw": [0.5], "q_mvar": [0.0]}}
        })
    }

    fn parse(v: &Value) -> Result<GridCase, CaseError> {
        parse_case(&v.to_string(), LoadOptions::default())
    }

    #[test]
    fn minimal_two_bus_case_loads() {
        let case = parse(&two_bus_json()).unwrap();
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.root_index(), 0);
    }

    #[test]
    fn dangling_branch_bus_is_named() {
        let mut v = two_bus_json();
        v["branches"][0]["to"] = "nx".into();
        let err = parse(&v).unwrap_err();
        assert_eq!(err, CaseError::Validation("branch l01: unknown bus nx".into()));
    }

    #[test]
    fn storage_energy_bounds_checked() {
        let mut v = two_bus_json();
        v["devices"].as_array_mut().unwrap().push(serde_json::json!({
            "id": "bat", "bus": "n1", "kind": "storage", "smax_mva": 0.5,
            "emin_mwh": 2.0, "emax_mwh": 1.0, "e0_mwh": 1.5, "pmax_mw": 0.5, "eta": 0.9
        }));
        match parse(&v).unwrap_err() {
            CaseError::Validation(msg) => assert!(msg.contains("device bat"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_unless_lenient() {
        let mut v = two_bus_json();
        v["buses"][1]["colour"] = "red".into();
        assert!(matches!(parse(&v), Err(CaseError::Validation(m)) if m.contains("colour")));
        let case = parse_case(&v.to_string(), LoadOptions { lenient: true }).unwrap();
        assert_eq!(case.buses.len(), 2);
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse_case("{\"name\": ", LoadOptions::default()), Err(CaseError::Parse(_))));
        let mut v = two_bus_json();
        v.as_object_mut().unwrap().remove("horizon");
        assert!(matches!(parse(&v), Err(CaseError::Parse(_))));
    }

    #[test]
    fn reversed_branch_is_normalized() {
        let mut v = two_bus_json();
        v["branches"][0]["from"] = "n1".into();
        v["branches"][0]["to"] = "n0".into();
        let case = parse(&v).unwrap();
        assert_eq!(case.branches[0].from, "n0");
        assert_eq!(case.branches[0].to, "n1");
    }

    #[test]
    fn per_unit_scaling_on_ingest() {
        let mut v = two_bus_json();
        v["base_mva"] = 10.0.into();
        let case = parse(&v).unwrap();
        assert_eq!(case.devices[0].smax_pu, 0.12);
        assert_eq!(case.forecasts["ld"].p_pu, vec![0.05]);
    }

    fn case_with_edges(edges: &[(&str, &str, &str)], buses: &[&str]) -> GridCase {
        GridCase {
            name: "topo".into(),
            base_mva: 1.0,
            horizon: Horizon { steps: 1, dt_hours: 1.0 },
            buses: buses
                .iter()
                .enumerate()
                .map(|(i, id)| Bus {
                    id: id.to_string(),
                    phases: vec![Phase::A],
                    vmin_pu: 0.9,
                    vmax_pu: 1.1,
                    is_root: i == 0,
                })
                .collect(),
            branches: edges
                .iter()
                .map(|(id, f, t)| Branch {
                    id: id.to_string(),
                    from: f.to_string(),
                    to: t.to_string(),
                    phases: vec![Phase::A],
                    r_pu: vec![vec![0.0]],
                    x_pu: vec![vec![0.0]],
                    smax_pu: None,
                })
                .collect(),
            devices: vec![],
            forecasts: BTreeMap::new(),
        }
    }

    #[test]
    fn downstream_map_path_graph() {
        let case = case_with_edges(&[("br01", "root", "b1"), ("br12", "b1", "b2")], &["root", "b1", "b2"]);
        let map = downstream_map(&case).unwrap().by_id(&case);
        assert_eq!(map["root"], vec!["br01"]);
        assert_eq!(map["b1"], vec!["br12"]);
        assert!(map["b2"].is_empty());
    }

    #[test]
    fn downstream_map_star_sorted() {
        let case = case_with_edges(&[("br2", "root", "b2"), ("br1", "root", "b1")], &["root", "b1", "b2"]);
        let map = downstream_map(&case).unwrap();
        assert_eq!(map.by_id(&case)["root"], vec!["br1", "br2"]);
        assert_eq!(map.parent[1], Some(1));
        assert_eq!(map.parent[2], Some(0));
    }

    #[test]
    fn downstream_map_rejects_cycle() {
        let case = case_with_edges(&[("a", "root", "b1"), ("b", "b1", "root")], &["root", "b1"]);
        assert!(downstream_map(&case).is_err());
    }

    #[test]
    fn cycle_in_file_rejected() {
        let mut v = two_bus_json();
        v["buses"].as_array_mut().unwrap().push(
            serde_json::json!({"id": "n2", "phases": ["a"], "vmin_pu": 0.95, "vmax_pu": 1.05}),
        );
        let br = |id: &str, f: &str, t: &str| {
            serde_json::json!({"id": id, "from": f, "to": t, "phases": ["a"], "r_pu": [[0.01]], "x_pu": [[0.01]]})
        };
        v["branches"] = serde_json::json!([br("a", "n0", "n1"), br("b", "n1", "n0")]);
        assert!(matches!(parse(&v), Err(CaseError::Validation(m)) if m.contains("cycle") || m.contains("connected")));
    }
}
