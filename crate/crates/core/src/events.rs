//! Cyber-physical event catalog, disturbance distributions, attack-signal
//! transforms and the rule-based operating-mode selector.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::DispatchSolution;
use crate::netmodel::{DeviceKind, GridCase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("events file: {0}")]
    Parse(String),
    #[error("events validation: {0}")]
    Validation(String),
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("{0}")]
    Domain(String),
    #[error("coordinated attack needs eps_load < 0 < eps_pv, got {eps_load} and {eps_pv}")]
    SignError { eps_load: f64, eps_pv: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DgTrip,
    PvTrip,
    DgCyber,
    PvCyber,
    LoadCyber,
    PvForecastErr,
    LoadForecastErr,
    WeatherPvLoss,
    WeatherLoadLoss,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::DgTrip,
        EventKind::PvTrip,
        EventKind::DgCyber,
        EventKind::PvCyber,
        EventKind::LoadCyber,
        EventKind::PvForecastErr,
        EventKind::LoadForecastErr,
        EventKind::WeatherPvLoss,
        EventKind::WeatherLoadLoss,
    ];

    /// Device kind the event acts on.
    pub fn device_kind(self) -> DeviceKind {
        match self {
            EventKind::DgTrip | EventKind::DgCyber => DeviceKind::Dg,
            EventKind::PvTrip | EventKind::PvCyber | EventKind::PvForecastErr | EventKind::WeatherPvLoss => DeviceKind::Pv,
            EventKind::LoadCyber | EventKind::LoadForecastErr | EventKind::WeatherLoadLoss => DeviceKind::Load,
        }
    }

    /// Forecast errors are additive in pu; every other kind is a fraction of
    /// the scheduled injection or served load.
    pub fn is_additive(self) -> bool {
        matches!(self, EventKind::PvForecastErr | EventKind::LoadForecastErr)
    }
}

/// Disturbance distribution; draws are clipped to `support()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian {
        mean: f64,
        std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<f64>,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `a` with probability 1 − p_b, `b` with probability p_b.
    TwoPoint {
        a: f64,
        b: f64,
        p_b: f64,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        stds: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<f64>,
    },
    /// sign·Exp(mean = scale), magnitude capped at `cap`.
    ExponentialTail {
        scale: f64,
        sign: f64,
        cap: f64,
    },
}

/// Default half-width of an unbounded Gaussian support, in standard deviations.
const GAUSSIAN_SUPPORT_STDS: f64 = 6.0;

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), EventError> {
        let bad = |m: String| Err(EventError::Validation(m));
        let finite = |xs: &[f64]| xs.iter().all(|v| v.is_finite());
        match self {
            DistributionSpec::Gaussian { mean, std, lo, hi } => {
                if !finite(&[*mean, *std]) || *std < 0.0 {
                    return bad(format!("gaussian needs finite mean and std ≥ 0, got ({mean}, {std})"));
                }
                if let (Some(l), Some(h)) = (lo, hi) {
                    if l > h {
                        return bad(format!("gaussian support [{l}, {h}] is empty"));
                    }
                }
            }
            DistributionSpec::Uniform { lo, hi } => {
                if !finite(&[*lo, *hi]) || lo > hi {
                    return bad(format!("uniform needs finite lo ≤ hi, got [{lo}, {hi}]"));
                }
            }
            DistributionSpec::TwoPoint { a, b, p_b } => {
                if !finite(&[*a, *b]) || !(0.0..=1.0).contains(p_b) {
                    return bad(format!("two_point needs finite a, b and p_b ∈ [0, 1], got p_b = {p_b}"));
                }
            }
            DistributionSpec::GaussianMixture { weights, means, stds, lo, hi } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
                    return bad("gaussian_mixture needs equal-length, nonempty weights/means/stds".into());
                }
                if !finite(weights) || !finite(means) || !finite(stds) || weights.iter().any(|w| *w < 0.0) || stds.iter().any(|s| *s < 0.0) {
                    return bad("gaussian_mixture needs finite non-negative weights and stds".into());
                }
                if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("gaussian_mixture weights must sum to 1".into());
                }
                if let (Some(l), Some(h)) = (lo, hi) {
                    if l > h {
                        return bad(format!("gaussian_mixture support [{l}, {h}] is empty"));
                    }
                }
            }
            DistributionSpec::ExponentialTail { scale, sign, cap } => {
                if !finite(&[*scale, *cap]) || *scale < 0.0 || *cap < 0.0 || (*sign != 1.0 && *sign != -1.0) {
                    return bad("exponential_tail needs scale ≥ 0, cap ≥ 0 and sign ±1".into());
                }
            }
        }
        let (lo, hi) = self.support();
        if lo > hi {
            return bad(format!("support [{lo}, {hi}] is empty"));
        }
        Ok(())
    }

    /// Closed support the draws are clipped to.
    pub fn support(&self) -> (f64, f64) {
        match self {
            DistributionSpec::Gaussian { mean, std, lo, hi } => (
                lo.unwrap_or(mean - GAUSSIAN_SUPPORT_STDS * std),
                hi.unwrap_or(mean + GAUSSIAN_SUPPORT_STDS * std),
            ),
            DistributionSpec::Uniform { lo, hi } => (*lo, *hi),
            DistributionSpec::TwoPoint { a, b, .. } => (a.min(*b), a.max(*b)),
            DistributionSpec::GaussianMixture { means, stds, lo, hi, .. } => {
                let l = means.iter().zip(stds).map(|(m, s)| m - GAUSSIAN_SUPPORT_STDS * s).fold(f64::INFINITY, f64::min);
                let h = means.iter().zip(stds).map(|(m, s)| m + GAUSSIAN_SUPPORT_STDS * s).fold(f64::NEG_INFINITY, f64::max);
                (lo.unwrap_or(l), hi.unwrap_or(h))
            }
            DistributionSpec::ExponentialTail { sign, cap, .. } => {
                if *sign > 0.0 {
                    (0.0, *cap)
                } else {
                    (-cap, 0.0)
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match self {
            DistributionSpec::Gaussian { mean, std, .. } => mean + std * rng.sample::<f64, _>(StandardNormal),
            DistributionSpec::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..=*hi)
                }
            }
            DistributionSpec::TwoPoint { a, b, p_b } => {
                if rng.gen::<f64>() < *p_b {
                    *b
                } else {
                    *a
                }
            }
            DistributionSpec::GaussianMixture { weights, means, stds, .. } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                means[pick] + stds[pick] * rng.sample::<f64, _>(StandardNormal)
            }
            DistributionSpec::ExponentialTail { scale, sign, .. } => {
                if *scale == 0.0 {
                    0.0
                } else {
                    sign * Exp::new(1.0 / scale).expect("validated scale").sample(rng)
                }
            }
        };
        let (lo, hi) = self.support();
        raw.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub id: String,
    pub kind: EventKind,
    pub locations: Vec<String>,
    pub distribution: DistributionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct EventCatalog {
    pub events: Vec<Event>,
}

impl EventCatalog {
    pub fn get(&self, id: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.events.iter().position(|e| e.id == id)
    }

    /// Checks ids, distributions, and that every location is a device of the
    /// kind the event acts on.
    pub fn validate(&self, case: &GridCase) -> Result<(), EventError> {
        let mut seen = BTreeSet::new();
        for e in &self.events {
            if !seen.insert(e.id.as_str()) {
                return Err(EventError::Validation(format!("duplicate event id {:?}", e.id)));
            }
            e.distribution.validate().map_err(|err| EventError::Validation(format!("event {}: {err}", e.id)))?;
            if e.locations.is_empty() {
                return Err(EventError::Validation(format!("event {}: no locations", e.id)));
            }
            for loc in &e.locations {
                let d = case
                    .device_index(loc)
                    .ok_or_else(|| EventError::Validation(format!("event {}: unknown location {loc:?}", e.id)))?;
                if case.devices[d].kind != e.kind.device_kind() {
                    return Err(EventError::Validation(format!(
                        "event {}: location {loc} is a {}, expected {}",
                        e.id,
                        case.devices[d].kind,
                        e.kind.device_kind()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One draw per location of the event, each clipped to the support.
pub fn sample_event<R: Rng + ?Sized>(catalog: &EventCatalog, id: &str, rng: &mut R) -> Result<Vec<f64>, EventError> {
    let e = catalog.get(id).ok_or_else(|| EventError::UnknownEvent(id.to_string()))?;
    Ok(e.locations.iter().map(|_| e.distribution.sample(rng)).collect())
}

/// Inclusive step window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub from: usize,
    pub to: usize,
}

/// Event × location probabilities, either shared by all windows or given per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventProbabilityMatrix {
    Static(Vec<Vec<f64>>),
    Windowed(Vec<Vec<Vec<f64>>>),
}

impl EventProbabilityMatrix {
    /// `[window][event][location]`
    pub fn per_window(&self, windows: usize) -> Vec<Vec<Vec<f64>>> {
        match self {
            EventProbabilityMatrix::Static(m) => vec![m.clone(); windows],
            EventProbabilityMatrix::Windowed(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsFile {
    pub events: Vec<Event>,
    /// Matrix column order; defaults to event locations in order of first use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locations: Option<Vec<String>>,
    pub probability_matrix: EventProbabilityMatrix,
    pub windows: Vec<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    /// Worst-case shortfall (pu) per event and location, used by the mode selector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impacts: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    CyberThreat,
    ExtremeLoadLoss,
    Blackout,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Normal, Mode::CyberThreat, Mode::ExtremeLoadLoss, Mode::Blackout];

    pub fn severity(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "Normal",
            Mode::CyberThreat => "CyberThreat",
            Mode::ExtremeLoadLoss => "ExtremeLoadLoss",
            Mode::Blackout => "Blackout",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMode {
    pub from: usize,
    pub to: usize,
    pub mode: Mode,
    /// Largest expected impact in the window.
    pub value: f64,
    /// Indices of the events guarded against in this window.
    pub events: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSchedule {
    pub thresholds: Vec<f64>,
    pub windows: Vec<WindowMode>,
}

impl ModeSchedule {
    pub fn window_at(&self, step: usize) -> Option<&WindowMode> {
        self.windows.iter().find(|w| w.from <= step && step <= w.to)
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.windows.iter().map(|w| w.mode).collect()
    }
}

/// Expected impact of each event in one window: probability that at least
/// one location fires times the largest impact among its live locations.
pub fn expected_impacts(probs: &[Vec<f64>], impacts: &[Vec<f64>]) -> Vec<f64> {
    probs
        .iter()
        .zip(impacts)
        .map(|(p, imp)| {
            let none: f64 = p.iter().map(|q| 1.0 - q.clamp(0.0, 1.0)).product();
            let worst = p.iter().zip(imp).filter(|(q, _)| **q > 0.0).map(|(_, i)| *i).fold(0.0, f64::max);
            (1.0 - none) * worst
        })
        .collect()
}

/// Quartiles (linear interpolation) of the values.
pub fn quartiles(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; 3];
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let (i, frac) = (pos.floor() as usize, pos - pos.floor());
        if i + 1 < s.len() {
            s[i] + frac * (s[i + 1] - s[i])
        } else {
            s[i]
        }
    };
    vec![q(0.25), q(0.5), q(0.75)]
}

/// Severity level from ordered thresholds: the number of thresholds at or
/// below the value (ties go up); non-positive values are Normal.
pub fn mode_for(value: f64, thresholds: &[f64]) -> Mode {
    if value <= 0.0 {
        return Mode::Normal;
    }
    let level = thresholds.iter().filter(|&&t| t <= value).count().min(3);
    Mode::ALL[level]
}

/// Rule-based mode selection. `probs` is `[window][event][location]`,
/// `impacts` `[event][location]`; thresholds default to quartiles of the
/// window values.
pub fn select_modes(probs: &[Vec<Vec<f64>>], impacts: &[Vec<f64>], windows: &[Window], thresholds: Option<&[f64]>) -> ModeSchedule {
    let expected: Vec<Vec<f64>> = probs.iter().map(|p| expected_impacts(p, impacts)).collect();
    let values: Vec<f64> = expected.iter().map(|e| e.iter().copied().fold(0.0, f64::max)).collect();
    let thresholds = match thresholds {
        Some(t) => t.to_vec(),
        None => quartiles(&values),
    };
    let first = thresholds.first().copied().unwrap_or(0.0);
    let windows = windows
        .iter()
        .zip(&values)
        .zip(&expected)
        .map(|((w, &value), e)| {
            let mode = mode_for(value, &thresholds);
            let events = e
                .iter()
                .enumerate()
                .filter(|(_, &v)| if mode == Mode::Normal { v > 0.0 } else { v > 0.0 && v >= first })
                .map(|(i, _)| i)
                .collect();
            WindowMode { from: w.from, to: w.to, mode, value, events }
        })
        .collect();
    ModeSchedule { thresholds, windows }
}

/// Catalog, probabilities and mode schedule resolved against a case.
#[derive(Debug, Clone, PartialEq)]
pub struct EventModel {
    pub catalog: EventCatalog,
    pub locations: Vec<String>,
    /// Device index of each location.
    pub location_devices: Vec<usize>,
    /// `[window][event][location]`
    pub probs: Vec<Vec<Vec<f64>>>,
    pub impacts: Vec<Vec<f64>>,
    pub windows: Vec<Window>,
    pub schedule: ModeSchedule,
}

impl EventModel {
    pub fn from_json(case: &GridCase, text: &str) -> Result<Self, EventError> {
        let file: EventsFile = serde_json::from_str(text).map_err(|e| EventError::Parse(e.to_string()))?;
        Self::new(case, file)
    }

    pub fn load(case: &GridCase, path: impl AsRef<std::path::Path>) -> Result<Self, EventError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| EventError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(case, &text)
    }

    pub fn new(case: &GridCase, file: EventsFile) -> Result<Self, EventError> {
        let catalog = EventCatalog { events: file.events };
        catalog.validate(case)?;
        let locations = match file.locations {
            Some(l) => l,
            None => {
                let mut out: Vec<String> = Vec::new();
                for loc in catalog.events.iter().flat_map(|e| &e.locations) {
                    if !out.contains(loc) {
                        out.push(loc.clone());
                    }
                }
                out
            }
        };
        let location_devices = locations
            .iter()
            .map(|l| case.device_index(l).ok_or_else(|| EventError::Validation(format!("unknown location {l:?}"))))
            .collect::<Result<Vec<_>, _>>()?;

        // Windows must tile the horizon in order.
        let mut next = 0;
        for (i, w) in file.windows.iter().enumerate() {
            if w.from != next || w.to < w.from {
                return Err(EventError::Validation(format!("window {i} [{}, {}] does not continue from step {next}", w.from, w.to)));
            }
            next = w.to + 1;
        }
        if next != case.steps() {
            return Err(EventError::Validation(format!("windows cover {next} of {} steps", case.steps())));
        }

        let probs = file.probability_matrix.per_window(file.windows.len());
        let (ne, nl) = (catalog.events.len(), locations.len());
        if probs.len() != file.windows.len() {
            return Err(EventError::Validation(format!("{} probability matrices for {} windows", probs.len(), file.windows.len())));
        }
        for (t, m) in probs.iter().enumerate() {
            if m.len() != ne || m.iter().any(|r| r.len() != nl) {
                return Err(EventError::Validation(format!("window {t}: probability matrix must be {ne}×{nl}")));
            }
            for (e, row) in m.iter().enumerate() {
                for (l, &p) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(EventError::Validation(format!("window {t}: probability {p} outside [0, 1]")));
                    }
                    if p > 0.0 && !catalog.events[e].locations.contains(&locations[l]) {
                        return Err(EventError::Validation(format!(
                            "window {t}: event {} has probability at non-applicable location {}",
                            catalog.events[e].id, locations[l]
                        )));
                    }
                }
            }
        }
        let impacts = match file.impacts {
            Some(i) => {
                if i.len() != ne || i.iter().any(|r| r.len() != nl) || i.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(EventError::Validation(format!("impacts must be a non-negative {ne}×{nl} matrix")));
                }
                i
            }
            None => default_impacts(case, &catalog, &locations),
        };
        if let Some(t) = &file.thresholds {
            if t.windows(2).any(|w| w[0] > w[1]) || t.iter().any(|v| !v.is_finite()) {
                return Err(EventError::Validation("thresholds must be finite and ascending".into()));
            }
        }
        let schedule = select_modes(&probs, &impacts, &file.windows, file.thresholds.as_deref());
        Ok(Self { catalog, locations, location_devices, probs, impacts, windows: file.windows, schedule })
    }

    /// Supply shortfall at step `k` for one scenario (positive = deficit),
    /// drawn from the events active in the step's mode. Each (event,
    /// location) fires with its window probability.
    pub fn sample_imbalance<R: Rng + ?Sized>(&self, sol: &DispatchSolution, k: usize, rng: &mut R) -> (Mode, f64) {
        let Some((t, wm)) = self.schedule.windows.iter().enumerate().find(|(_, w)| w.from <= k && k <= w.to) else {
            return (Mode::Normal, 0.0);
        };
        let mut deficit = 0.0;
        for &e in &wm.events {
            let ev = &self.catalog.events[e];
            for (l, &p) in self.probs[t][e].iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let fires = p >= 1.0 || rng.gen::<f64>() < p;
                if !fires {
                    continue;
                }
                let w = ev.distribution.sample(rng);
                let d = self.location_devices[l];
                deficit += shortfall(ev.kind, w, sol.devices[d].p_pu[k]);
            }
        }
        (wm.mode, deficit)
    }
}

/// Shortfall caused by disturbance `w` on a device with net injection `p`.
pub fn shortfall(kind: EventKind, w: f64, p: f64) -> f64 {
    match (kind.is_additive(), kind.device_kind()) {
        (true, DeviceKind::Load) => w,
        (true, _) => -w,
        // Fraction of served load (net injection is −served).
        (false, DeviceKind::Load) => w * (-p).max(0.0),
        (false, _) => -w * p.max(0.0),
    }
}

/// Worst-case magnitude of each (event, location): largest |support| times
/// the device rating for fractional kinds.
fn default_impacts(case: &GridCase, catalog: &EventCatalog, locations: &[String]) -> Vec<Vec<f64>> {
    catalog
        .events
        .iter()
        .map(|e| {
            let (lo, hi) = e.distribution.support();
            let mag = lo.abs().max(hi.abs());
            locations
                .iter()
                .map(|l| {
                    if !e.locations.contains(l) {
                        return 0.0;
                    }
                    if e.kind.is_additive() {
                        mag
                    } else {
                        mag * case.device_index(l).map_or(0.0, |d| case.devices[d].smax_pu)
                    }
                })
                .collect()
        })
        .collect()
}

fn check_eps(eps: f64) -> Result<(), EventError> {
    if (-1.0..=1.0).contains(&eps) {
        Ok(())
    } else {
        Err(EventError::Domain(format!("attack error must lie in [-1, 1], got {eps}")))
    }
}

/// Scaling attack: S·(1 + ε).
pub fn attack_scale(series: &[f64], eps: f64) -> Result<Vec<f64>, EventError> {
    check_eps(eps)?;
    if eps == 0.0 {
        return Ok(series.to_vec());
    }
    Ok(series.iter().map(|s| s * (1.0 + eps)).collect())
}

/// Scaling attack with a per-step error.
pub fn attack_scale_varying(series: &[f64], eps: &[f64]) -> Result<Vec<f64>, EventError> {
    if eps.len() != series.len() {
        return Err(EventError::Domain(format!("{} errors for {} steps", eps.len(), series.len())));
    }
    eps.iter().try_for_each(|&e| check_eps(e))?;
    Ok(series.iter().zip(eps).map(|(s, &e)| if e == 0.0 { *s } else { s * (1.0 + e) }).collect())
}

/// Replay attack: out[k] = in[k − δ], clamped to in[0] for k < δ.
pub fn attack_replay(series: &[f64], delta: usize) -> Vec<f64> {
    (0..series.len()).map(|k| series[k.saturating_sub(delta)]).collect()
}

/// Coordinated attack: load under-reported, pv over-reported.
pub fn attack_coordinated(load: &[f64], pv: &[f64], eps_load: f64, eps_pv: f64) -> Result<(Vec<f64>, Vec<f64>), EventError> {
    if !(eps_load < 0.0 && eps_pv > 0.0) {
        return Err(EventError::SignError { eps_load, eps_pv });
    }
    Ok((attack_scale(load, eps_load)?, attack_scale(pv, eps_pv)?))
}

/// Imbalance hidden by masked readings: (true − reported load) + (reported − true pv).
pub fn hidden_imbalance(load: &[f64], pv: &[f64], masked_load: &[f64], masked_pv: &[f64]) -> Vec<f64> {
    (0..load.len()).map(|k| (load[k] - masked_load[k]) + (masked_pv[k] - pv[k])).collect()
}
