//! Standard-form conic program: linear objective, linear equalities,
//! variable bounds and second-order cones over a named-variable registry.
//!
//! Solving goes through Clarabel; every report re-checks primal residuals
//! independently so `Optimal` always means the returned point is feasible to
//! `tol_feas`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TOL_FEAS: f64 = 1e-7;
pub const DEFAULT_TOL_GAP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("duplicate variable name {0}")]
    DuplicateName(String),
    #[error("unknown variable index {0}")]
    UnknownIndex(usize),
    #[error("variable {0} is already the head of a cone")]
    ConeHeadReused(usize),
    #[error("invalid bounds for {name}: [{lo}, {hi}]")]
    InvalidBounds { name: String, lo: f64, hi: f64 },
    #[error("non-finite coefficient")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("numerical error after {iterations} iterations (worst residual {residual:.3e})")]
    Numerical { iterations: u32, residual: f64 },
}

pub type VarId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(VarId, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    names: Vec<String>,
    index: HashMap<String, VarId>,
    pub c: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub eqs: Vec<LinearRow>,
    /// Each cone is (t, x1..xd) meaning ‖x‖₂ ≤ t.
    pub cones: Vec<Vec<VarId>>,
    cone_heads: HashSet<VarId>,
    /// Constant added to the reported objective.
    pub offset: f64,
    slack_count: usize,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: VarId) -> &str {
        &self.names[i]
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.index.get(name).copied()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64) -> Result<VarId, ConicError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ConicError::DuplicateName(name));
        }
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(ConicError::InvalidBounds { name, lo, hi });
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.c.push(0.0);
        self.lo.push(lo);
        self.hi.push(hi);
        Ok(id)
    }

    pub fn add_free(&mut self, name: impl Into<String>) -> Result<VarId, ConicError> {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    fn check(&self, coeffs: &[(VarId, f64)], rhs: f64) -> Result<(), ConicError> {
        for &(i, a) in coeffs {
            if i >= self.num_vars() {
                return Err(ConicError::UnknownIndex(i));
            }
            if !a.is_finite() {
                return Err(ConicError::NonFinite);
            }
        }
        if !rhs.is_finite() {
            return Err(ConicError::NonFinite);
        }
        Ok(())
    }

    /// Adds Σ a_i x_i = rhs; returns the row index.
    pub fn add_eq(&mut self, coeffs: &[(VarId, f64)], rhs: f64) -> Result<usize, ConicError> {
        self.check(coeffs, rhs)?;
        self.eqs.push(LinearRow { coeffs: merge(coeffs), rhs });
        Ok(self.eqs.len() - 1)
    }

    /// Adds Σ a_i x_i ≤ rhs through a nonnegative slack; returns the slack.
    pub fn add_le(&mut self, coeffs: &[(VarId, f64)], rhs: f64) -> Result<VarId, ConicError> {
        self.check(coeffs, rhs)?;
        let s = self.add_var(format!("~slack[{}]", self.slack_count), 0.0, f64::INFINITY)?;
        self.slack_count += 1;
        let mut row = coeffs.to_vec();
        row.push((s, 1.0));
        self.add_eq(&row, rhs)?;
        Ok(s)
    }

    /// Adds Σ a_i x_i ≥ rhs through a nonnegative slack; returns the slack.
    pub fn add_ge(&mut self, coeffs: &[(VarId, f64)], rhs: f64) -> Result<VarId, ConicError> {
        let neg: Vec<_> = coeffs.iter().map(|&(i, a)| (i, -a)).collect();
        self.add_le(&neg, -rhs)
    }

    /// Adds ‖(x1..xd)‖₂ ≤ t for `indices = [t, x1, .., xd]`.
    pub fn add_soc(&mut self, indices: &[VarId]) -> Result<usize, ConicError> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.num_vars()) {
            return Err(ConicError::UnknownIndex(i));
        }
        let t = *indices.first().ok_or(ConicError::UnknownIndex(usize::MAX))?;
        if !self.cone_heads.insert(t) {
            return Err(ConicError::ConeHeadReused(t));
        }
        self.cones.push(indices.to_vec());
        Ok(self.cones.len() - 1)
    }

    pub fn add_cost(&mut self, i: VarId, coef: f64) -> Result<(), ConicError> {
        if i >= self.num_vars() {
            return Err(ConicError::UnknownIndex(i));
        }
        if !coef.is_finite() {
            return Err(ConicError::NonFinite);
        }
        self.c[i] += coef;
        Ok(())
    }

    pub fn set_bounds(&mut self, i: VarId, lo: f64, hi: f64) -> Result<(), ConicError> {
        if i >= self.num_vars() {
            return Err(ConicError::UnknownIndex(i));
        }
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(ConicError::InvalidBounds { name: self.names[i].clone(), lo, hi });
        }
        self.lo[i] = lo;
        self.hi[i] = hi;
        Ok(())
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.offset + self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn eq_residual(&self, x: &[f64]) -> f64 {
        self.eqs
            .iter()
            .map(|r| (r.coeffs.iter().map(|&(i, a)| a * x[i]).sum::<f64>() - r.rhs).abs())
            .fold(0.0, f64::max)
    }

    pub fn bound_violation(&self, x: &[f64]) -> f64 {
        (0..self.num_vars())
            .map(|i| (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn cone_violation(&self, x: &[f64]) -> f64 {
        self.cones
            .iter()
            .map(|k| {
                let norm = k[1..].iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                (norm - x[k[0]]).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Plain-text standard-form listing for cross-checking with other solvers.
    pub fn dump_lp(&self) -> String {
        let mut out = String::new();
        let term = |a: f64, i: VarId| format!("{a:+} {}", self.names[i]);
        let _ = writeln!(out, "minimize");
        let obj: Vec<String> =
            self.c.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(i, &c)| term(c, i)).collect();
        let _ = writeln!(out, "  obj: {} {:+}", obj.join(" "), self.offset);
        let _ = writeln!(out, "subject to");
        for (r, row) in self.eqs.iter().enumerate() {
            let lhs: Vec<String> = row.coeffs.iter().map(|&(i, a)| term(a, i)).collect();
            let _ = writeln!(out, "  e{r}: {} = {}", lhs.join(" "), row.rhs);
        }
        let _ = writeln!(out, "bounds");
        for i in 0..self.num_vars() {
            let _ = writeln!(out, "  {} <= {} <= {}", self.lo[i], self.names[i], self.hi[i]);
        }
        let _ = writeln!(out, "cones");
        for (k, cone) in self.cones.iter().enumerate() {
            let xs: Vec<&str> = cone[1..].iter().map(|&i| self.names[i].as_str()).collect();
            let _ = writeln!(out, "  q{k}: ||({})|| <= {}", xs.join(", "), self.names[cone[0]]);
        }
        let _ = writeln!(out, "end");
        out
    }
}

fn merge(coeffs: &[(VarId, f64)]) -> Vec<(VarId, f64)> {
    let mut v = coeffs.to_vec();
    v.sort_by_key(|p| p.0);
    let mut out: Vec<(VarId, f64)> = Vec::with_capacity(v.len());
    for (i, a) in v {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += a,
            _ => out.push((i, a)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalError,
}

/// Multipliers in the sign convention c = Aᵀy + z_lo − z_hi + Σ cone terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Duals {
    pub eq: Vec<f64>,
    /// Multiplier of x ≥ lo (or of the fixing row when lo = hi, signed).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cones: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub bound_violation: f64,
    pub cone_violation: f64,
    pub iterations: u32,
    pub duals: Duals,
}

impl SolveReport {
    pub fn worst_residual(&self) -> f64 {
        self.primal_residual.max(self.bound_violation).max(self.cone_violation)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn require_optimal(&self) -> Result<&Self, SolveError> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            SolveStatus::Infeasible => Err(SolveError::Infeasible),
            SolveStatus::Unbounded => Err(SolveError::Unbounded),
            SolveStatus::NumericalError => {
                Err(SolveError::Numerical { iterations: self.iterations, residual: self.worst_residual() })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol_feas: DEFAULT_TOL_FEAS, tol_gap: DEFAULT_TOL_GAP, max_iter: 200 }
    }
}

pub fn solve(prog: &ConicProgram, tol_feas: f64, tol_gap: f64) -> SolveReport {
    solve_with(prog, &SolveOptions { tol_feas, tol_gap, ..Default::default() })
}

pub fn solve_default(prog: &ConicProgram) -> SolveReport {
    solve_with(prog, &SolveOptions::default())
}

enum RowKind {
    Eq(usize),
    Fixed(VarId),
    Lower(VarId),
    Upper(VarId),
}

pub fn solve_with(prog: &ConicProgram, opts: &SolveOptions) -> SolveReport {
    let n = prog.num_vars();
    // Row-major assembly: (row, col, val) triplets, grouped by cone type.
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut kinds: Vec<RowKind> = Vec::new();
    for (r, row) in prog.eqs.iter().enumerate() {
        for &(i, a) in &row.coeffs {
            if a != 0.0 {
                trip.push((b.len(), i, a));
            }
        }
        b.push(row.rhs);
        kinds.push(RowKind::Eq(r));
    }
    for i in 0..n {
        if prog.lo[i] == prog.hi[i] {
            trip.push((b.len(), i, 1.0));
            b.push(prog.lo[i]);
            kinds.push(RowKind::Fixed(i));
        }
    }
    let n_zero = b.len();
    for i in 0..n {
        if prog.lo[i] == prog.hi[i] {
            continue;
        }
        if prog.lo[i].is_finite() {
            trip.push((b.len(), i, -1.0));
            b.push(-prog.lo[i]);
            kinds.push(RowKind::Lower(i));
        }
        if prog.hi[i].is_finite() {
            trip.push((b.len(), i, 1.0));
            b.push(prog.hi[i]);
            kinds.push(RowKind::Upper(i));
        }
    }
    let n_nonneg = b.len() - n_zero;
    let cone_start = b.len();
    for cone in &prog.cones {
        for &i in cone {
            trip.push((b.len(), i, -1.0));
            b.push(0.0);
        }
    }
    let m = b.len();

    if m == 0 {
        // Only free variables and no rows: optimal at zero unless some cost is nonzero.
        let unbounded = prog.c.iter().any(|&c| c != 0.0);
        return SolveReport {
            status: if unbounded { SolveStatus::Unbounded } else { SolveStatus::Optimal },
            x: vec![0.0; n],
            objective: if unbounded { f64::NEG_INFINITY } else { prog.offset },
            primal_residual: 0.0,
            bound_violation: 0.0,
            cone_violation: 0.0,
            iterations: 0,
            duals: Duals { eq: vec![], lower: vec![0.0; n], upper: vec![0.0; n], cones: vec![] },
        };
    }

    let a = csc_from_triplets(m, n, &mut trip);
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_zero > 0 {
        cones.push(ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(NonnegativeConeT(n_nonneg));
    }
    for cone in &prog.cones {
        cones.push(SecondOrderConeT(cone.len()));
    }

    let settings = DefaultSettings::<f64> {
        verbose: false,
        max_iter: opts.max_iter,
        tol_feas: (opts.tol_feas * 1e-2).max(1e-12),
        tol_gap_abs: (opts.tol_gap * 1e-1).max(1e-12),
        tol_gap_rel: (opts.tol_gap * 1e-1).max(1e-12),
        max_threads: 1,
        ..DefaultSettings::default()
    };

    let mut solver = match DefaultSolver::new(&p, &prog.c, &a, &b, &cones, settings) {
        Ok(s) => s,
        Err(_) => {
            return numerical_failure(prog, 0);
        }
    };
    solver.solve();
    let sol = &solver.solution;
    let x = sol.x.clone();

    let mut duals = Duals {
        eq: vec![0.0; prog.eqs.len()],
        lower: vec![0.0; n],
        upper: vec![0.0; n],
        cones: Vec::with_capacity(prog.cones.len()),
    };
    for (row, kind) in kinds.iter().enumerate() {
        // Clarabel's stationarity is q + Aᵀz = 0; our A row signs make these the usual multipliers.
        let z = sol.z[row];
        match *kind {
            RowKind::Eq(r) => duals.eq[r] = -z,
            RowKind::Fixed(i) => duals.lower[i] = -z,
            RowKind::Lower(i) => duals.lower[i] = z,
            RowKind::Upper(i) => duals.upper[i] = z,
        }
    }
    let mut off = cone_start;
    for cone in &prog.cones {
        duals.cones.push(sol.z[off..off + cone.len()].to_vec());
        off += cone.len();
    }

    let primal_residual = prog.eq_residual(&x);
    let bound_violation = prog.bound_violation(&x);
    let cone_violation = prog.cone_violation(&x);
    let ok = primal_residual <= opts.tol_feas && bound_violation <= opts.tol_feas && cone_violation <= opts.tol_feas;
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved if ok => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericalError,
    };
    SolveReport {
        status,
        objective: prog.objective_at(&x),
        x,
        primal_residual,
        bound_violation,
        cone_violation,
        iterations: sol.iterations,
        duals,
    }
}

fn numerical_failure(prog: &ConicProgram, iterations: u32) -> SolveReport {
    let n = prog.num_vars();
    SolveReport {
        status: SolveStatus::NumericalError,
        x: vec![0.0; n],
        objective: f64::NAN,
        primal_residual: f64::INFINITY,
        bound_violation: f64::INFINITY,
        cone_violation: f64::INFINITY,
        iterations,
        duals: Duals::default(),
    }
}

fn csc_from_triplets(m: usize, n: usize, trip: &mut [(usize, usize, f64)]) -> CscMatrix<f64> {
    trip.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(trip.len());
    let mut nzval = Vec::with_capacity(trip.len());
    for &(r, c, v) in trip.iter() {
        if let (Some(&lr), Some(last)) = (rowval.last(), nzval.last_mut()) {
            // Merge duplicates within the same column.
            if lr == r && colptr[c + 1] > 0 {
                *last += v;
                continue;
            }
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
    }
    for j in 0..n {
        colptr[j + 1] += colptr[j];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("domain error: {0}")]
pub struct DomainError(pub String);

/// Percent gap between an upper bound (e.g. a feasible nonconvex dispatch)
/// and a lower bound from a relaxation.
pub fn relaxation_gap(upper_obj: f64, lower_obj: f64) -> Result<f64, DomainError> {
    let tol = DEFAULT_TOL_FEAS * upper_obj.abs().max(1.0);
    if upper_obj == 0.0 {
        return Err(DomainError("upper objective must be nonzero".into()));
    }
    if !(upper_obj.is_finite() && lower_obj.is_finite()) {
        return Err(DomainError("objectives must be finite".into()));
    }
    if upper_obj < lower_obj - tol {
        return Err(DomainError(format!("upper bound {upper_obj} is below lower bound {lower_obj}")));
    }
    Ok(((upper_obj - lower_obj) / upper_obj * 100.0).max(0.0))
}
