//! Branch-flow network constraints: lossless LinDistFlow, or the lossy model
//! with its second-order-cone relaxation of W·I = P² + Q².
//!
//! Flows are sending-end, parent→child positive, and voltage drops along
//! positive flow. Each phase is treated as an independent scalar network
//! using the diagonal of the impedance matrices.

use crate::conic::{ConicError, ConicProgram, SolveReport, VarId};
use crate::netmodel::GridCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowModel {
    #[default]
    Linear,
    Socp,
}

#[derive(Debug, Clone)]
pub struct NetworkOptions<'a> {
    pub model: FlowModel,
    /// Prefix for variable names, so several copies can live in one program.
    pub prefix: &'a str,
    /// Per-branch, per-step multiplier on the flow limit.
    pub branch_scale: Option<&'a [Vec<f64>]>,
    pub line_limits: bool,
}

impl Default for NetworkOptions<'_> {
    fn default() -> Self {
        Self { model: FlowModel::Linear, prefix: "", branch_scale: None, line_limits: true }
    }
}

/// Variable handles, indexed `[element][phase slot][step]`.
#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub model: FlowModel,
    pub w: Vec<Vec<Vec<VarId>>>,
    pub p_flow: Vec<Vec<Vec<VarId>>>,
    pub q_flow: Vec<Vec<Vec<VarId>>>,
    /// Squared branch currents (SOCP model only).
    pub i_sq: Option<Vec<Vec<Vec<VarId>>>>,
    pub p_net: Vec<Vec<Vec<VarId>>>,
    pub q_net: Vec<Vec<Vec<VarId>>>,
}

impl NetworkVars {
    pub fn value(x: &[f64], ids: &[Vec<Vec<VarId>>]) -> Vec<Vec<Vec<f64>>> {
        ids.iter().map(|e| e.iter().map(|s| s.iter().map(|&i| x[i]).collect()).collect()).collect()
    }
}

pub fn build_linear_bfm(case: &GridCase, prog: &mut ConicProgram) -> Result<NetworkVars, ConicError> {
    build_network(case, prog, &NetworkOptions::default())
}

pub fn build_socp_bfm(case: &GridCase, prog: &mut ConicProgram) -> Result<NetworkVars, ConicError> {
    build_network(case, prog, &NetworkOptions { model: FlowModel::Socp, ..Default::default() })
}

pub fn build_network(
    case: &GridCase,
    prog: &mut ConicProgram,
    opts: &NetworkOptions<'_>,
) -> Result<NetworkVars, ConicError> {
    let k_steps = case.steps();
    let pre = opts.prefix;
    let socp = opts.model == FlowModel::Socp;
    let root = case.root_index();

    let mut w = Vec::with_capacity(case.buses.len());
    let mut p_net = Vec::with_capacity(case.buses.len());
    let mut q_net = Vec::with_capacity(case.buses.len());
    for (n, bus) in case.buses.iter().enumerate() {
        let (lo, hi) = if n == root { (1.0, 1.0) } else { (bus.vmin_pu.powi(2), bus.vmax_pu.powi(2)) };
        let mut wb = Vec::new();
        let mut pb = Vec::new();
        let mut qb = Vec::new();
        for ph in &bus.phases {
            let mut ws = Vec::with_capacity(k_steps);
            let mut ps = Vec::with_capacity(k_steps);
            let mut qs = Vec::with_capacity(k_steps);
            for k in 0..k_steps {
                ws.push(prog.add_var(format!("{pre}W[{},{ph},{k}]", bus.id), lo, hi)?);
                ps.push(prog.add_free(format!("{pre}Pnet[{},{ph},{k}]", bus.id))?);
                qs.push(prog.add_free(format!("{pre}Qnet[{},{ph},{k}]", bus.id))?);
            }
            wb.push(ws);
            pb.push(ps);
            qb.push(qs);
        }
        w.push(wb);
        p_net.push(pb);
        q_net.push(qb);
    }

    let mut p_flow = Vec::with_capacity(case.branches.len());
    let mut q_flow = Vec::with_capacity(case.branches.len());
    let mut i_sq = Vec::with_capacity(case.branches.len());
    for (l, br) in case.branches.iter().enumerate() {
        let mut pl = Vec::new();
        let mut ql = Vec::new();
        let mut il = Vec::new();
        for ph in &br.phases {
            let mut ps = Vec::with_capacity(k_steps);
            let mut qs = Vec::with_capacity(k_steps);
            let mut is = Vec::with_capacity(k_steps);
            for k in 0..k_steps {
                let p = prog.add_free(format!("{pre}P[{},{ph},{k}]", br.id))?;
                let q = prog.add_free(format!("{pre}Q[{},{ph},{k}]", br.id))?;
                ps.push(p);
                qs.push(q);
                if socp {
                    is.push(prog.add_var(format!("{pre}I[{},{ph},{k}]", br.id), 0.0, f64::INFINITY)?);
                }
                if let (true, Some(smax)) = (opts.line_limits, br.smax_pu) {
                    let scale = opts.branch_scale.map_or(1.0, |s| s[l][k]);
                    let t = prog.add_var(format!("{pre}Slim[{},{ph},{k}]", br.id), smax * scale, smax * scale)?;
                    prog.add_soc(&[t, p, q])?;
                }
            }
            pl.push(ps);
            ql.push(qs);
            il.push(is);
        }
        p_flow.push(pl);
        q_flow.push(ql);
        i_sq.push(il);
    }

    let slot = |bus: usize, ph| case.buses[bus].phases.iter().position(|p| *p == ph).expect("validated phases");

    // Voltage drop along each branch.
    for (l, br) in case.branches.iter().enumerate() {
        let f = case.bus_index(&br.from).expect("validated");
        let t = case.bus_index(&br.to).expect("validated");
        for (s, &ph) in br.phases.iter().enumerate() {
            let (r, x) = br.diag(s);
            let (sf, st) = (slot(f, ph), slot(t, ph));
            for k in 0..k_steps {
                let mut row =
                    vec![(w[t][st][k], 1.0), (w[f][sf][k], -1.0), (p_flow[l][s][k], 2.0 * r), (q_flow[l][s][k], 2.0 * x)];
                if socp {
                    row.push((i_sq[l][s][k], -(r * r + x * x)));
                    // ‖(2P, 2Q, W−I)‖ ≤ W+I expressed through auxiliary variables.
                    let tag = format!("{},{ph},{k}", br.id);
                    let head = prog.add_free(format!("{pre}Rh[{tag}]"))?;
                    let a = prog.add_free(format!("{pre}Ra[{tag}]"))?;
                    let b = prog.add_free(format!("{pre}Rb[{tag}]"))?;
                    let c = prog.add_free(format!("{pre}Rc[{tag}]"))?;
                    let (wf, i, p, q) = (w[f][sf][k], i_sq[l][s][k], p_flow[l][s][k], q_flow[l][s][k]);
                    prog.add_eq(&[(head, 1.0), (wf, -1.0), (i, -1.0)], 0.0)?;
                    prog.add_eq(&[(a, 1.0), (p, -2.0)], 0.0)?;
                    prog.add_eq(&[(b, 1.0), (q, -2.0)], 0.0)?;
                    prog.add_eq(&[(c, 1.0), (wf, -1.0), (i, 1.0)], 0.0)?;
                    prog.add_soc(&[head, a, b, c])?;
                }
                prog.add_eq(&row, 0.0)?;
            }
        }
    }

    // Nodal balance: injection + inflow − outflow = 0.
    for (n, bus) in case.buses.iter().enumerate() {
        for (s, &ph) in bus.phases.iter().enumerate() {
            for k in 0..k_steps {
                let mut prow = vec![(p_net[n][s][k], 1.0)];
                let mut qrow = vec![(q_net[n][s][k], 1.0)];
                for (l, br) in case.branches.iter().enumerate() {
                    let Some(bs) = br.phases.iter().position(|p| *p == ph) else { continue };
                    if br.to == bus.id {
                        prow.push((p_flow[l][bs][k], 1.0));
                        qrow.push((q_flow[l][bs][k], 1.0));
                        if socp {
                            let (r, x) = br.diag(bs);
                            prow.push((i_sq[l][bs][k], -r));
                            qrow.push((i_sq[l][bs][k], -x));
                        }
                    } else if br.from == bus.id {
                        prow.push((p_flow[l][bs][k], -1.0));
                        qrow.push((q_flow[l][bs][k], -1.0));
                    }
                }
                prog.add_eq(&prow, 0.0)?;
                prog.add_eq(&qrow, 0.0)?;
            }
        }
    }

    Ok(NetworkVars {
        model: opts.model,
        w,
        p_flow,
        q_flow,
        i_sq: socp.then_some(i_sq),
        p_net,
        q_net,
    })
}

/// Prices resistive losses Σ r·I in the objective. Without it the relaxation
/// can dump surplus power into fictitious losses instead of curtailing.
pub fn add_loss_penalty(case: &GridCase, prog: &mut ConicProgram, vars: &NetworkVars, weight: f64) -> Result<(), ConicError> {
    let Some(i_sq) = &vars.i_sq else {
        return Ok(());
    };
    for (l, br) in case.branches.iter().enumerate() {
        for s in 0..br.phases.len() {
            let (r, _) = br.diag(s);
            for &i in &i_sq[l][s] {
                prog.add_cost(i, weight * r)?;
            }
        }
    }
    Ok(())
}

/// Total resistive losses Σ r·I at a solution.
pub fn total_losses(case: &GridCase, vars: &NetworkVars, x: &[f64]) -> f64 {
    let Some(i_sq) = &vars.i_sq else {
        return 0.0;
    };
    let mut sum = 0.0;
    for (l, br) in case.branches.iter().enumerate() {
        for s in 0..br.phases.len() {
            sum += i_sq[l][s].iter().map(|&i| br.diag(s).0 * x[i]).sum::<f64>();
        }
    }
    sum
}

/// Slack of the relaxed cone ‖(2P, 2Q, W−I)‖ ≤ W+I; zero when W·I = P²+Q².
pub fn socp_cone_slack(w: f64, i: f64, p: f64, q: f64) -> f64 {
    let norm = ((2.0 * p).powi(2) + (2.0 * q).powi(2) + (w - i).powi(2)).sqrt();
    (w + i) - norm
}

/// W·I − (P² + Q²) for every branch phase and step, using the sending-end W.
pub fn rank1_residual(case: &GridCase, vars: &NetworkVars, report: &SolveReport) -> Vec<Vec<Vec<f64>>> {
    let x = &report.x;
    let Some(i_sq) = &vars.i_sq else {
        return Vec::new();
    };
    case.branches
        .iter()
        .enumerate()
        .map(|(l, br)| {
            let f = case.bus_index(&br.from).expect("validated");
            br.phases
                .iter()
                .enumerate()
                .map(|(s, ph)| {
                    let sf = case.buses[f].phases.iter().position(|p| p == ph).expect("validated");
                    (0..case.steps())
                        .map(|k| {
                            let (w, i) = (x[vars.w[f][sf][k]], x[i_sq[l][s][k]]);
                            let (p, q) = (x[vars.p_flow[l][s][k]], x[vars.q_flow[l][s][k]]);
                            w * i - (p * p + q * q)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn max_rank1_residual(case: &GridCase, vars: &NetworkVars, report: &SolveReport) -> f64 {
    rank1_residual(case, vars, report).iter().flatten().flatten().fold(0.0, |m: f64, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve_default, SolveStatus};
    use crate::netmodel::{parse_case, LoadOptions};
    use approx::assert_abs_diff_eq;

    fn single_branch(r: f64, x: f64) -> GridCase {
        let text = serde_json::json!({
            "name": "sb", "base_mva": 1.0, "horizon": {"steps": 1, "dt_hours": 1.0},
            "buses": [
                {"id": "n0", "phases": ["a"], "vmin_pu": 0.5, "vmax_pu": 1.5, "is_root": true},
                {"id": "n1", "phases": ["a"], "vmin_pu": 0.5, "vmax_pu": 1.5}
            ],
            "branches": [{"id": "l", "from": "n0", "to": "n1", "phases": ["a"], "r_pu": [[r]], "x_pu": [[x]]}],
            "devices": [], "forecasts": {}
        });
        parse_case(&text.to_string(), LoadOptions::default()).unwrap()
    }

    /// Pins the child bus injection to −(p + jq) and returns the solved W at the child.
    fn child_voltage(case: &GridCase, p: f64, q: f64) -> (f64, f64) {
        let mut prog = ConicProgram::new();
        let net = build_linear_bfm(case, &mut prog).unwrap();
        prog.set_bounds(net.p_net[1][0][0], -p, -p).unwrap();
        prog.set_bounds(net.q_net[1][0][0], -q, -q).unwrap();
        let rep = solve_default(&prog);
        assert_eq!(rep.status, SolveStatus::Optimal);
        (rep.x[net.w[1][0][0]], rep.x[net.p_flow[0][0][0]])
    }

    #[test]
    fn lindistflow_drop_by_hand() {
        let case = single_branch(0.01, 0.02);
        let (w, p) = child_voltage(&case, 1.0, 0.5);
        let expected = 1.0 - 2.0 * (0.01 * 1.0 + 0.02 * 0.5);
        assert_abs_diff_eq!(w, expected, epsilon = 1e-7);
        assert_abs_diff_eq!(w, 0.96, epsilon = 1e-7);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_impedance_no_drop() {
        let case = single_branch(0.0, 0.0);
        let (w, _) = child_voltage(&case, 0.7, -0.3);
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn leaf_load_conservation() {
        let case = single_branch(0.05, 0.05);
        let (_, p) = child_voltage(&case, 0.5, 0.0);
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-7);
    }

    #[test]
    fn cone_slack_examples() {
        assert_abs_diff_eq!(socp_cone_slack(1.0, 1.0, 1.0, 0.0), 0.0, epsilon = 1e-15);
        // (0.6, 0.8, 0.75) has norm 1.25 = W + I.
        assert_abs_diff_eq!(socp_cone_slack(1.0, 0.25, 0.3, 0.4), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(socp_cone_slack(1.0, 1.0, 0.0, 0.0), 2.0, epsilon = 1e-15);
        // rank-1 residual for the same three points
        let res = |w: f64, i: f64, p: f64, q: f64| w * i - (p * p + q * q);
        assert_abs_diff_eq!(res(1.0, 0.25, 0.3, 0.4), 0.0, epsilon = 1e-15);
        assert_eq!(res(1.0, 1.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn socp_branch_with_losses_is_tight_when_minimizing_current() {
        let case = single_branch(0.02, 0.04);
        let mut prog = ConicProgram::new();
        let net = build_socp_bfm(&case, &mut prog).unwrap();
        prog.set_bounds(net.p_net[1][0][0], -0.8, -0.8).unwrap();
        prog.set_bounds(net.q_net[1][0][0], -0.3, -0.3).unwrap();
        let i = net.i_sq.as_ref().unwrap()[0][0][0];
        prog.add_cost(i, 1.0).unwrap();
        let rep = solve_default(&prog);
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!(max_rank1_residual(&case, &net, &rep) <= 1e-6);
        // Sending-end power covers the load plus r·I losses.
        let p = rep.x[net.p_flow[0][0][0]];
        assert_abs_diff_eq!(p - 0.02 * rep.x[i], 0.8, epsilon = 1e-6);
    }
}
