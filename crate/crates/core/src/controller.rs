//! Per-tick risk-constrained program.
//!
//! Variables, in order: `u` (2), one rate per nearby agent (`b_i`, or `a_i`
//! under condition family C), the CLF relaxation `δ`, and the shared slack
//! `s`. The objective is
//!
//! ```text
//! ½‖u − u_ref‖² + Σ w_b·b_i + w_δ·δ² + c·s
//! ```
//!
//! (family C uses `−w_b·a_i`: larger `a` is the conservative direction).
//! Rows are one generator inequality and one relaxed budget condition per
//! agent, plus the CLF row. `u ∈ U` is a box bound, so the applied input is
//! admissible without clipping.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::barrier::{
    generator_constraint_row, implied_risk_bound, slack_condition_bounds, AgentTerms, BarrierSpec, ConditionBound,
    ConditionFamily, ConstraintRow, EgoTerms, SlackCondition, DEGENERATE_BOUND,
};
use crate::dynamics::TransformedEgo;
use crate::error::{Error, Result};
use crate::qp::{qp_solve, qp_solve_warm, QpProblem, QpSettings, QpStatus, WarmStart};

/// Slack values at or below this count as zero.
pub const SLACK_TOL: f64 = 1e-6;

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputBounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Default for InputBounds {
    fn default() -> Self {
        let w = core::f64::consts::FRAC_PI_6;
        Self {
            lo: [0.2, -w],
            hi: [2.0, w],
        }
    }
}

impl InputBounds {
    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !(self.lo[i] < self.hi[i]) || !self.lo[i].is_finite() || !self.hi[i].is_finite() {
                return Err(Error::config("input bounds need finite lo < hi"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64; 2], tol: f64) -> bool {
        (0..2).all(|i| u[i] >= self.lo[i] - tol && u[i] <= self.hi[i] + tol)
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfConfig {
    /// `γ_V` in `dV/dt ≤ −γ_V V + δ`.
    pub gamma: f64,
    /// `w_δ`.
    pub weight: f64,
}

impl Default for ClfConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            weight: 0.01,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Goal {
    /// `‖p − x_g‖² ≤ r_g²`, boundary included.
    pub fn contains(&self, p: &[f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Whether the program carries the slack variable.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlackMode {
    /// `s ≥ 0` with cost `c·s`.
    #[default]
    Penalized,
    /// `s` pinned to zero: the unrelaxed program.
    Disabled,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub family: ConditionFamily,
    /// `c`.
    pub slack_weight: f64,
    /// `w_b`.
    pub rate_weight: f64,
    pub u_bounds: InputBounds,
    pub clf: ClfConfig,
    /// Cruise reference `u_ref = (speed, 0)`.
    pub u_ref: [f64; 2],
    /// Agents whose estimated position is closer than this to `p̄_r` get rows.
    pub proximity_radius: f64,
    pub slack_mode: SlackMode,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            family: ConditionFamily::default(),
            slack_weight: 1e6,
            rate_weight: 10.0,
            u_bounds: InputBounds::default(),
            clf: ClfConfig::default(),
            u_ref: [1.1, 0.0],
            proximity_radius: 2.5,
            slack_mode: SlackMode::Penalized,
            qp_tol: 1e-8,
            qp_max_iter: 200,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.u_bounds.validate()?;
        if !(self.rate_weight > 0.0) || !self.rate_weight.is_finite() {
            return Err(Error::config("rate weight w_b must be positive"));
        }
        if !(self.slack_weight >= 1e4 * self.rate_weight) || !self.slack_weight.is_finite() {
            return Err(Error::config("slack weight c must be at least 1e4 times w_b"));
        }
        if !(self.clf.gamma > 0.0) || !(self.clf.weight > 0.0) {
            return Err(Error::config("CLF gain and weight must be positive"));
        }
        if !(self.proximity_radius > 0.0) {
            return Err(Error::config("proximity radius must be positive"));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return Err(Error::config("qp tolerance and iteration limit must be positive"));
        }
        if self.u_ref.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("u_ref must be finite"));
        }
        Ok(())
    }

    pub fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol: self.qp_tol,
            max_iter: self.qp_max_iter,
        }
    }
}

/// `∇V·ḡ u − δ ≤ −γ_V V` with `V = ‖p̄ − x_g‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfRow {
    pub u_coeffs: [f64; 2],
    pub delta_coeff: f64,
    pub rhs: f64,
    pub v: f64,
}

pub fn clf_constraint_row(ego: &TransformedEgo, goal: &Goal, clf: &ClfConfig) -> Result<ClfRow> {
    if !(goal.radius > 0.0) {
        return Err(Error::config("goal radius must be positive"));
    }
    let p = ego.position();
    let e = [p[0] - goal.center[0], p[1] - goal.center[1]];
    let v = e[0] * e[0] + e[1] * e[1];
    let g = ego.planar_block();
    let u_coeffs = [
        2.0 * (e[0] * g[0][0] + e[1] * g[1][0]),
        2.0 * (e[0] * g[0][1] + e[1] * g[1][1]),
    ];
    Ok(ClfRow {
        u_coeffs,
        delta_coeff: -1.0,
        rhs: -clf.gamma * v,
        v,
    })
}

/// One nearby agent as seen by the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInput {
    /// Estimated `[x, y, v]`.
    pub x_hat: DVector<f64>,
    pub terms: AgentTerms,
}

/// Agents within `radius` of the transformed ego position, in input order.
pub fn nearby_agents<'a>(ego: &TransformedEgo, agents: &'a [AgentInput], radius: f64) -> Vec<&'a AgentInput> {
    let p = ego.position();
    agents
        .iter()
        .filter(|a| {
            let dx = a.x_hat[0] - p[0];
            let dy = a.x_hat[1] - p[1];
            dx * dx + dy * dy < radius * radius
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramLayout {
    pub u: [usize; 2],
    /// `b_i` (families A, B) or `a_i` (family C), one per agent.
    pub rates: Vec<usize>,
    pub delta: usize,
    pub slack: usize,
}

impl ProgramLayout {
    fn new(n_agents: usize) -> Self {
        Self {
            u: [0, 1],
            rates: (2..2 + n_agents).collect(),
            delta: 2 + n_agents,
            slack: 3 + n_agents,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.slack + 1
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Barrier,
    /// Upper bound on `b` (families A, B) or lower bound on `a` (family C).
    Condition,
    /// Family C: `a ≤ b + s`.
    ConditionUpper,
    Clf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInfo {
    pub kind: RowKind,
    pub agent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramInstance {
    pub qp: QpProblem,
    pub layout: ProgramLayout,
    pub rows_meta: Vec<RowInfo>,
    pub barrier_rows: Vec<ConstraintRow>,
    pub conditions: Vec<SlackCondition>,
    pub clf: ClfRow,
    pub family: ConditionFamily,
}

impl ProgramInstance {
    /// Any condition row whose closed form was undefined.
    pub fn has_degenerate_condition(&self) -> bool {
        self.conditions.iter().any(|c| c.bound.degenerate())
    }
}

/// Everything a tick needs besides the agent list.
#[derive(Debug, Clone)]
pub struct TickContext<'a> {
    pub barrier: &'a BarrierSpec,
    /// Estimation error bound ε.
    pub epsilon: f64,
    pub goal: &'a Goal,
    pub cfg: &'a ControllerConfig,
}

/// Builds the program for the given (already proximity-filtered) agents.
pub fn assemble_program(
    ego: &TransformedEgo,
    agents: &[&AgentInput],
    ctx: &TickContext<'_>,
) -> Result<ProgramInstance> {
    let cfg = ctx.cfg;
    let n_agents = agents.len();
    let layout = ProgramLayout::new(n_agents);
    let k = layout.n_vars();

    let mut p = DMatrix::zeros(k, k);
    let mut q = DVector::zeros(k);
    p[(0, 0)] = 1.0;
    p[(1, 1)] = 1.0;
    q[0] = -cfg.u_ref[0];
    q[1] = -cfg.u_ref[1];
    let rate_cost = match cfg.family {
        ConditionFamily::C { .. } => -cfg.rate_weight,
        _ => cfg.rate_weight,
    };
    for &r in &layout.rates {
        q[r] = rate_cost;
    }
    p[(layout.delta, layout.delta)] = 2.0 * cfg.clf.weight;
    q[layout.slack] = cfg.slack_weight;

    let mut lo = DVector::from_element(k, 0.0);
    let mut hi = DVector::from_element(k, f64::INFINITY);
    for i in 0..2 {
        lo[i] = cfg.u_bounds.lo[i];
        hi[i] = cfg.u_bounds.hi[i];
    }
    if cfg.slack_mode == SlackMode::Disabled {
        hi[layout.slack] = 0.0;
    }

    let ego_terms = EgoTerms {
        drift: DVector::zeros(3),
        input: ego.input_matrix_dm(),
    };
    let fixed_a = cfg.family.fixed_a();

    let mut a_rows: Vec<DVector<f64>> = Vec::new();
    let mut ub: Vec<f64> = Vec::new();
    let mut rows_meta = Vec::new();
    let mut barrier_rows = Vec::with_capacity(n_agents);
    let mut conditions = Vec::with_capacity(n_agents);

    for (j, agent) in agents.iter().enumerate() {
        let rate = layout.rates[j];
        let mut x_joint = DVector::zeros(6);
        x_joint.rows_mut(0, 3).copy_from_slice(&ego.state);
        x_joint.rows_mut(3, 3).copy_from(&agent.x_hat);
        let row = generator_constraint_row(ctx.barrier, &x_joint, &ego_terms, &agent.terms, ctx.epsilon, fixed_a)?;

        let mut coeffs = DVector::zeros(k);
        coeffs[0] = row.u_coeffs[0];
        coeffs[1] = row.u_coeffs[1];
        let mut rhs = row.rhs;
        match cfg.family {
            ConditionFamily::C { b } => {
                coeffs[rate] = row.meta.b0;
                rhs += b;
            }
            _ => coeffs[rate] = row.b_coeff,
        }
        a_rows.push(coeffs);
        ub.push(rhs);
        rows_meta.push(RowInfo {
            kind: RowKind::Barrier,
            agent: Some(agent.terms.id),
        });

        let cond = slack_condition_bounds(cfg.family, row.meta.b0, &ctx.barrier.budget, ctx.barrier.horizon);
        for (idx, sr) in cond.rows.iter().enumerate() {
            let mut coeffs = DVector::zeros(k);
            coeffs[rate] = sr.rate_coeff;
            coeffs[layout.slack] = sr.slack_coeff;
            let mut rhs = sr.rhs;
            // Without slack an undefined condition must stay unsatisfiable.
            if cfg.slack_mode == SlackMode::Disabled && cond.bound.degenerate() && idx == 0 {
                rhs = -DEGENERATE_BOUND;
            }
            a_rows.push(coeffs);
            ub.push(rhs);
            rows_meta.push(RowInfo {
                kind: if idx == 0 {
                    RowKind::Condition
                } else {
                    RowKind::ConditionUpper
                },
                agent: Some(agent.terms.id),
            });
        }
        barrier_rows.push(row);
        conditions.push(cond);
    }

    let clf = clf_constraint_row(ego, ctx.goal, &cfg.clf)?;
    let mut coeffs = DVector::zeros(k);
    coeffs[0] = clf.u_coeffs[0];
    coeffs[1] = clf.u_coeffs[1];
    coeffs[layout.delta] = clf.delta_coeff;
    a_rows.push(coeffs);
    ub.push(clf.rhs);
    rows_meta.push(RowInfo {
        kind: RowKind::Clf,
        agent: None,
    });

    let mut a = DMatrix::zeros(a_rows.len(), k);
    for (i, r) in a_rows.iter().enumerate() {
        a.set_row(i, &r.transpose());
    }
    let qp = QpProblem::new(p, q, a, DVector::from_vec(ub), lo, hi)?;
    Ok(ProgramInstance {
        qp,
        layout,
        rows_meta,
        barrier_rows,
        conditions,
        clf,
        family: cfg.family,
    })
}

/// Source of wall-clock time for solve timing. The core crate never reads a
/// clock itself.
pub trait Clock {
    fn now_seconds(&self) -> f64;
}

/// Always reports zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_seconds(&self) -> f64 {
        0.0
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDiagnostics {
    pub agent: usize,
    pub b0: f64,
    /// Chosen `b_i` (or `a_i` under family C).
    pub rate: f64,
    pub risk_bound: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDiagnostics {
    pub u: [f64; 2],
    pub agents: Vec<AgentDiagnostics>,
    pub s: f64,
    /// Max over nearby agents of the per-agent bound; `p_e` when none.
    pub max_risk_bound: f64,
    pub feasible_without_slack: bool,
    pub status: QpStatus,
    /// The solver failed and the fallback input was applied.
    pub solver_error: bool,
    pub iterations: usize,
    pub solve_time: f64,
    pub clf_value: f64,
}

impl ControlDiagnostics {
    pub fn n_active(&self) -> usize {
        self.agents.len()
    }
}

/// Solves the tick's program and reads back input, rates and risk bounds.
///
/// On solver failure the input falls back to `(u1_lo, 0)` and
/// `solver_error` is set; every agent's bound is then reported as 1.
pub fn control_step(
    ego: &TransformedEgo,
    agents: &[AgentInput],
    ctx: &TickContext<'_>,
    warm: Option<&WarmStart>,
    clock: &dyn Clock,
) -> Result<(ControlDiagnostics, Option<WarmStart>)> {
    let nearby = nearby_agents(ego, agents, ctx.cfg.proximity_radius);
    let program = assemble_program(ego, &nearby, ctx)?;
    let settings = ctx.cfg.qp_settings();

    let start = clock.now_seconds();
    let sol = match warm {
        Some(w) if w.z.len() == program.layout.n_vars() => qp_solve_warm(&program.qp, &settings, w)?,
        _ => qp_solve(&program.qp, &settings)?,
    };
    let solve_time = clock.now_seconds() - start;

    let p_e = ctx.barrier.budget.p_e();
    let horizon = ctx.barrier.horizon;
    if sol.status != QpStatus::Optimal {
        let agents = program
            .barrier_rows
            .iter()
            .zip(&program.conditions)
            .map(|(row, cond)| AgentDiagnostics {
                agent: row.meta.agent,
                b0: row.meta.b0,
                rate: f64::NAN,
                risk_bound: 1.0,
                degenerate: cond.bound.degenerate(),
            })
            .collect();
        let diag = ControlDiagnostics {
            u: [ctx.cfg.u_bounds.lo[0], 0.0],
            agents,
            s: 0.0,
            max_risk_bound: 1.0,
            feasible_without_slack: false,
            status: sol.status,
            solver_error: true,
            iterations: sol.iterations,
            solve_time,
            clf_value: program.clf.v,
        };
        return Ok((diag, None));
    }

    let z = &sol.z;
    let s = z[program.layout.slack].max(0.0);
    let mut max_risk = p_e;
    let mut agent_diag = Vec::with_capacity(nearby.len());
    for (j, (row, cond)) in program.barrier_rows.iter().zip(&program.conditions).enumerate() {
        let rate = z[program.layout.rates[j]];
        let degenerate = cond.bound.degenerate();
        let risk = if degenerate {
            1.0
        } else {
            implied_risk_bound(program.family, row.meta.b0, rate, horizon, p_e)
        };
        max_risk = max_risk.max(risk);
        agent_diag.push(AgentDiagnostics {
            agent: row.meta.agent,
            b0: row.meta.b0,
            rate,
            risk_bound: risk,
            degenerate,
        });
    }
    let diag = ControlDiagnostics {
        u: [z[0], z[1]],
        agents: agent_diag,
        s,
        max_risk_bound: max_risk,
        feasible_without_slack: s <= SLACK_TOL && !program.has_degenerate_condition(),
        status: sol.status,
        solver_error: false,
        iterations: sol.iterations,
        solve_time,
        clf_value: program.clf.v,
    };
    Ok((diag, Some(WarmStart::from(&sol))))
}

/// Does the unrelaxed bound hold at zero slack? Used only for reporting.
pub fn condition_feasible(bound: &ConditionBound) -> bool {
    bound.feasible()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{NormBall, RiskBudget, UnsafeSetSpec};
    use crate::dynamics::{traffic_drift, NearIdentityTransform, TrafficParams};
    use approx::assert_abs_diff_eq;

    fn barrier_spec() -> BarrierSpec {
        let set = UnsafeSetSpec::NormBall(NormBall::ego_agent(0.3).unwrap());
        BarrierSpec::new(1.0, 0.55, set, 1.0, RiskBudget::new(0.1, 0.01).unwrap()).unwrap()
    }

    fn agent(id: usize, x: f64, y: f64, v: f64, ego_p: [f64; 2]) -> AgentInput {
        let x_hat = DVector::from_row_slice(&[x, y, v]);
        let f = traffic_drift(&[x, y, v], Some(&ego_p), &TrafficParams::default());
        AgentInput {
            x_hat,
            terms: AgentTerms {
                id,
                drift: DVector::from_row_slice(&f),
                gain: DMatrix::from_row_slice(3, 2, &[0.5, 0.0, 0.0, 0.5, 0.05, 0.0]),
                c: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
                d: DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.2]),
            },
        }
    }

    fn ego(x: [f64; 3]) -> TransformedEgo {
        NearIdentityTransform::new(0.05).unwrap().forward(&x)
    }

    const GOAL: Goal = Goal {
        center: [20.0, 0.0],
        radius: 0.5,
    };

    #[test]
    fn clf_examples() {
        let at_goal = TransformedEgo {
            state: [20.0, 0.0, 0.0],
            ..ego([0.0; 3])
        };
        let row = clf_constraint_row(&at_goal, &GOAL, &ClfConfig::default()).unwrap();
        assert_eq!(row.u_coeffs, [0.0, 0.0]);
        assert_eq!(row.rhs, 0.0);
        let west = clf_constraint_row(&ego([0.0; 3]), &GOAL, &ClfConfig::default()).unwrap();
        assert!(west.u_coeffs[0] < 0.0);
    }

    #[test]
    fn clf_row_matches_finite_difference() {
        let tr = NearIdentityTransform::new(0.05).unwrap();
        let x = [1.0, -0.5, 0.4];
        let u = [1.3, 0.2];
        let goal = Goal {
            center: [6.0, 2.0],
            radius: 0.5,
        };
        let row = clf_constraint_row(&tr.forward(&x), &goal, &ClfConfig::default()).unwrap();
        let v_dot = row.u_coeffs[0] * u[0] + row.u_coeffs[1] * u[1];
        let h = 1e-6;
        let v_at = |x: [f64; 3]| {
            let p = tr.forward(&x).position();
            (p[0] - goal.center[0]).powi(2) + (p[1] - goal.center[1]).powi(2)
        };
        let step = |sign: f64| {
            let d = crate::dynamics::unicycle_rhs(&x, &u);
            [x[0] + sign * h * d[0], x[1] + sign * h * d[1], x[2] + sign * h * d[2]]
        };
        let fd = (v_at(step(1.0)) - v_at(step(-1.0))) / (2.0 * h);
        assert!((fd - v_dot).abs() < 1e-4 * v_dot.abs().max(1.0));
    }

    #[test]
    fn no_agents_gives_reference_input() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        // Goal straight ahead: u_ref already satisfies the CLF at δ ≥ 0.
        let goal = Goal {
            center: [1.0, 0.0],
            radius: 0.5,
        };
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &goal,
            cfg: &cfg,
        };
        let e = ego([0.0; 3]);
        let prog = assemble_program(&e, &[], &ctx).unwrap();
        assert_eq!(prog.layout.n_vars(), 4);
        let (diag, _) = control_step(&e, &[], &ctx, None, &NoClock).unwrap();
        assert!(diag.feasible_without_slack);
        let clf = clf_constraint_row(&e, &goal, &cfg.clf).unwrap();
        if clf.u_coeffs[0] * 1.1 <= clf.rhs {
            assert_abs_diff_eq!(diag.u[0], 1.1, epsilon = 1e-8);
            assert_abs_diff_eq!(diag.u[1], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn three_agent_structure() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &GOAL,
            cfg: &cfg,
        };
        let e = ego([0.0; 3]);
        let p = [0.0, 0.0];
        let agents = [
            agent(0, 2.0, 0.0, 1.0, p),
            agent(1, 0.5, 1.8, 1.0, p),
            agent(2, -1.5, -1.0, 1.0, p),
        ];
        let nearby = nearby_agents(&e, &agents, cfg.proximity_radius);
        assert_eq!(nearby.len(), 3);
        let prog = assemble_program(&e, &nearby, &ctx).unwrap();
        assert_eq!(prog.layout.n_vars(), 7);
        let kinds: Vec<RowKind> = prog.rows_meta.iter().map(|r| r.kind).collect();
        assert_eq!(kinds.iter().filter(|k| **k == RowKind::Barrier).count(), 3);
        assert_eq!(kinds.iter().filter(|k| **k == RowKind::Condition).count(), 3);
        assert_eq!(kinds.iter().filter(|k| **k == RowKind::Clf).count(), 1);
        // Barrier and condition rows of an agent share its rate variable.
        for (j, &r) in prog.layout.rates.iter().enumerate() {
            let rows: Vec<usize> = (0..prog.qp.n_rows()).filter(|&i| prog.qp.a[(i, r)] != 0.0).collect();
            assert_eq!(rows.len(), 2, "agent {j}");
        }
    }

    #[test]
    fn far_agent_leaves_input_at_clf_optimum() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &GOAL,
            cfg: &cfg,
        };
        let e = ego([0.0; 3]);
        let far = agent(0, -2.4, 0.0, 1.0, [0.0, 0.0]);
        let (with, _) = control_step(&e, &[far], &ctx, None, &NoClock).unwrap();
        let (without, _) = control_step(&e, &[], &ctx, None, &NoClock).unwrap();
        assert!(with.agents[0].b0 < 1e-2);
        assert!(with.agents[0].rate.abs() < 1e-9);
        assert!((with.u[0] - without.u[0]).abs() < 1e-6 && (with.u[1] - without.u[1]).abs() < 1e-6);
        assert!(with.feasible_without_slack);
    }

    #[test]
    fn mirrored_scene_has_zero_steering() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        let goal = Goal {
            center: [20.0, 0.0],
            radius: 0.5,
        };
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &goal,
            cfg: &cfg,
        };
        // l shifts p̄ along x only at θ = 0, so the scene stays mirror
        // symmetric about y = 0.
        let e = ego([0.0; 3]);
        let p = [0.0, 0.0];
        let agents = [agent(0, 1.2, 0.9, 0.8, p), agent(1, 1.2, -0.9, 0.8, p)];
        let (diag, _) = control_step(&e, &agents, &ctx, None, &NoClock).unwrap();
        assert!(!diag.solver_error);
        assert!(diag.u[1].abs() < 1e-7, "{:?}", diag.u);
    }

    /// Bisection on the smallest pinned slack that keeps the program feasible.
    fn bisect_min_slack(prog: &ProgramInstance) -> f64 {
        let feasible_at = |s: f64| {
            let mut qp = prog.qp.clone();
            qp.lo[prog.layout.slack] = s;
            qp.hi[prog.layout.slack] = s;
            qp_solve(&qp, &QpSettings::default()).unwrap().status == QpStatus::Optimal
        };
        if feasible_at(0.0) {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while !feasible_at(hi) {
            hi *= 2.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible_at(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn blocked_agent_forces_minimal_slack() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &GOAL,
            cfg: &cfg,
        };
        let e = ego([0.0; 3]);
        // Slow agent just ahead inside the inflated set.
        let blocker = agent(0, 0.75, 0.0, 0.2, [0.0, 0.0]);
        let nearby = [&blocker];
        let prog = assemble_program(&e, &nearby, &ctx).unwrap();
        let (diag, _) = control_step(&e, core::slice::from_ref(&blocker), &ctx, None, &NoClock).unwrap();
        assert!(diag.s > SLACK_TOL);
        assert!(diag.max_risk_bound > 0.1);
        assert!(!diag.feasible_without_slack);
        let s_min = bisect_min_slack(&prog);
        assert!(
            (diag.s - s_min).abs() <= 10.0 * 1e-8 * s_min.max(1.0),
            "{} vs {}",
            diag.s,
            s_min
        );
    }

    #[test]
    fn rate_weight_is_monotone() {
        let b = barrier_spec();
        let e = ego([0.0; 3]);
        let p = [0.0, 0.0];
        let agents = [agent(0, 1.6, 0.4, 0.9, p)];
        let mut last = f64::INFINITY;
        for w in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let cfg = ControllerConfig {
                rate_weight: w,
                ..ControllerConfig::default()
            };
            let ctx = TickContext {
                barrier: &b,
                epsilon: 0.5,
                goal: &GOAL,
                cfg: &cfg,
            };
            let (diag, _) = control_step(&e, &agents, &ctx, None, &NoClock).unwrap();
            let rate = diag.agents[0].rate;
            assert!(rate <= last + 1e-9, "w_b {w}: {rate} > {last}");
            last = rate;
        }
    }

    #[test]
    fn unrelaxed_program_matches_relaxed_when_feasible() {
        let b = barrier_spec();
        let e = ego([0.0, 0.0, 0.1]);
        let p = [0.0, 0.0];
        let agents = [agent(0, 2.3, 0.3, 0.9, p), agent(1, -1.5, 1.7, 1.1, p)];
        let relaxed = ControllerConfig::default();
        let strict = ControllerConfig {
            slack_mode: SlackMode::Disabled,
            ..ControllerConfig::default()
        };
        let run = |cfg: &ControllerConfig| {
            let ctx = TickContext {
                barrier: &b,
                epsilon: 0.5,
                goal: &GOAL,
                cfg,
            };
            control_step(&e, &agents, &ctx, None, &NoClock).unwrap().0
        };
        let a = run(&strict);
        let c = run(&relaxed);
        assert_eq!(a.status, QpStatus::Optimal);
        assert!(c.s <= SLACK_TOL);
        assert!((a.u[0] - c.u[0]).abs() <= 1e-6 && (a.u[1] - c.u[1]).abs() <= 1e-6);
    }

    #[test]
    fn family_c_program_solves() {
        let b = barrier_spec();
        let cfg = ControllerConfig {
            family: ConditionFamily::C { b: 0.05 },
            ..ControllerConfig::default()
        };
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &GOAL,
            cfg: &cfg,
        };
        let e = ego([0.0; 3]);
        let agents = [agent(0, 2.0, 0.6, 1.0, [0.0, 0.0])];
        let (diag, _) = control_step(&e, &agents, &ctx, None, &NoClock).unwrap();
        assert_eq!(diag.status, QpStatus::Optimal);
        assert!(diag.agents[0].rate >= 0.0);
    }

    #[test]
    fn applied_input_is_admissible() {
        let b = barrier_spec();
        let cfg = ControllerConfig::default();
        let ctx = TickContext {
            barrier: &b,
            epsilon: 0.5,
            goal: &GOAL,
            cfg: &cfg,
        };
        for i in 0..20 {
            let th = -1.0 + 0.1 * i as f64;
            let e = ego([0.0, 0.0, th]);
            let agents = [agent(0, 1.0, 0.3 * th, 0.5, [0.0, 0.0])];
            let (diag, _) = control_step(&e, &agents, &ctx, None, &NoClock).unwrap();
            assert!(cfg.u_bounds.contains(&diag.u, 1e-12), "{:?}", diag.u);
        }
    }
}
