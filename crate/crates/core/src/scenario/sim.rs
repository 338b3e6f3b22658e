//! Closed-loop highway simulation.

use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::barrier::AgentTerms;
use crate::controller::{control_step, AgentInput, Clock, NoClock, TickContext};
use crate::dynamics::{dvec, traffic_drift, traffic_em_step, unicycle_rhs, TrafficAgent, TransformedEgo};
use crate::error::Result;
use crate::estimator::ResettingEkf;
use crate::noise::{stream, NoiseStream};
use crate::qp::{QpStatus, WarmStart};

use super::config::{ScenarioConfig, ScenarioModel};

/// Why a run ended.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Duration,
    Goal {
        t: f64,
    },
    /// A state or estimate stopped being finite.
    IntegrationBlowup {
        t: f64,
    },
    /// Too many consecutive ticks fell back to the default input.
    SolverFailure {
        t: f64,
    },
}

impl Termination {
    /// Truncated runs: blow-ups and persistent solver failures.
    pub fn is_failure(&self) -> bool {
        matches!(self, Self::IntegrationBlowup { .. } | Self::SolverFailure { .. })
    }
}

/// Per-agent slice of a tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRecord {
    /// True state `[p_x, p_y, v]`.
    pub x: [f64; 3],
    pub x_hat: [f64; 3],
    pub p_trace: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// `‖x − x̂‖`.
    pub error: f64,
    /// `ζᵀ P⁻¹ ζ`; NaN if `P` could not be factored.
    pub nees: f64,
    /// The agent had a barrier row this tick.
    pub active: bool,
    /// `B(x̂)`, rate and risk bound; NaN when inactive.
    pub b0: f64,
    pub rate: f64,
    pub risk_bound: f64,
    pub degenerate: bool,
    /// Covariance resets so far.
    pub resets: usize,
}

/// One control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub k: usize,
    pub t: f64,
    pub x_r: [f64; 3],
    /// Transformed position `p̄_r`.
    pub p_bar: [f64; 2],
    pub u: [f64; 2],
    pub s: f64,
    pub max_risk_bound: f64,
    pub n_active: usize,
    pub feasible_without_slack: bool,
    pub goal_reached: bool,
    pub solver_error: bool,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: f64,
    pub clf_value: f64,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub dt: f64,
    pub records: Vec<TickRecord>,
    pub termination: Termination,
    pub goal_time: Option<f64>,
}

impl SimulationTrace {
    /// Ticks whose slack exceeds `tol`.
    pub fn slack_active_ticks(&self, tol: f64) -> Vec<usize> {
        self.records.iter().filter(|r| r.s > tol).map(|r| r.k).collect()
    }

    pub fn max_risk_bound(&self) -> f64 {
        self.records.iter().map(|r| r.max_risk_bound).fold(0.0, f64::max)
    }

    pub fn max_slack(&self) -> f64 {
        self.records.iter().map(|r| r.s).fold(0.0, f64::max)
    }

    /// FNV-1a over every numeric field of every record.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.u64(self.seed);
        h.f64(self.dt);
        for r in &self.records {
            h.u64(r.k as u64);
            h.f64(r.t);
            r.x_r.iter().chain(&r.p_bar).chain(&r.u).for_each(|v| h.f64(*v));
            h.f64(r.s);
            h.f64(r.max_risk_bound);
            h.u64(r.n_active as u64);
            h.u64(r.feasible_without_slack as u64 | (r.goal_reached as u64) << 1 | (r.solver_error as u64) << 2);
            h.u64(r.iterations as u64);
            for a in &r.agents {
                a.x.iter().chain(&a.x_hat).for_each(|v| h.f64(*v));
                for v in [a.p_trace, a.p_min, a.p_max, a.error, a.b0, a.rate, a.risk_bound] {
                    h.f64(v);
                }
                h.u64(a.resets as u64);
            }
        }
        h.0
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
    fn u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn f64(&mut self, v: f64) {
        // All NaNs hash alike.
        self.u64(if v.is_nan() { f64::NAN.to_bits() } else { v.to_bits() });
    }
}

#[derive(Debug, Clone)]
struct AgentSim {
    x: [f64; 3],
    filter: ResettingEkf,
    process: NoiseStream,
    measurement: NoiseStream,
}

/// Result of one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: TickRecord,
    /// Set when this tick ended the run.
    pub termination: Option<Termination>,
}

/// Live simulation state; cheap to clone for Monte Carlo branching.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: Arc<ScenarioConfig>,
    model: Arc<ScenarioModel>,
    /// Control ticks taken since `t = 0`.
    k: usize,
    ego: [f64; 3],
    agents: Vec<AgentSim>,
    warm: Option<WarmStart>,
    failures: usize,
    goal_time: Option<f64>,
    finished: Option<Termination>,
    /// Ignore the duration and goal stops.
    open_ended: bool,
}

impl Simulation {
    /// Samples the initial layout, initialises the filters at `t = −warmup`
    /// and runs the warm-up with the ego cruising at `v_d`.
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        let model = cfg.build()?;
        let dt = cfg.dynamics.dt;
        let params = cfg.dynamics.traffic;
        let n_w = cfg.n_warmup();
        let t_w = n_w as f64 * dt;
        let u_w = [
            params
                .v_d
                .clamp(cfg.controller.u_bounds.lo[0], cfg.controller.u_bounds.hi[0]),
            0.0,
        ];

        let [ex, ey, eth] = cfg.scenario.ego_init;
        let ego = [
            ex - u_w[0] * t_w * libm::cos(eth),
            ey - u_w[0] * t_w * libm::sin(eth),
            eth,
        ];

        let mut setup = NoiseStream::new(seed, stream::SETUP);
        let dd = cfg.dynamics.measurement_d;
        let prior = DMatrix::from_diagonal(&DVector::from_row_slice(&[
            dd[0] * dd[0] / dt,
            dd[1] * dd[1] / dt,
            cfg.estimator.prior_velocity_variance,
        ]));
        let mut agents = Vec::with_capacity(cfg.n_agents());
        for (i, p) in cfg.scenario.agents.iter().enumerate() {
            let v = setup.normal(params.v_d, cfg.scenario.initial_velocity_variance);
            let x = [p[0] - params.v_d * t_w, p[1], v];
            let mut measurement = NoiseStream::new(seed, stream::agent_measurement(i));
            let z = observe(&x, &dd, cfg.scenario.measurement_noise_scale, dt, &mut measurement);
            let mut filter = ResettingEkf::new(model.ekf.clone(), dvec(&[z[0], z[1], params.v_d]), prior.clone())?;
            filter.state.t = -t_w;
            agents.push(AgentSim {
                x,
                filter,
                process: NoiseStream::new(seed, stream::agent_process(i)),
                measurement,
            });
        }

        let mut sim = Self {
            cfg: Arc::new(cfg.clone()),
            model: Arc::new(model),
            k: 0,
            ego,
            agents,
            warm: None,
            failures: 0,
            goal_time: None,
            finished: None,
            open_ended: false,
        };
        for _ in 0..n_w {
            if !sim.advance(u_w)? {
                let t = sim.agents.first().map_or(0.0, |a| a.filter.state.t);
                sim.finished = Some(Termination::IntegrationBlowup { t });
                break;
            }
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ScenarioModel {
        &self.model
    }

    pub fn tick(&self) -> usize {
        self.k
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.cfg.dynamics.dt
    }

    pub fn ego(&self) -> [f64; 3] {
        self.ego
    }

    pub fn agent_states(&self) -> Vec<[f64; 3]> {
        self.agents.iter().map(|a| a.x).collect()
    }

    pub fn estimates(&self) -> Vec<&ResettingEkf> {
        self.agents.iter().map(|a| &a.filter).collect()
    }

    pub fn finished(&self) -> Option<Termination> {
        self.finished
    }

    pub fn goal_time(&self) -> Option<f64> {
        self.goal_time
    }

    /// Replaces every agent's process and measurement stream, so a clone
    /// continues with fresh noise.
    pub fn reseed(&mut self, seed: u64) {
        for (i, a) in self.agents.iter_mut().enumerate() {
            a.process = NoiseStream::new(seed, stream::agent_process(i));
            a.measurement = NoiseStream::new(seed, stream::agent_measurement(i));
        }
    }

    /// Keep stepping past the configured duration and the goal.
    pub fn set_open_ended(&mut self, open: bool) {
        self.open_ended = open;
    }

    /// Samples measurements, integrates agents and filters over one step
    /// with the ego held at its current position, then moves the ego.
    /// Returns `false` on a non-finite state.
    fn advance(&mut self, u: [f64; 2]) -> Result<bool> {
        let dt = self.cfg.dynamics.dt;
        let params = self.cfg.dynamics.traffic;
        let dd = self.cfg.dynamics.measurement_d;
        let scale = self.cfg.scenario.measurement_noise_scale;
        let p_r = [self.ego[0], self.ego[1]];
        let model = TrafficAgent::new(params, Some(p_r));
        let no_input = DVector::zeros(0);
        let mut finite = true;
        for a in &mut self.agents {
            let z = observe(&a.x, &dd, scale, dt, &mut a.measurement);
            let mut dw = [0.0; 3];
            a.process.fill_increment(&mut dw, dt);
            traffic_em_step(&mut a.x, Some(&p_r), &params, dt, &dw);
            a.filter.step(&model, &no_input, &dvec(&z), dt)?;
            finite &= a.x.iter().all(|v| v.is_finite()) && a.filter.state.x_hat.iter().all(|v| v.is_finite());
        }
        let rate = unicycle_rhs(&self.ego, &u);
        for (e, r) in self.ego.iter_mut().zip(rate) {
            *e += dt * r;
        }
        finite &= self.ego.iter().all(|v| v.is_finite());
        Ok(finite)
    }

    /// Transformed ego state at the current tick.
    pub fn transformed_ego(&self) -> TransformedEgo {
        self.model.transform.forward(&self.ego)
    }

    /// What the controller sees this tick: every agent whose estimate lies
    /// within the proximity radius of `p̄_r`.
    pub fn controller_inputs(&self) -> Vec<AgentInput> {
        let cfg = &self.cfg;
        let p_bar = self.transformed_ego().position();
        let p_r = [self.ego[0], self.ego[1]];
        let radius2 = cfg.controller.proximity_radius * cfg.controller.proximity_radius;
        let mut inputs = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            let xh = &a.filter.state.x_hat;
            let (dx, dy) = (xh[0] - p_bar[0], xh[1] - p_bar[1]);
            if dx * dx + dy * dy >= radius2 {
                continue;
            }
            let drift = traffic_drift(&[xh[0], xh[1], xh[2]], Some(&p_r), &cfg.dynamics.traffic);
            inputs.push(AgentInput {
                x_hat: xh.clone(),
                terms: AgentTerms {
                    id: i,
                    drift: dvec(&drift),
                    gain: self.model.ekf.gain(&a.filter.state.p),
                    c: self.model.measurement.c().clone(),
                    d: self.model.measurement.d().clone(),
                },
            });
        }
        inputs
    }

    /// One control tick without timing.
    pub fn step(&mut self) -> Result<StepOutcome> {
        self.step_with_clock(&NoClock)
    }

    pub fn step_with_clock(&mut self, clock: &dyn Clock) -> Result<StepOutcome> {
        let cfg = Arc::clone(&self.cfg);
        let model = Arc::clone(&self.model);
        let dt = cfg.dynamics.dt;
        let t = self.time();
        let ego_t = model.transform.forward(&self.ego);
        let p_r = [self.ego[0], self.ego[1]];
        let p_bar = ego_t.position();

        let inputs = self.controller_inputs();
        let ctx = TickContext {
            barrier: &model.barrier,
            epsilon: cfg.estimator.epsilon,
            goal: &model.goal,
            cfg: &cfg.controller,
        };
        let (diag, warm) = control_step(&ego_t, &inputs, &ctx, self.warm.as_ref(), clock)?;
        self.warm = warm;

        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let st = &a.filter.state;
                let x = dvec(&a.x);
                let eig = st.p.clone().symmetric_eigen().eigenvalues;
                let ad = diag.agents.iter().find(|d| d.agent == i);
                AgentRecord {
                    x: a.x,
                    x_hat: [st.x_hat[0], st.x_hat[1], st.x_hat[2]],
                    p_trace: st.p.trace(),
                    p_min: eig.min(),
                    p_max: eig.max(),
                    error: st.error_norm(&x),
                    nees: st.normalized_error(&x).unwrap_or(f64::NAN),
                    active: ad.is_some(),
                    b0: ad.map_or(f64::NAN, |d| d.b0),
                    rate: ad.map_or(f64::NAN, |d| d.rate),
                    risk_bound: ad.map_or(f64::NAN, |d| d.risk_bound),
                    degenerate: ad.is_some_and(|d| d.degenerate),
                    resets: a.filter.resets,
                }
            })
            .collect();

        let goal_reached = model.goal.contains(&p_r);
        if goal_reached && self.goal_time.is_none() {
            self.goal_time = Some(t);
        }
        self.failures = if diag.solver_error { self.failures + 1 } else { 0 };

        let record = TickRecord {
            k: self.k,
            t,
            x_r: self.ego,
            p_bar,
            u: diag.u,
            s: diag.s,
            max_risk_bound: diag.max_risk_bound,
            n_active: diag.n_active(),
            feasible_without_slack: diag.feasible_without_slack,
            goal_reached,
            solver_error: diag.solver_error,
            status: diag.status,
            iterations: diag.iterations,
            solve_time: diag.solve_time,
            clf_value: diag.clf_value,
            agents,
        };

        let termination = if goal_reached && cfg.scenario.stop_at_goal && !self.open_ended {
            Some(Termination::Goal { t })
        } else if self.failures >= cfg.scenario.max_solver_failures {
            Some(Termination::SolverFailure { t })
        } else if !self.advance(diag.u)? {
            Some(Termination::IntegrationBlowup { t: t + dt })
        } else {
            self.k += 1;
            (self.k >= cfg.n_steps() && !self.open_ended).then_some(Termination::Duration)
        };
        if termination.is_some() {
            self.finished = termination;
        }
        Ok(StepOutcome { record, termination })
    }
}

/// `z = C x + s·D dv/dt` with `C` the position selector and `D` diagonal.
fn observe(x: &[f64; 3], d: &[f64; 2], scale: f64, dt: f64, noise: &mut NoiseStream) -> [f64; 2] {
    let mut dv = [0.0; 2];
    noise.fill_increment(&mut dv, dt);
    [x[0] + scale * d[0] * dv[0] / dt, x[1] + scale * d[1] * dv[1] / dt]
}

/// `‖p_r − x_g‖² ≤ r_g²`.
pub fn goal_check(x_r: &[f64; 3], goal: &crate::controller::Goal) -> bool {
    goal.contains(&[x_r[0], x_r[1]])
}

/// Runs until the duration elapses, the goal is reached (if configured) or
/// the run fails.
pub fn run_simulation(cfg: &ScenarioConfig, seed: u64) -> Result<SimulationTrace> {
    run_simulation_with_clock(cfg, seed, &NoClock)
}

pub fn run_simulation_with_clock(cfg: &ScenarioConfig, seed: u64, clock: &dyn Clock) -> Result<SimulationTrace> {
    let mut sim = Simulation::new(cfg, seed)?;
    let mut records = Vec::with_capacity(cfg.n_steps());
    let termination = loop {
        if let Some(t) = sim.finished() {
            break t;
        }
        let out = sim.step_with_clock(clock)?;
        records.push(out.record);
        if let Some(t) = out.termination {
            break t;
        }
    };
    Ok(SimulationTrace {
        seed,
        dt: cfg.dynamics.dt,
        records,
        termination,
        goal_time: sim.goal_time(),
    })
}
