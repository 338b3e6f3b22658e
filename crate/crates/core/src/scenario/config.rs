//! Scenario configuration and the models derived from it.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::barrier::{
    safety_margin, BarrierSpec, Margin, MarginMode, NormBall, RiskBudget, UnsafeSetSpec, DEFAULT_CEILING,
};
use crate::controller::{ControllerConfig, Goal};
use crate::dynamics::{position_selector, MeasurementModel, NearIdentityTransform, TrafficAgent, TrafficParams};
use crate::error::{Error, Result};
use crate::estimator::EkfConfig;

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSection {
    /// Integration and control period (s).
    pub dt: f64,
    pub traffic: TrafficParams,
    /// Near-identity offset `l`.
    pub transform_offset: f64,
    /// Diagonal of `D` in `z = C x + D dv/dt`.
    pub measurement_d: [f64; 2],
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            traffic: TrafficParams::default(),
            transform_offset: 0.05,
            measurement_d: [0.25, 0.2],
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSection {
    /// Error bound ε used by the safety margin.
    pub epsilon: f64,
    /// Probability that the error leaves the ε-ball.
    pub p_e: f64,
    /// Velocity variance of the filter prior.
    pub prior_velocity_variance: f64,
    /// Seconds the filters run before the controller starts.
    pub warmup: f64,
    pub max_gain_step: f64,
    pub max_substeps: usize,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            p_e: 0.01,
            prior_velocity_variance: 0.1,
            warmup: 3.0,
            max_gain_step: 0.25,
            max_substeps: 1000,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSection {
    pub alpha: f64,
    pub margin: MarginMode,
    /// Collision radius `r_u`; the barrier uses `r_u + l`.
    pub r_u: f64,
    /// Risk horizon `T` (s).
    pub horizon: f64,
    pub p_bar: f64,
    pub ceiling: f64,
}

impl Default for BarrierSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            margin: MarginMode::Analytic,
            r_u: 0.25,
            horizon: 1.0,
            p_bar: 0.1,
            ceiling: DEFAULT_CEILING,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGeometry {
    pub count: usize,
    pub width: f64,
    /// Goal centre along the road; the goal sits on the top lane's centre line.
    pub goal_x: f64,
    pub goal_radius: f64,
}

impl Default for LaneGeometry {
    fn default() -> Self {
        Self {
            count: 3,
            width: 3.0,
            goal_x: 30.0,
            goal_radius: 1.0,
        }
    }
}

impl LaneGeometry {
    pub fn center(&self, lane: usize) -> f64 {
        lane as f64 * self.width
    }

    pub fn goal(&self) -> Goal {
        Goal {
            center: [self.goal_x, self.center(self.count.saturating_sub(1))],
            radius: self.goal_radius,
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSection {
    /// Simulated time after warm-up (s).
    pub duration: f64,
    pub lanes: LaneGeometry,
    /// Initial agent positions at `t = 0`.
    pub agents: Vec<[f64; 2]>,
    /// Variance of the initial agent velocities around `v_d`.
    pub initial_velocity_variance: f64,
    /// `x_r(0) = [p_x, p_y, θ]`.
    pub ego_init: [f64; 3],
    pub stop_at_goal: bool,
    /// Scales the sampled measurement noise; the filter still assumes `D`.
    pub measurement_noise_scale: f64,
    /// Consecutive solver failures that end the run.
    pub max_solver_failures: usize,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let lanes = LaneGeometry::default();
        let agents = default_agent_layout(&lanes);
        Self {
            duration: 20.0,
            lanes,
            agents,
            initial_velocity_variance: 0.1,
            ego_init: [0.0, 0.0, 0.0],
            stop_at_goal: true,
            measurement_noise_scale: 1.0,
            max_solver_failures: 10,
        }
    }
}

/// Fifteen agents on three lanes, 8 m apart within a lane and staggered by
/// half a gap between neighbouring lanes. The slot at the ego's start is left
/// empty.
pub fn default_agent_layout(lanes: &LaneGeometry) -> Vec<[f64; 2]> {
    let rows: [&[f64]; 3] = [
        &[-16.0, -8.0, 8.0, 16.0, 24.0],
        &[-12.0, -4.0, 4.0, 12.0, 20.0],
        &[-16.0, -8.0, 0.0, 8.0, 16.0],
    ];
    let mut out = Vec::new();
    for (lane, xs) in rows.iter().enumerate() {
        for &x in xs.iter() {
            out.push([x, lanes.center(lane)]);
        }
    }
    out
}

/// Full configuration of a highway run. The seed is passed separately.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioConfig {
    pub dynamics: DynamicsSection,
    pub estimator: EstimatorSection,
    pub barrier: BarrierSection,
    pub controller: ControllerConfig,
    pub scenario: LayoutSection,
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(alloc::format!("{what} must be positive and finite")))
    }
}

fn nonnegative(v: f64, what: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(alloc::format!("{what} must be nonnegative and finite")))
    }
}

impl ScenarioConfig {
    pub fn n_agents(&self) -> usize {
        self.scenario.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dynamics;
        positive(d.dt, "dynamics.dt")?;
        d.traffic.validate()?;
        positive(d.transform_offset, "dynamics.transform_offset")?;
        for v in d.measurement_d {
            positive(v, "dynamics.measurement_d")?;
        }

        let e = &self.estimator;
        nonnegative(e.epsilon, "estimator.epsilon")?;
        positive(e.prior_velocity_variance, "estimator.prior_velocity_variance")?;
        nonnegative(e.warmup, "estimator.warmup")?;
        positive(e.max_gain_step, "estimator.max_gain_step")?;
        if e.max_substeps == 0 {
            return Err(Error::config("estimator.max_substeps must be at least 1"));
        }

        let b = &self.barrier;
        positive(b.alpha, "barrier.alpha")?;
        positive(b.r_u, "barrier.r_u")?;
        positive(b.horizon, "barrier.horizon")?;
        if !(b.ceiling > 1.0) {
            return Err(Error::config("barrier.ceiling must exceed 1"));
        }
        RiskBudget::new(b.p_bar, e.p_e)?;

        self.controller.validate()?;

        let s = &self.scenario;
        positive(s.duration, "scenario.duration")?;
        if s.lanes.count == 0 {
            return Err(Error::config("scenario.lanes.count must be at least 1"));
        }
        positive(s.lanes.width, "scenario.lanes.width")?;
        positive(s.lanes.goal_radius, "scenario.lanes.goal_radius")?;
        if !s.lanes.goal_x.is_finite() {
            return Err(Error::config("scenario.lanes.goal_x must be finite"));
        }
        nonnegative(s.initial_velocity_variance, "scenario.initial_velocity_variance")?;
        nonnegative(s.measurement_noise_scale, "scenario.measurement_noise_scale")?;
        if s.ego_init.iter().any(|v| !v.is_finite()) || s.agents.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("scenario positions must be finite"));
        }
        if s.max_solver_failures == 0 {
            return Err(Error::config("scenario.max_solver_failures must be at least 1"));
        }
        Ok(())
    }

    /// Number of control ticks after warm-up.
    pub fn n_steps(&self) -> usize {
        libm::round(self.scenario.duration / self.dynamics.dt) as usize
    }

    pub fn n_warmup(&self) -> usize {
        libm::round(self.estimator.warmup / self.dynamics.dt) as usize
    }

    /// Horizon `T` in steps.
    pub fn horizon_steps(&self) -> usize {
        libm::round(self.barrier.horizon / self.dynamics.dt).max(1.0) as usize
    }

    /// Validates and builds the derived models.
    pub fn build(&self) -> Result<ScenarioModel> {
        self.validate()?;
        let d = &self.dynamics;
        let transform = NearIdentityTransform::new(d.transform_offset)?;
        let unsafe_set = UnsafeSetSpec::NormBall(NormBall::ego_agent(self.barrier.r_u + d.transform_offset)?);
        let margin = safety_margin(&unsafe_set, self.estimator.epsilon, self.barrier.margin)?;
        let budget = RiskBudget::new(self.barrier.p_bar, self.estimator.p_e)?;
        let mut barrier = BarrierSpec::new(
            self.barrier.alpha,
            margin.h_eps,
            unsafe_set,
            self.barrier.horizon,
            budget,
        )?;
        barrier.ceiling = self.barrier.ceiling;

        let d_mat = DMatrix::from_diagonal(&DVector::from_row_slice(&d.measurement_d));
        let measurement = MeasurementModel::new(position_selector(), d_mat)?;
        let mut ekf = EkfConfig::from_models(&TrafficAgent::new(d.traffic, None), &measurement)?;
        ekf.max_gain_step = self.estimator.max_gain_step;
        ekf.max_substeps = self.estimator.max_substeps;

        Ok(ScenarioModel {
            transform,
            barrier,
            margin,
            measurement,
            ekf,
            goal: self.scenario.lanes.goal(),
        })
    }
}

/// Objects derived once per configuration.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    pub transform: NearIdentityTransform,
    pub barrier: BarrierSpec,
    pub margin: Margin,
    pub measurement: MeasurementModel,
    pub ekf: EkfConfig,
    pub goal: Goal,
}
