//! The highway lane-change case study: fifteen traffic agents on three
//! lanes, an ego unicycle driven through the near-identity transform, one
//! EKF per agent and the risk-bounded controller in closed loop.

mod calibration;
mod config;
mod monte_carlo;
mod sim;

pub use calibration::{
    calibrate_epsilon, coverage, empirical_quantile, epsilon_from_profiles, error_profile, CalibrationReport, Coverage,
    ErrorProfile, QuantileRow, QUANTILE_LEVELS,
};
pub use config::{
    default_agent_layout, BarrierSection, DynamicsSection, EstimatorSection, LaneGeometry, LayoutSection,
    ScenarioConfig, ScenarioModel,
};
pub use monte_carlo::{in_unsafe_set, live_risk, EgoPath, FrozenRisk, McSettings, RiskEstimate};
pub use sim::{
    goal_check, run_simulation, run_simulation_with_clock, AgentRecord, Simulation, SimulationTrace, StepOutcome,
    Termination, TickRecord,
};
