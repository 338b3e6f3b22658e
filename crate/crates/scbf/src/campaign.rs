//! Parallel campaigns: many seeds, many ticks.
//!
//! Each unit of work owns its simulation and noise streams, so results do
//! not depend on the thread count or scheduling order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scbf_core::scenario::{
    epsilon_from_profiles, error_profile, live_risk, run_simulation, CalibrationReport, ErrorProfile, FrozenRisk,
    McSettings, RiskEstimate, ScenarioConfig, Simulation, SimulationTrace,
};

use crate::error::{CliError, Result};
use crate::stats::{clopper_pearson, Interval};
use crate::trace_io::SLACK_ACTIVE_TOL;

/// Confidence level of every reported Monte Carlo interval.
pub const CONFIDENCE: f64 = 0.95;

/// Runs every seed; results come back in seed order.
pub fn simulate_seeds(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<SimulationTrace>> {
    seeds
        .par_iter()
        .map(|&s| run_simulation(cfg, s).map_err(CliError::from))
        .collect()
}

pub fn error_profiles(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<ErrorProfile>> {
    seeds
        .par_iter()
        .map(|&s| error_profile(cfg, s).map_err(CliError::from))
        .collect()
}

pub fn calibrate(cfg: &ScenarioConfig, p_e: f64, seeds: &[u64]) -> Result<CalibrationReport> {
    // Fail before simulating anything.
    let empty = ErrorProfile {
        seed: 0,
        agent_sup: Vec::new(),
        errors: Vec::new(),
        resets: 0,
        failed: false,
    };
    epsilon_from_profiles(&vec![empty; seeds.len()], p_e)?;
    let profiles = error_profiles(cfg, seeds)?;
    Ok(epsilon_from_profiles(&profiles, p_e)?)
}

/// Which ticks of a run to validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickSelection {
    All,
    Every(usize),
    List(Vec<usize>),
}

impl std::str::FromStr for TickSelection {
    type Err = String;

    /// `all`, `every:N`, or a comma-separated list such as `0,50,100`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(n) = s.strip_prefix("every:") {
            return match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Self::Every(n)),
                _ => Err(format!("bad stride in `{s}`")),
            };
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad tick `{t}`")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self::List)
    }
}

impl TickSelection {
    /// Selected ticks among `0..n`, sorted and deduplicated.
    pub fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            Self::All => (0..n).collect(),
            Self::Every(step) => (0..n).step_by(*step).collect(),
            Self::List(v) => {
                let mut v: Vec<usize> = v.iter().copied().filter(|&k| k < n).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

/// How the ego behaves during Monte Carlo rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Replay the recorded ego path.
    Frozen,
    /// Re-run filters and controller inside every rollout.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The Monte Carlo interval is consistent with the analytic bound.
    Pass,
    /// Slack was active: the bound was knowingly exceeded, not checked.
    Slack,
    /// Even the interval's lower end lies above the analytic bound.
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickValidation {
    pub k: usize,
    pub t: f64,
    pub s: f64,
    /// Risk bound the controller reported at this tick.
    pub bound: f64,
    pub hits: usize,
    pub n: usize,
    pub p_hat: f64,
    pub ci: Interval,
    /// The interval's upper end exceeds the target `p̄`.
    pub above_p_bar: bool,
    pub verdict: Verdict,
}

impl TickValidation {
    pub fn new(est: &RiskEstimate, s: f64, bound: f64, p_bar: f64) -> Self {
        let ci = clopper_pearson(est.hits, est.n, CONFIDENCE);
        let verdict = if s > SLACK_ACTIVE_TOL {
            Verdict::Slack
        } else if ci.lo > bound {
            Verdict::Violation
        } else {
            Verdict::Pass
        };
        Self {
            k: est.k,
            t: est.t,
            s,
            bound,
            hits: est.hits,
            n: est.n,
            p_hat: est.p_hat(),
            ci,
            above_p_bar: ci.hi > p_bar,
            verdict,
        }
    }
}

/// Monte Carlo risk at the selected ticks of `trace`.
pub fn validate_trace(
    cfg: &ScenarioConfig,
    trace: &SimulationTrace,
    ticks: &[usize],
    settings: &McSettings,
    policy: Policy,
) -> Result<Vec<TickValidation>> {
    let p_bar = cfg.barrier.p_bar;
    let check = |est: RiskEstimate| {
        let r = &trace.records[est.k];
        TickValidation::new(&est, r.s, r.max_risk_bound, p_bar)
    };
    match policy {
        Policy::Frozen => {
            let frozen = FrozenRisk::new(cfg, trace)?;
            ticks
                .par_iter()
                .map(|&k| Ok(check(frozen.estimate(k, settings)?)))
                .collect()
        }
        Policy::Live => {
            // Replay to each selected tick, then branch.
            let mut sim = Simulation::new(cfg, trace.seed)?;
            let mut branches = Vec::with_capacity(ticks.len());
            for &k in ticks {
                while sim.tick() < k {
                    sim.step()?;
                }
                branches.push(sim.clone());
            }
            branches
                .par_iter()
                .map(|s| Ok(check(live_risk(s, settings)?)))
                .collect()
        }
    }
}
