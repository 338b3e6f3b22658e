//! Empirical calibration of the estimation error bound ε.

use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::config::ScenarioConfig;
use super::sim::{run_simulation, SimulationTrace};

/// Estimation errors of one closed-loop run, control ticks only.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub seed: u64,
    /// `sup_t ‖x_i − x̂_i‖` for each agent.
    pub agent_sup: Vec<f64>,
    /// Every `‖x_i(t_k) − x̂_i(t_k)‖`, tick-major.
    pub errors: Vec<f64>,
    pub resets: usize,
    pub failed: bool,
}

impl ErrorProfile {
    pub fn from_trace(trace: &SimulationTrace) -> Self {
        let n_agents = trace.records.first().map_or(0, |r| r.agents.len());
        let mut agent_sup = alloc::vec![0.0_f64; n_agents];
        let mut errors = Vec::with_capacity(trace.records.len() * n_agents);
        for r in &trace.records {
            for (i, a) in r.agents.iter().enumerate() {
                agent_sup[i] = agent_sup[i].max(a.error);
                errors.push(a.error);
            }
        }
        let resets = trace
            .records
            .last()
            .map_or(0, |r| r.agents.iter().map(|a| a.resets).sum());
        Self {
            seed: trace.seed,
            agent_sup,
            errors,
            resets,
            failed: trace.termination.is_failure(),
        }
    }

    /// Largest error over agents and ticks.
    pub fn run_sup(&self) -> f64 {
        self.agent_sup.iter().copied().fold(0.0, f64::max)
    }
}

pub fn error_profile(cfg: &ScenarioConfig, seed: u64) -> Result<ErrorProfile> {
    Ok(ErrorProfile::from_trace(&run_simulation(cfg, seed)?))
}

/// Order-statistic quantile: the smallest sample with at least a `q` share
/// of the samples at or below it.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    let rank = libm::ceil(q * n as f64) as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub const QUANTILE_LEVELS: [f64; 6] = [0.5, 0.9, 0.95, 0.99, 0.999, 1.0];

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRow {
    pub level: f64,
    /// Quantile of the per-run sup error.
    pub run_sup: f64,
    /// Quantile of the pooled per-tick errors.
    pub per_step: f64,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub epsilon: f64,
    pub p_e: f64,
    pub n_runs: usize,
    pub failed_runs: usize,
    pub total_resets: usize,
    pub quantiles: Vec<QuantileRow>,
    /// Coverage of the calibrated ε on the calibration runs themselves.
    pub coverage: Coverage,
}

/// How often errors stay within a given ε.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub epsilon: f64,
    /// Share of (tick, agent) samples with error ≤ ε.
    pub per_step: f64,
    /// Share of runs whose sup error exceeds ε.
    pub runs_exceeding: f64,
    /// Share of (run, agent) pairs whose sup error exceeds ε.
    pub agent_runs_exceeding: f64,
}

pub fn coverage(profiles: &[ErrorProfile], epsilon: f64) -> Coverage {
    let (mut inside, mut total) = (0usize, 0usize);
    let (mut pairs_out, mut pairs) = (0usize, 0usize);
    let mut runs_out = 0usize;
    for p in profiles {
        total += p.errors.len();
        inside += p.errors.iter().filter(|e| **e <= epsilon).count();
        pairs += p.agent_sup.len();
        pairs_out += p.agent_sup.iter().filter(|s| **s > epsilon).count();
        runs_out += (p.run_sup() > epsilon) as usize;
    }
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Coverage {
        epsilon,
        per_step: ratio(inside, total),
        runs_exceeding: ratio(runs_out, profiles.len()),
        agent_runs_exceeding: ratio(pairs_out, pairs),
    }
}

/// ε is the `(1 − p_e)` quantile of the per-run sup error, so at most a
/// `p_e` share of the calibration runs ever leaves the ε-ball.
pub fn epsilon_from_profiles(profiles: &[ErrorProfile], p_e: f64) -> Result<CalibrationReport> {
    if !(p_e > 0.0 && p_e < 1.0) {
        return Err(Error::config("p_e must lie in (0, 1)"));
    }
    let n = profiles.len();
    if (n as f64) * p_e < 1.0 {
        return Err(Error::config(alloc::format!(
            "calibration needs at least {} runs for p_e = {p_e}",
            libm::ceil(1.0 / p_e) as usize
        )));
    }
    let mut sups: Vec<f64> = profiles.iter().map(ErrorProfile::run_sup).collect();
    sups.sort_by(f64::total_cmp);
    let mut steps: Vec<f64> = profiles.iter().flat_map(|p| p.errors.iter().copied()).collect();
    steps.sort_by(f64::total_cmp);
    let epsilon = empirical_quantile(&sups, 1.0 - p_e);
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&level| QuantileRow {
            level,
            run_sup: empirical_quantile(&sups, level),
            per_step: empirical_quantile(&steps, level),
        })
        .collect();
    Ok(CalibrationReport {
        epsilon,
        p_e,
        n_runs: n,
        failed_runs: profiles.iter().filter(|p| p.failed).count(),
        total_resets: profiles.iter().map(|p| p.resets).sum(),
        quantiles,
        coverage: coverage(profiles, epsilon),
    })
}

/// Sequential calibration over `seeds`.
pub fn calibrate_epsilon(cfg: &ScenarioConfig, p_e: f64, seeds: &[u64]) -> Result<CalibrationReport> {
    let profiles = seeds
        .iter()
        .map(|&s| error_profile(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    epsilon_from_profiles(&profiles, p_e)
}
