//! Monte Carlo estimates of the collision probability over `[t, t + T]`.
//!
//! Agents interact with the ego but not with each other, so with the ego
//! path fixed each agent can be rolled out on its own; rollout `r` counts
//! as a hit if any agent's `r`-th path enters the unsafe set.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{traffic_em_step, unicycle_rhs, NearIdentityTransform, TrafficParams};
use crate::error::{Error, Result};
use crate::noise::mix_seed;

use super::config::ScenarioConfig;
use super::sim::{Simulation, SimulationTrace};

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub n_rollouts: usize,
    /// Width of the Brownian envelope used to skip agents that cannot reach
    /// the ego, in standard deviations of `W(T)`.
    pub screen_sigmas: f64,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            n_rollouts: 1000,
            screen_sigmas: 6.0,
            seed: 0x5eed,
        }
    }
}

impl McSettings {
    fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 {
            return Err(Error::config("n_rollouts must be positive"));
        }
        if !(self.screen_sigmas > 0.0) {
            return Err(Error::config("screen_sigmas must be positive"));
        }
        Ok(())
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub k: usize,
    pub t: f64,
    pub hits: usize,
    pub n: usize,
    /// Agents that survived the reach screen and were rolled out.
    pub agents_simulated: usize,
}

impl RiskEstimate {
    pub fn p_hat(&self) -> f64 {
        self.hits as f64 / self.n as f64
    }
}

/// Ego positions along a recorded trace, extended past its end with the
/// last input.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPath {
    pub p_r: Vec<[f64; 2]>,
    pub p_bar: Vec<[f64; 2]>,
}

impl EgoPath {
    pub fn from_trace(trace: &SimulationTrace, transform: &NearIdentityTransform, extra: usize) -> Self {
        let mut p_r = Vec::with_capacity(trace.records.len() + extra);
        let mut p_bar = Vec::with_capacity(trace.records.len() + extra);
        for r in &trace.records {
            p_r.push([r.x_r[0], r.x_r[1]]);
            p_bar.push(r.p_bar);
        }
        if let Some(last) = trace.records.last() {
            let mut x = last.x_r;
            for _ in 0..extra {
                let f = unicycle_rhs(&x, &last.u);
                for i in 0..3 {
                    x[i] += trace.dt * f[i];
                }
                p_r.push([x[0], x[1]]);
                p_bar.push(transform.forward(&x).position());
            }
        }
        Self { p_r, p_bar }
    }
}

/// Is `p_o` inside the unsafe ball around `p̄_r`?
#[inline]
pub fn in_unsafe_set(p_bar: &[f64; 2], x_o: &[f64; 3], radius: f64) -> bool {
    let dx = p_bar[0] - x_o[0];
    let dy = p_bar[1] - x_o[1];
    dx * dx + dy * dy <= radius * radius
}

/// `sup { |δ_x| e^{c1 − c2‖δ‖²} : ‖δ‖ ≥ d }`.
fn interaction_bound(params: &TrafficParams, d: f64) -> f64 {
    let peak = 1.0 / libm::sqrt(2.0 * params.c2);
    if d <= peak {
        params.max_interaction()
    } else {
        d * libm::exp(params.c1 - params.c2 * d * d)
    }
}

fn box_distance(p: &[f64; 2], x: (f64, f64), y: (f64, f64)) -> f64 {
    let dx = (x.0 - p[0]).max(p[0] - x.1).max(0.0);
    let dy = (y.0 - p[1]).max(p[1] - y.1).max(0.0);
    libm::sqrt(dx * dx + dy * dy)
}

/// Estimator that replays the ego path of a finished run.
#[derive(Debug, Clone)]
pub struct FrozenRisk<'a> {
    trace: &'a SimulationTrace,
    path: EgoPath,
    params: TrafficParams,
    radius: f64,
    horizon: usize,
    dt: f64,
}

impl<'a> FrozenRisk<'a> {
    pub fn new(cfg: &ScenarioConfig, trace: &'a SimulationTrace) -> Result<Self> {
        let model = cfg.build()?;
        let horizon = cfg.horizon_steps();
        Ok(Self {
            trace,
            path: EgoPath::from_trace(trace, &model.transform, horizon),
            params: cfg.dynamics.traffic,
            radius: cfg.barrier.r_u + cfg.dynamics.transform_offset,
            horizon,
            dt: cfg.dynamics.dt,
        })
    }

    pub fn path(&self) -> &EgoPath {
        &self.path
    }

    /// Conservative test for whether an agent starting at `x0` on tick `k`
    /// can come within the unsafe radius during the window, assuming every
    /// Brownian component stays within `sigmas·√T` of zero.
    ///
    /// Velocity obeys `v − v_d = e^{−s}(v0 − v_d) + ∫e^{−(s−r)}(I dr + g dW)`
    /// with `|I|` bounded by the interaction; the stochastic integral is at
    /// most twice the Brownian sup.
    pub fn may_reach(&self, x0: &[f64; 3], k: usize, sigmas: f64) -> bool {
        let p = &self.params;
        let big_t = self.horizon as f64 * self.dt;
        let sig = p.g_scale * sigmas * libm::sqrt(big_t);
        let dv0 = (x0[2] - p.v_d).abs();
        let mut m = p.max_interaction();
        for _ in 0..6 {
            let dv = dv0 + m + 2.0 * sig;
            let mut d_bar = f64::INFINITY;
            let mut d_r = f64::INFINITY;
            for j in 0..=self.horizon {
                let tau = j as f64 * self.dt;
                let cx = x0[0] + p.v_d * tau;
                let wx = dv * tau + sig;
                let xs = (cx - wx, cx + wx);
                let ys = (x0[1] - sig, x0[1] + sig);
                d_bar = d_bar.min(box_distance(&self.path.p_bar[k + j], xs, ys));
                d_r = d_r.min(box_distance(&self.path.p_r[k + j], xs, ys));
            }
            if d_bar > self.radius {
                return false;
            }
            let next = interaction_bound(p, d_r);
            if next >= m {
                return true;
            }
            m = next;
        }
        true
    }

    /// Rollouts from the recorded true agent states at tick `k`.
    pub fn estimate(&self, k: usize, settings: &McSettings) -> Result<RiskEstimate> {
        settings.validate()?;
        let rec = self
            .trace
            .records
            .get(k)
            .ok_or_else(|| Error::config("tick outside the trace"))?;
        let n = settings.n_rollouts;
        let mut hit = vec![false; n];
        let mut simulated = 0;
        let sd = libm::sqrt(self.dt);
        let tick_seed = mix_seed(settings.seed, k as u64);
        for (i, a) in rec.agents.iter().enumerate() {
            if !self.may_reach(&a.x, k, settings.screen_sigmas) {
                continue;
            }
            simulated += 1;
            for (r, h) in hit.iter_mut().enumerate() {
                if *h {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(tick_seed);
                rng.set_stream(((i as u64) << 32) | r as u64);
                *h = self.rollout(a.x, k, sd, &mut rng);
            }
        }
        Ok(RiskEstimate {
            k,
            t: rec.t,
            hits: hit.iter().filter(|h| **h).count(),
            n,
            agents_simulated: simulated,
        })
    }

    fn rollout(&self, mut x: [f64; 3], k: usize, sd: f64, rng: &mut ChaCha8Rng) -> bool {
        if in_unsafe_set(&self.path.p_bar[k], &x, self.radius) {
            return true;
        }
        for j in 0..self.horizon {
            let dw = [
                sd * rng.sample::<f64, _>(StandardNormal),
                sd * rng.sample::<f64, _>(StandardNormal),
                sd * rng.sample::<f64, _>(StandardNormal),
            ];
            traffic_em_step(&mut x, Some(&self.path.p_r[k + j]), &self.params, self.dt, &dw);
            if in_unsafe_set(&self.path.p_bar[k + j + 1], &x, self.radius) {
                return true;
            }
        }
        false
    }
}

/// Rollouts of the full closed loop: each one clones the simulation,
/// reseeds its noise and runs filters and controller live for `T`.
pub fn live_risk(sim: &Simulation, settings: &McSettings) -> Result<RiskEstimate> {
    settings.validate()?;
    let cfg = sim.config();
    let radius = cfg.barrier.r_u + cfg.dynamics.transform_offset;
    let transform = sim.model().transform;
    let horizon = cfg.horizon_steps();
    let collides = |s: &Simulation| {
        let p_bar = transform.forward(&s.ego()).position();
        s.agent_states().iter().any(|x| in_unsafe_set(&p_bar, x, radius))
    };
    let tick_seed = mix_seed(settings.seed, sim.tick() as u64);
    let mut hits = 0;
    if collides(sim) {
        hits = settings.n_rollouts;
    } else {
        for r in 0..settings.n_rollouts {
            let mut s = sim.clone();
            s.reseed(mix_seed(tick_seed, r as u64));
            s.set_open_ended(true);
            for _ in 0..horizon {
                let out = s.step()?;
                if out.termination.is_some() {
                    break;
                }
                if collides(&s) {
                    hits += 1;
                    break;
                }
            }
        }
    }
    Ok(RiskEstimate {
        k: sim.tick(),
        t: sim.time(),
        hits,
        n: settings.n_rollouts,
        agents_simulated: cfg.n_agents(),
    })
}
