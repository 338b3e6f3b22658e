//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, even when all pass.
//!
//! `cargo test --release -p scbf --test acceptance` is much faster than a
//! debug build; criterion 1 dominates the runtime.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitBall, UnitCircle, UnitSphere};

use scbf::campaign::{validate_trace, Policy};
use scbf_core::barrier::{
    barrier_eval, condition_bounds, implied_crossing_bound, safety_margin, BarrierSpec, ConditionBound,
    ConditionFamily, MarginMode, NormBall, RiskBudget, UnsafeSetSpec,
};
use scbf_core::controller::{
    assemble_program, clf_constraint_row, nearby_agents, ClfConfig, Goal, SlackMode, TickContext,
};
use scbf_core::dynamics::{unicycle_rhs, DynamicsModel, NearIdentityTransform};
use scbf_core::estimator::{ekf_init, ekf_step, EkfConfig};
use scbf_core::qp::{qp_solve, QpSettings, QpStatus};
use scbf_core::scenario::{
    coverage, epsilon_from_profiles, run_simulation, ErrorProfile, McSettings, ScenarioConfig, Simulation, TickRecord,
};
use scbf_core::{DMatrix, DVector};

const SLACK_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// Smallest covariance eigenvalue seen across every acceptance run.
#[derive(Default)]
struct PsdLog {
    runs: usize,
    ticks: usize,
    min_eig: f64,
    failures: usize,
}

impl PsdLog {
    fn record(&mut self, records: &[TickRecord]) {
        if self.runs == 0 {
            self.min_eig = f64::INFINITY;
        }
        self.runs += 1;
        for r in records {
            self.ticks += 1;
            for a in &r.agents {
                self.min_eig = self.min_eig.min(a.p_min);
                self.failures += !(a.p_min > 0.0) as usize;
            }
        }
    }
}

fn adversarial() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.scenario.lanes.width = 2.5;
    cfg
}

fn criterion_1(psd: &mut PsdLog) -> Outcome {
    let cfg = ScenarioConfig::default();
    let settings = McSettings::default();
    let p_bar = cfg.barrier.p_bar;
    let (mut checked, mut skipped, mut over) = (0usize, 0usize, 0usize);
    let mut worst = (0.0_f64, 0u64, 0usize);
    let mut max_hits = 0usize;
    for seed in 0..20u64 {
        let trace = run_simulation(&cfg, seed).expect("simulation");
        psd.record(&trace.records);
        let ticks: Vec<usize> = trace.records.iter().filter(|r| r.s <= SLACK_TOL).map(|r| r.k).collect();
        skipped += trace.records.len() - ticks.len();
        let rows = validate_trace(&cfg, &trace, &ticks, &settings, Policy::Frozen).expect("monte carlo");
        for v in rows {
            checked += 1;
            max_hits = max_hits.max(v.hits);
            if v.ci.hi > worst.0 {
                worst = (v.ci.hi, seed, v.k);
            }
            over += (v.ci.hi > p_bar) as usize;
        }
    }
    Outcome::new(
        over == 0,
        format!(
            "{checked} ticks over 20 seeds ({skipped} slack-active skipped), {} rollouts each; \
             max 95% CP upper {:.4} (seed {} tick {}), max hits {max_hits}, {over} above {p_bar}",
            settings.n_rollouts, worst.0, worst.1, worst.2
        ),
    )
}

fn criterion_2(psd: &mut PsdLog) -> Outcome {
    let (mut sampled, mut feasible, mut slack_when_feasible, mut mismatched) = (0usize, 0usize, 0usize, 0usize);
    let mut max_du = 0.0_f64;
    let runs = [(ScenarioConfig::default(), 0..3u64), (adversarial(), 0..2u64)];
    for (cfg, seeds) in runs {
        let mut unrelaxed = cfg.controller.clone();
        unrelaxed.slack_mode = SlackMode::Disabled;
        for seed in seeds {
            let mut sim = Simulation::new(&cfg, seed).expect("simulation");
            let mut records = Vec::new();
            while sim.finished().is_none() {
                let direct = {
                    let ego = sim.transformed_ego();
                    let inputs = sim.controller_inputs();
                    let model = sim.model();
                    let ctx = TickContext {
                        barrier: &model.barrier,
                        epsilon: cfg.estimator.epsilon,
                        goal: &model.goal,
                        cfg: &unrelaxed,
                    };
                    let near = nearby_agents(&ego, &inputs, cfg.controller.proximity_radius);
                    let prog = assemble_program(&ego, &near, &ctx).expect("program");
                    qp_solve(&prog.qp, &unrelaxed.qp_settings()).expect("solve")
                };
                let rec = sim.step().expect("step").record;
                sampled += 1;
                if direct.status == QpStatus::Optimal {
                    feasible += 1;
                    let du = (direct.z[0] - rec.u[0]).hypot(direct.z[1] - rec.u[1]);
                    max_du = max_du.max(du);
                    slack_when_feasible += (rec.s > SLACK_TOL) as usize;
                    mismatched += (du > 1e-6) as usize;
                }
                records.push(rec);
            }
            psd.record(&records);
        }
    }
    Outcome::new(
        sampled >= 500 && feasible > 0 && slack_when_feasible == 0 && mismatched == 0,
        format!(
            "{sampled} ticks sampled, unrelaxed program feasible at {feasible}; \
             slack > 1e-6 at {slack_when_feasible} of those, max |u - u_slack| {max_du:.2e}"
        ),
    )
}

fn criterion_3(psd: &mut PsdLog) -> Outcome {
    let cfg = ScenarioConfig::default();
    let p_e = 0.01;
    let mut profile = |seed: u64| {
        let trace = run_simulation(&cfg, seed).expect("simulation");
        psd.record(&trace.records);
        ErrorProfile::from_trace(&trace)
    };
    let calibration: Vec<ErrorProfile> = (0..100).map(&mut profile).collect();
    let report = epsilon_from_profiles(&calibration, p_e).expect("calibration");
    let held_out: Vec<ErrorProfile> = (100..200).map(&mut profile).collect();
    let cov = coverage(&held_out, report.epsilon);
    Outcome::new(
        cov.per_step >= 1.0 - p_e && cov.agent_runs_exceeding <= p_e,
        format!(
            "epsilon {:.4} from seeds 0..100; held-out seeds 100..200: per-step coverage {:.5}, \
             agent runs exceeding {:.4}, runs exceeding {:.2}",
            report.epsilon, cov.per_step, cov.agent_runs_exceeding, cov.runs_exceeding
        ),
    )
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Euler step of the Kalman–Bucy filter for a two-state plant with one
/// input and one observation, written out by hand.
struct KalmanBucy2 {
    a: [[f64; 2]; 2],
    b: [f64; 2],
    q: [[f64; 2]; 2],
    c: [f64; 2],
    r: f64,
}

impl KalmanBucy2 {
    fn step(&self, x: [f64; 2], p: [[f64; 2]; 2], u: f64, z: f64, h: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (a, c) = (&self.a, &self.c);
        let k = [
            (p[0][0] * c[0] + p[0][1] * c[1]) / self.r,
            (p[1][0] * c[0] + p[1][1] * c[1]) / self.r,
        ];
        let innov = z - (c[0] * x[0] + c[1] * x[1]);
        let mut xn = [0.0; 2];
        for i in 0..2 {
            xn[i] = x[i] + (a[i][0] * x[0] + a[i][1] * x[1] + self.b[i] * u + k[i] * innov) * h;
        }
        let mut pn = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let ap = a[i][0] * p[0][j] + a[i][1] * p[1][j];
                let pa = p[i][0] * a[j][0] + p[i][1] * a[j][1];
                // P Cᵀ R⁻¹ C P = r·K Kᵀ
                pn[i][j] = p[i][j] + (ap + pa + self.q[i][j] - self.r * k[i] * k[j]) * h;
            }
        }
        let off = 0.5 * (pn[0][1] + pn[1][0]);
        pn[0][1] = off;
        pn[1][0] = off;
        (xn, pn)
    }
}

fn criterion_4(psd: &PsdLog) -> Outcome {
    // A = -1, C = Q = R = 1: the Riccati equation settles at √2 − 1.
    let model = DynamicsModel::linear(scalar(-1.0), DMatrix::zeros(1, 0), scalar(1.0)).unwrap();
    let cfg = EkfConfig::new(scalar(1.0), scalar(1.0), scalar(1.0)).unwrap();
    let mut st = ekf_init(DVector::from_element(1, 0.0), scalar(1.0)).unwrap();
    let none = DVector::zeros(0);
    for _ in 0..5000 {
        st = ekf_step(&st, &cfg, &model, &none, &DVector::from_element(1, 0.0), 0.01).unwrap();
    }
    let riccati_err = (st.p[(0, 0)] - (std::f64::consts::SQRT_2 - 1.0)).abs();

    let kb = KalmanBucy2 {
        a: [[0.0, 1.0], [-2.0, -0.5]],
        b: [0.0, 1.0],
        q: [[0.09, 0.0], [0.0, 0.25]],
        c: [1.0, 0.0],
        r: 0.04,
    };
    let model = DynamicsModel::linear(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.5]),
    )
    .unwrap();
    let mut cfg = EkfConfig::new(
        DMatrix::from_row_slice(2, 2, &[0.09, 0.0, 0.0, 0.25]),
        scalar(0.04),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )
    .unwrap();
    // One Euler step per interval on both sides.
    cfg.max_gain_step = 0.0;
    let (mut x, mut p) = ([0.5, -0.2], [[1.0, 0.1], [0.1, 2.0]]);
    let mut st = ekf_init(
        DVector::from_row_slice(&x),
        DMatrix::from_row_slice(2, 2, &[p[0][0], p[0][1], p[1][0], p[1][1]]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dt = 0.01;
    let mut linear_err = 0.0_f64;
    let mut linear_psd = true;
    for k in 0..3000 {
        let t = k as f64 * dt;
        let u = (0.7 * t).cos();
        let z = (0.3 * t).sin() + 2.0 * rng.sample::<f64, _>(StandardNormal);
        (x, p) = kb.step(x, p, u, z, dt);
        st = ekf_step(
            &st,
            &cfg,
            &model,
            &DVector::from_element(1, u),
            &DVector::from_element(1, z),
            dt,
        )
        .unwrap();
        for (i, row) in p.iter().enumerate() {
            linear_err = linear_err.max((st.x_hat[i] - x[i]).abs());
            for (j, v) in row.iter().enumerate() {
                linear_err = linear_err.max((st.p[(i, j)] - v).abs());
            }
        }
        linear_psd &= st.p.clone().symmetric_eigen().eigenvalues.min() > 0.0;
    }

    Outcome::new(
        riccati_err <= 1e-4 && linear_err <= 1e-10 && linear_psd && psd.failures == 0 && psd.runs > 0,
        format!(
            "|P - (sqrt2 - 1)| = {riccati_err:.2e}; max per-step gap to hand-coded Kalman-Bucy {linear_err:.2e} \
             over 3000 steps; min eig(P) {:.3e} over {} runs / {} ticks of criteria 1-3",
            psd.min_eig, psd.runs, psd.ticks
        ),
    )
}

fn criterion_5() -> Outcome {
    let settings = QpSettings::default();
    let (mut matched, mut worst_gap, mut worst_kkt) = (0usize, 0.0_f64, 0.0_f64);
    for seed in 0..100u64 {
        let k = 2 + (seed % 9) as usize;
        let m = 1 + (seed % 12) as usize;
        let boxed = seed % 2 == 0 && 2 * k + m <= 16;
        let prob = common::random_qp(50_000 + seed, k, m, boxed);
        let sol = qp_solve(&prob, &settings).expect("solve");
        let (f_star, _) = common::enumerate_optimum(&prob);
        if sol.status != QpStatus::Optimal {
            continue;
        }
        let gap = (sol.objective - f_star).abs() / f_star.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(sol.kkt.max());
        matched += (gap <= 1e-6) as usize;
    }
    Outcome::new(
        matched == 100 && worst_kkt <= 1e-8,
        format!("{matched}/100 instances (k <= 10, rows <= 20) match enumeration; max objective gap {worst_gap:.2e}, max KKT residual {worst_kkt:.2e}"),
    )
}

fn longest_run(flags: impl Iterator<Item = bool>) -> usize {
    let (mut best, mut cur) = (0, 0);
    for f in flags {
        cur = if f { cur + 1 } else { 0 };
        best = best.max(cur);
    }
    best
}

fn criterion_6() -> Outcome {
    // Toy: dx = u dt + g dW, h = x² − r², B = exp(−h), with u chosen so
    // that the generator meets A B = −a B + b with equality.
    let (r, g, horizon, dt) = (0.5, 0.5, 1.0, 1e-3);
    let budget = RiskBudget::new(0.1, 0.01).unwrap();
    let set = UnsafeSetSpec::NormBall(NormBall::new(DMatrix::identity(1, 1), r, None).unwrap());
    let spec = BarrierSpec::new(1.0, 0.0, set, horizon, budget).unwrap();
    let b0 = 0.02_f64;
    let x0 = (r * r - b0.ln()).sqrt();
    let a = 1.0;
    let family = ConditionFamily::B { a };
    let b = match condition_bounds(family, b0, &budget, horizon) {
        ConditionBound::RateMax { b_max, .. } => b_max,
        other => panic!("unexpected bound {other:?}"),
    };
    let n = 10_000;
    let steps = (horizon / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = 0usize;
    for _ in 0..n {
        let mut x = x0;
        for _ in 0..steps {
            let bv = barrier_eval(&spec, &DVector::from_element(1, x)).unwrap();
            let (d1, d2) = (bv.gradient[0], bv.hessian[(0, 0)]);
            let u = (-a * bv.b + b - 0.5 * g * g * d2) / d1;
            let dw: f64 = rng.sample(StandardNormal);
            x += u * dt + g * dt.sqrt() * dw;
            if spec.h_bar(&DVector::from_element(1, x)) <= 0.0 {
                hits += 1;
                break;
            }
        }
    }
    let p_new = budget.p_new();
    let p_hat = hits as f64 / n as f64;
    let limit = p_new + 3.0 * (p_new * (1.0 - p_new) / n as f64).sqrt();
    let toy_ok = p_hat <= limit;

    let cfg = adversarial();
    let (mut slack_seeds, mut slack_ticks, mut ticks, mut longest, mut residual) =
        (0usize, 0usize, 0usize, 0usize, 0.0_f64);
    for seed in 0..5u64 {
        let tr = run_simulation(&cfg, seed).expect("simulation");
        let active = tr.records.iter().filter(|r| r.s > SLACK_TOL).count();
        slack_seeds += (active > 0) as usize;
        slack_ticks += active;
        ticks += tr.records.len();
        longest = longest.max(longest_run(tr.records.iter().map(|r| r.s > SLACK_TOL)));
        residual = tr
            .records
            .iter()
            .filter(|r| r.s <= SLACK_TOL)
            .map(|r| r.s)
            .fold(residual, f64::max);
    }
    // Isolated: short episodes and a small share of the run.
    let qualitative_ok =
        slack_seeds > 0 && residual <= 1e-9 && longest <= 50 && (slack_ticks as f64) < 0.05 * ticks as f64;

    Outcome::new(
        toy_ok && qualitative_ok,
        format!(
            "toy: B0 {b0}, b {b:.4}, crossing bound {:.4}, empirical {p_hat:.4} over {n} rollouts (limit {limit:.4}); \
             adversarial seeds 0..5: slack in {slack_seeds}, {slack_ticks}/{ticks} ticks, longest episode {longest}, \
             max slack elsewhere {residual:.1e}",
            implied_crossing_bound(family, b0, b, horizon)
        ),
    )
}

fn criterion_7() -> Outcome {
    let (r, eps) = (0.3, 0.5);
    let ball = NormBall::ego_agent(r).unwrap();
    let set = UnsafeSetSpec::NormBall(ball);
    let h_eps = safety_margin(&set, eps, MarginMode::Analytic).unwrap().h_eps;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut accepted, mut failures, mut closest) = (0usize, 0usize, f64::INFINITY);
    let n = 1_000_000;
    for i in 0..n {
        let theta = rng.random_range(-3.2..3.2);
        let ego = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        // Estimated agent just outside the inflated ball most of the time.
        let [dx, dy]: [f64; 2] = UnitCircle.sample(&mut rng);
        let dist = rng.random_range(r..r + eps + 0.3);
        let x_hat = DVector::from_row_slice(&[
            ego[0],
            ego[1],
            theta,
            ego[0] + dist * dx,
            ego[1] + dist * dy,
            rng.random_range(0.0..2.0),
        ]);
        if set.h(&x_hat) <= h_eps {
            continue;
        }
        accepted += 1;
        // Half the errors sit on the sphere ‖ζ‖ = ε, the worst case.
        let z: [f64; 3] = if i % 2 == 0 {
            UnitSphere.sample(&mut rng)
        } else {
            UnitBall.sample(&mut rng)
        };
        let mut x = x_hat.clone();
        for j in 0..3 {
            x[3 + j] += eps * z[j];
        }
        let h = set.h(&x);
        closest = closest.min(h);
        failures += (h <= 0.0) as usize;
    }
    Outcome::new(
        failures == 0 && accepted > n / 4,
        format!("h_eps {h_eps:.4}; {accepted} of {n} pairs with h(x_hat) > h_eps, {failures} with h(x) <= 0; min h(x) {closest:.2e}"),
    )
}

fn rel_err(fd: &DVector<f64>, an: &DVector<f64>) -> f64 {
    (fd - an).amax() / an.amax().max(f64::MIN_POSITIVE)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let set = UnsafeSetSpec::NormBall(NormBall::ego_agent(0.3).unwrap());
    let h_eps = safety_margin(&set, 0.5, MarginMode::Analytic).unwrap().h_eps;
    let budget = RiskBudget::new(0.1, 0.01).unwrap();
    let specs: Vec<BarrierSpec> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&alpha| BarrierSpec::new(alpha, h_eps, set.clone(), 1.0, budget).unwrap())
        .collect();
    let (mut worst_grad, mut worst_hess, mut worst_clf) = (0.0_f64, 0.0_f64, 0.0_f64);
    let n = 1000;
    for i in 0..n {
        let spec = &specs[i % 3];
        let x = DVector::from_fn(6, |j, _| match j {
            2 => rng.random_range(-3.2..3.2),
            5 => rng.random_range(0.0..2.0),
            _ => rng.random_range(-2.0..2.0),
        });
        let bv = barrier_eval(spec, &x).unwrap();
        let step = 1e-5;
        let mut fd_grad = DVector::zeros(6);
        let mut fd_hess = DMatrix::zeros(6, 6);
        for j in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let (bp, bm) = (barrier_eval(spec, &xp).unwrap(), barrier_eval(spec, &xm).unwrap());
            fd_grad[j] = (bp.b - bm.b) / (2.0 * step);
            fd_hess.set_column(j, &((bp.gradient - bm.gradient) / (2.0 * step)));
        }
        worst_grad = worst_grad.max(rel_err(&fd_grad, &bv.gradient));
        let hess_err = (&fd_hess - &bv.hessian).amax() / bv.hessian.amax().max(f64::MIN_POSITIVE);
        worst_hess = worst_hess.max(hess_err);

        // CLF: the row's input coefficients are dV/dt per unit of each input.
        let transform = NearIdentityTransform::new(0.05).unwrap();
        let goal = Goal {
            center: [rng.random_range(-5.0..30.0), rng.random_range(0.0..9.0)],
            radius: 0.5,
        };
        let x_r = [x[0], x[1], x[2]];
        let v = |s: &[f64; 3]| {
            let p = transform.forward(s).position();
            (p[0] - goal.center[0]).powi(2) + (p[1] - goal.center[1]).powi(2)
        };
        let row = clf_constraint_row(&transform.forward(&x_r), &goal, &ClfConfig::default()).unwrap();
        let mut fd = DVector::zeros(2);
        for (j, u) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
            let f = unicycle_rhs(&x_r, u);
            let shifted = |sign: f64| {
                [
                    x_r[0] + sign * step * f[0],
                    x_r[1] + sign * step * f[1],
                    x_r[2] + sign * step * f[2],
                ]
            };
            fd[j] = (v(&shifted(1.0)) - v(&shifted(-1.0))) / (2.0 * step);
        }
        let an = DVector::from_row_slice(&row.u_coeffs);
        worst_clf = worst_clf
            .max(rel_err(&fd, &an))
            .max((row.v - v(&x_r)).abs() / row.v.max(1e-300));
    }
    let tol = 1e-5;
    Outcome::new(
        worst_grad <= tol && worst_hess <= tol && worst_clf <= tol,
        format!("{n} states, alpha in {{0.5, 1, 2}}: max relative error gradient {worst_grad:.2e}, Hessian {worst_hess:.2e}, CLF row {worst_clf:.2e}"),
    )
}

fn main() {
    let mut psd = PsdLog::default();
    let names = [
        "risk-bound soundness",
        "slack equivalence",
        "estimation coverage",
        "EKF correctness",
        "QP oracle equivalence",
        "toy crossing bound and slack pattern",
        "margin soundness",
        "derivative checks",
    ];
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let start = Instant::now();
        let run = catch_unwind(AssertUnwindSafe(|| match i + 1 {
            1 => criterion_1(&mut psd),
            2 => criterion_2(&mut psd),
            3 => criterion_3(&mut psd),
            4 => criterion_4(&psd),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            _ => criterion_8(),
        }));
        let outcome = run.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {} ({name}): {} [{:.1} s] {}",
            i + 1,
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria pass");
}
