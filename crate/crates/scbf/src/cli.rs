//! The `scbf` command line.
//!
//! Exit codes: 0 ok, 1 configuration or input error, 2 runtime failure
//! (truncated run, IO, risk-bound violation), 3 infeasible QP.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use scbf_core::controller::Clock;
use scbf_core::qp::{qp_solve, QpSettings, QpStatus};
use scbf_core::scenario::{run_simulation, run_simulation_with_clock, CalibrationReport, McSettings, Termination};

use crate::campaign::{self, Policy, TickSelection, Verdict};
use crate::config::RunConfigFile;
use crate::error::{CliError, ExitCode, Result};
use crate::qp_io::{QpFile, QpReport};
use crate::trace_io::{self, write_json};

#[derive(Debug, Parser)]
#[command(
    name = "scbf",
    version,
    about = "Risk-bounded highway control with stochastic barrier functions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run closed-loop simulations and write trace CSV + summary JSON.
    Simulate {
        config: PathBuf,
        /// Single seed; default runs every seed in the config's `seeds` section.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config `output.dir`, then $SCBF_OUT_DIR, then ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report QP solve times on stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Calibrate the estimation error bound ε from closed-loop runs.
    Calibrate {
        config: PathBuf,
        /// Allowed probability of leaving the ε-ball (default: estimator.p_e).
        #[arg(long)]
        pe: Option<f64>,
        /// Number of runs (default: seeds.count).
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare Monte Carlo risk estimates with the controller's bound.
    ValidateRisk {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Rollouts per tick (default: monte_carlo.n_rollouts).
        #[arg(long)]
        rollouts: Option<usize>,
        /// `all`, `every:N` or a list like `0,100,200`.
        #[arg(long, default_value = "all")]
        ticks: TickSelection,
        #[arg(long, value_enum, default_value_t = Policy::Frozen)]
        policy: Policy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a QP given as JSON and print the solution with its KKT report.
    SolveQp { file: PathBuf },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return ExitCode::Config;
            }
            let _ = write!(stdout, "{}", e.render());
            return ExitCode::Ok;
        }
    };
    match run(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

pub fn run(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<ExitCode> {
    match cmd {
        Command::Simulate {
            config,
            seed,
            out,
            timing,
        } => simulate(&config, seed, out.as_deref(), timing, stdout, stderr),
        Command::Calibrate { config, pe, runs, out } => calibrate(&config, pe, runs, out.as_deref(), stdout),
        Command::ValidateRisk {
            config,
            seed,
            rollouts,
            ticks,
            policy,
            out,
        } => validate_risk(&config, seed, rollouts, &ticks, policy, out.as_deref(), stdout),
        Command::SolveQp { file } => solve_qp(&file, stdout),
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn now_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn simulate(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    timing: bool,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<ExitCode> {
    let file = RunConfigFile::load(config)?;
    let cfg = file.scenario_config();
    let dir = file.output_dir(out);
    let seeds = seed.map_or_else(|| file.seeds.list(), |s| vec![s]);

    let traces = if timing {
        let clock = WallClock(Instant::now());
        seeds
            .iter()
            .map(|&s| run_simulation_with_clock(&cfg, s, &clock).map_err(CliError::from))
            .collect::<Result<Vec<_>>>()?
    } else if seeds.len() == 1 {
        vec![run_simulation(&cfg, seeds[0])?]
    } else {
        campaign::simulate_seeds(&cfg, &seeds)?
    };

    let mut code = ExitCode::Ok;
    for trace in &traces {
        let sum = trace_io::write_run(&dir, trace, cfg.barrier.p_bar)?;
        let st = &sum.stats;
        let goal = st.goal_time.map_or("not reached".to_string(), |t| format!("{t:.2} s"));
        writeln!(
            stdout,
            "seed {}: {} ticks, goal {}, slack-active ticks {}, max risk bound {:.4} ({:.4} without slack), {}",
            trace.seed,
            st.ticks,
            goal,
            st.slack_active_count,
            st.max_risk_bound,
            st.max_risk_bound_without_slack,
            ending(&trace.termination)
        )
        .map_err(out_err)?;
        if timing {
            let times: Vec<f64> = trace.records.iter().map(|r| r.solve_time).collect();
            let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
            let max = times.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(
                stderr,
                "seed {}: qp solve mean {:.1} us, max {:.1} us",
                trace.seed,
                mean * 1e6,
                max * 1e6
            );
        }
        if trace.termination.is_failure() {
            code = ExitCode::Runtime;
        }
    }
    writeln!(stdout, "wrote {}", dir.display()).map_err(out_err)?;
    Ok(code)
}

fn ending(t: &Termination) -> String {
    match t {
        Termination::Goal { .. } => "goal reached".into(),
        Termination::Duration => "ran to duration".into(),
        Termination::IntegrationBlowup { t } => format!("TRUNCATED: integration blow-up at {t:.2} s"),
        Termination::SolverFailure { t } => format!("TRUNCATED: repeated solver failures at {t:.2} s"),
    }
}

#[derive(Debug, Serialize)]
struct CalibrationFile<'a> {
    seed_base: u64,
    configured_epsilon: f64,
    #[serde(flatten)]
    report: &'a CalibrationReport,
}

fn calibrate(
    config: &Path,
    pe: Option<f64>,
    runs: Option<usize>,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<ExitCode> {
    let file = RunConfigFile::load(config)?;
    let cfg = file.scenario_config();
    let p_e = pe.unwrap_or(cfg.estimator.p_e);
    let mut seeds = file.seeds.clone();
    if let Some(n) = runs {
        seeds.count = n;
    }
    let report = campaign::calibrate(&cfg, p_e, &seeds.list())?;

    let dir = file.output_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join("calibration.json");
    write_json(
        &path,
        &CalibrationFile {
            seed_base: seeds.base,
            configured_epsilon: cfg.estimator.epsilon,
            report: &report,
        },
    )?;

    let w = stdout;
    writeln!(
        w,
        "epsilon = {:.6} (p_e = {}, {} runs, {} failed)",
        report.epsilon, p_e, report.n_runs, report.failed_runs
    )
    .map_err(out_err)?;
    writeln!(w, "{:>8} {:>12} {:>12}", "level", "run sup", "per step").map_err(out_err)?;
    for q in &report.quantiles {
        writeln!(w, "{:>8} {:>12.6} {:>12.6}", q.level, q.run_sup, q.per_step).map_err(out_err)?;
    }
    let c = &report.coverage;
    writeln!(
        w,
        "coverage per step {:.5}, runs exceeding {:.4}, agent-runs exceeding {:.5}",
        c.per_step, c.runs_exceeding, c.agent_runs_exceeding
    )
    .map_err(out_err)?;
    writeln!(w, "wrote {}", path.display()).map_err(out_err)?;
    Ok(ExitCode::Ok)
}

fn validate_risk(
    config: &Path,
    seed: Option<u64>,
    rollouts: Option<usize>,
    ticks: &TickSelection,
    policy: Policy,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<ExitCode> {
    let file = RunConfigFile::load(config)?;
    let cfg = file.scenario_config();
    let seed = seed.unwrap_or(file.seeds.base);
    let settings = McSettings {
        n_rollouts: rollouts.unwrap_or(file.monte_carlo.n_rollouts),
        ..file.monte_carlo
    };
    if settings.n_rollouts == 0 {
        return Err(CliError::Format("--rollouts must be positive".into()));
    }
    let trace = run_simulation(&cfg, seed)?;
    let selected = ticks.resolve(trace.records.len());
    let rows = campaign::validate_trace(&cfg, &trace, &selected, &settings, policy)?;

    let dir = file.output_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join(format!("risk_seed{seed}.csv"));
    let mut csv = csv::Writer::from_path(&path).map_err(|e| CliError::Format(e.to_string()))?;
    let fmt = |e: csv::Error| CliError::Format(e.to_string());
    csv.write_record([
        "k",
        "t",
        "s",
        "bound",
        "hits",
        "n",
        "p_hat",
        "ci_lo",
        "ci_hi",
        "above_p_bar",
        "verdict",
    ])
    .map_err(fmt)?;

    let w = stdout;
    writeln!(
        w,
        "{:>6} {:>7} {:>10} {:>8} {:>8} {:>8} {:>8}  verdict",
        "k", "t", "s", "bound", "p_hat", "ci_lo", "ci_hi"
    )
    .map_err(out_err)?;
    let (mut pass, mut slack, mut bad) = (0, 0, 0);
    let mut worst_ci = 0.0_f64;
    for r in &rows {
        let verdict = match r.verdict {
            Verdict::Pass => "pass",
            Verdict::Slack => "slack",
            Verdict::Violation => "VIOLATION",
        };
        match r.verdict {
            Verdict::Pass => pass += 1,
            Verdict::Slack => slack += 1,
            Verdict::Violation => bad += 1,
        }
        if r.verdict != Verdict::Slack {
            worst_ci = worst_ci.max(r.ci.hi);
        }
        csv.write_record([
            r.k.to_string(),
            r.t.to_string(),
            r.s.to_string(),
            r.bound.to_string(),
            r.hits.to_string(),
            r.n.to_string(),
            r.p_hat.to_string(),
            r.ci.lo.to_string(),
            r.ci.hi.to_string(),
            (r.above_p_bar as u8).to_string(),
            verdict.to_string(),
        ])
        .map_err(fmt)?;
        writeln!(
            w,
            "{:>6} {:>7.2} {:>10.3e} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {verdict}",
            r.k, r.t, r.s, r.bound, r.p_hat, r.ci.lo, r.ci.hi
        )
        .map_err(out_err)?;
    }
    csv.flush().map_err(|e| CliError::io(&path, e))?;
    writeln!(
        w,
        "seed {seed}: {} ticks, {pass} pass, {slack} slack-flagged, {bad} violations; max CI upper without slack {worst_ci:.4} (target {})",
        rows.len(),
        cfg.barrier.p_bar
    )
    .map_err(out_err)?;
    writeln!(w, "wrote {}", path.display()).map_err(out_err)?;
    Ok(if bad > 0 { ExitCode::Runtime } else { ExitCode::Ok })
}

fn solve_qp(path: &Path, stdout: &mut dyn Write) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let to_config = |e: CliError| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let prob = QpFile::parse(&text).and_then(|f| f.to_problem()).map_err(to_config)?;
    let sol = qp_solve(&prob, &QpSettings::default())?;
    let report = QpReport::from(&sol);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Format(e.to_string()))?;
    writeln!(stdout, "{json}").map_err(out_err)?;
    Ok(match sol.status {
        QpStatus::Optimal => ExitCode::Ok,
        QpStatus::Infeasible => ExitCode::Infeasible,
        QpStatus::MaxIter | QpStatus::Unbounded => ExitCode::Runtime,
    })
}
