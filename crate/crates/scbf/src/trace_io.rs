//! Trace CSV and the JSON run summary.
//!
//! The CSV starts with a version line, then a header, then one row per
//! control tick. Tick columns come first; each agent then contributes a
//! fixed block of columns prefixed `a{i}_`. Floats use the shortest
//! representation that parses back to the same value, so a trace read back
//! from disk reproduces every summary statistic bit for bit. Solve times are
//! not written; they would make outputs differ between identical runs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use scbf_core::qp::QpStatus;
use scbf_core::scenario::{AgentRecord, SimulationTrace, Termination, TickRecord};

use crate::error::{CliError, Result};

pub const TRACE_CSV_VERSION: &str = "# scbf-trace v1";

/// Slack above this counts as active.
pub const SLACK_ACTIVE_TOL: f64 = 1e-6;

const TICK_COLUMNS: [&str; 18] = [
    "t",
    "px",
    "py",
    "theta",
    "u1",
    "u2",
    "s",
    "max_risk_bound",
    "k",
    "pbx",
    "pby",
    "n_active",
    "feasible_without_slack",
    "goal_reached",
    "solver_error",
    "status",
    "iterations",
    "clf_value",
];

const AGENT_COLUMNS: [&str; 17] = [
    "x",
    "y",
    "v",
    "xh",
    "yh",
    "vh",
    "ptrace",
    "pmin",
    "pmax",
    "err",
    "nees",
    "active",
    "b0",
    "rate",
    "risk",
    "degenerate",
    "resets",
];

pub fn header(n_agents: usize) -> Vec<String> {
    let mut h: Vec<String> = TICK_COLUMNS.iter().map(|s| s.to_string()).collect();
    for i in 0..n_agents {
        h.extend(AGENT_COLUMNS.iter().map(|c| format!("a{i}_{c}")));
    }
    h
}

fn status_name(s: QpStatus) -> &'static str {
    match s {
        QpStatus::Optimal => "optimal",
        QpStatus::Infeasible => "infeasible",
        QpStatus::MaxIter => "max_iter",
        QpStatus::Unbounded => "unbounded",
    }
}

fn parse_status(s: &str) -> Option<QpStatus> {
    Some(match s {
        "optimal" => QpStatus::Optimal,
        "infeasible" => QpStatus::Infeasible,
        "max_iter" => QpStatus::MaxIter,
        "unbounded" => QpStatus::Unbounded,
        _ => return None,
    })
}

fn flag(b: bool) -> String {
    (b as u8).to_string()
}

fn row(r: &TickRecord) -> Vec<String> {
    let f = |v: f64| v.to_string();
    let mut out = vec![
        f(r.t),
        f(r.x_r[0]),
        f(r.x_r[1]),
        f(r.x_r[2]),
        f(r.u[0]),
        f(r.u[1]),
        f(r.s),
        f(r.max_risk_bound),
        r.k.to_string(),
        f(r.p_bar[0]),
        f(r.p_bar[1]),
        r.n_active.to_string(),
        flag(r.feasible_without_slack),
        flag(r.goal_reached),
        flag(r.solver_error),
        status_name(r.status).to_string(),
        r.iterations.to_string(),
        f(r.clf_value),
    ];
    for a in &r.agents {
        out.extend(a.x.iter().chain(&a.x_hat).map(|v| f(*v)));
        out.extend([a.p_trace, a.p_min, a.p_max, a.error, a.nees].map(f));
        out.push(flag(a.active));
        out.extend([a.b0, a.rate, a.risk_bound].map(f));
        out.push(flag(a.degenerate));
        out.push(a.resets.to_string());
    }
    out
}

pub fn write_trace_csv<W: Write>(records: &[TickRecord], mut w: W) -> Result<()> {
    let n_agents = records.first().map_or(0, |r| r.agents.len());
    writeln!(w, "{TRACE_CSV_VERSION}").map_err(|e| CliError::io("<trace>", e))?;
    let mut csv = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| CliError::Format(e.to_string());
    csv.write_record(header(n_agents)).map_err(fmt)?;
    for r in records {
        if r.agents.len() != n_agents {
            return Err(CliError::Format(format!("tick {} has a different agent count", r.k)));
        }
        csv.write_record(row(r)).map_err(fmt)?;
    }
    csv.flush().map_err(|e| CliError::io("<trace>", e))?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`]. Solve times come back as 0.
pub fn read_trace_csv<R: Read>(mut r: R) -> Result<Vec<TickRecord>> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(|e| CliError::io("<trace>", e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    if first.trim_end() != TRACE_CSV_VERSION {
        return Err(CliError::Format(format!(
            "expected `{TRACE_CSV_VERSION}` on the first line, found `{first}`"
        )));
    }
    let mut csv = csv::Reader::from_reader(body.as_bytes());
    let fmt = |e: csv::Error| CliError::Format(e.to_string());
    let head: Vec<String> = csv.headers().map_err(fmt)?.iter().map(str::to_string).collect();
    let fixed = TICK_COLUMNS.len();
    if head.len() < fixed || !(head.len() - fixed).is_multiple_of(AGENT_COLUMNS.len()) {
        return Err(CliError::Format("unexpected trace column count".into()));
    }
    let n_agents = (head.len() - fixed) / AGENT_COLUMNS.len();
    if head != header(n_agents) {
        return Err(CliError::Format("trace header does not match this version".into()));
    }

    let mut out = Vec::new();
    for (line, rec) in csv.records().enumerate() {
        let rec = rec.map_err(fmt)?;
        let mut cells = rec.iter();
        let mut next = || {
            cells
                .next()
                .ok_or_else(|| CliError::Format(format!("row {line}: too few cells")))
        };
        let bad = |what: &str| CliError::Format(format!("row {line}: bad {what}"));
        macro_rules! num {
            ($t:ty, $what:expr) => {
                next()?.parse::<$t>().map_err(|_| bad($what))?
            };
        }
        macro_rules! boolean {
            ($what:expr) => {
                match next()? {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad($what)),
                }
            };
        }
        let t = num!(f64, "t");
        let x_r = [num!(f64, "px"), num!(f64, "py"), num!(f64, "theta")];
        let u = [num!(f64, "u1"), num!(f64, "u2")];
        let s = num!(f64, "s");
        let max_risk_bound = num!(f64, "max_risk_bound");
        let k = num!(usize, "k");
        let p_bar = [num!(f64, "pbx"), num!(f64, "pby")];
        let n_active = num!(usize, "n_active");
        let feasible_without_slack = boolean!("feasible_without_slack");
        let goal_reached = boolean!("goal_reached");
        let solver_error = boolean!("solver_error");
        let status = parse_status(next()?).ok_or_else(|| bad("status"))?;
        let iterations = num!(usize, "iterations");
        let clf_value = num!(f64, "clf_value");
        let mut agents = Vec::with_capacity(n_agents);
        for _ in 0..n_agents {
            let x = [num!(f64, "x"), num!(f64, "y"), num!(f64, "v")];
            let x_hat = [num!(f64, "xh"), num!(f64, "yh"), num!(f64, "vh")];
            let p_trace = num!(f64, "ptrace");
            let p_min = num!(f64, "pmin");
            let p_max = num!(f64, "pmax");
            let error = num!(f64, "err");
            let nees = num!(f64, "nees");
            let active = boolean!("active");
            let b0 = num!(f64, "b0");
            let rate = num!(f64, "rate");
            let risk_bound = num!(f64, "risk");
            let degenerate = boolean!("degenerate");
            let resets = num!(usize, "resets");
            agents.push(AgentRecord {
                x,
                x_hat,
                p_trace,
                p_min,
                p_max,
                error,
                nees,
                active,
                b0,
                rate,
                risk_bound,
                degenerate,
                resets,
            });
        }
        out.push(TickRecord {
            k,
            t,
            x_r,
            p_bar,
            u,
            s,
            max_risk_bound,
            n_active,
            feasible_without_slack,
            goal_reached,
            solver_error,
            status,
            iterations,
            solve_time: 0.0,
            clf_value,
            agents,
        });
    }
    Ok(out)
}

/// Statistics that depend only on the per-tick records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub ticks: usize,
    pub final_time: Option<f64>,
    /// First tick inside the goal set.
    pub goal_time: Option<f64>,
    pub max_risk_bound: f64,
    /// Max risk bound over ticks with inactive slack.
    pub max_risk_bound_without_slack: f64,
    pub max_slack: f64,
    pub slack_active_count: usize,
    pub slack_active_ticks: Vec<usize>,
    /// Ticks whose risk bound exceeds `p_bar` by more than rounding.
    pub ticks_above_p_bar: Vec<usize>,
    pub solver_error_ticks: Vec<usize>,
    pub max_estimation_error: f64,
    pub total_resets: usize,
}

impl TraceStats {
    pub fn from_records(records: &[TickRecord], p_bar: f64) -> Self {
        let slack_active_ticks: Vec<usize> = records.iter().filter(|r| r.s > SLACK_ACTIVE_TOL).map(|r| r.k).collect();
        Self {
            ticks: records.len(),
            final_time: records.last().map(|r| r.t),
            goal_time: records.iter().find(|r| r.goal_reached).map(|r| r.t),
            max_risk_bound: records.iter().map(|r| r.max_risk_bound).fold(0.0, f64::max),
            max_risk_bound_without_slack: records
                .iter()
                .filter(|r| r.s <= SLACK_ACTIVE_TOL)
                .map(|r| r.max_risk_bound)
                .fold(0.0, f64::max),
            max_slack: records.iter().map(|r| r.s).fold(0.0, f64::max),
            slack_active_count: slack_active_ticks.len(),
            slack_active_ticks,
            ticks_above_p_bar: records
                .iter()
                .filter(|r| r.max_risk_bound > p_bar * (1.0 + 1e-9))
                .map(|r| r.k)
                .collect(),
            solver_error_ticks: records.iter().filter(|r| r.solver_error).map(|r| r.k).collect(),
            max_estimation_error: records
                .iter()
                .flat_map(|r| r.agents.iter().map(|a| a.error))
                .fold(0.0, f64::max),
            total_resets: records.last().map_or(0, |r| r.agents.iter().map(|a| a.resets).sum()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub csv_version: String,
    pub termination: Termination,
    pub p_bar: f64,
    #[serde(flatten)]
    pub stats: TraceStats,
}

impl RunSummary {
    pub fn new(trace: &SimulationTrace, p_bar: f64) -> Self {
        Self {
            seed: trace.seed,
            csv_version: TRACE_CSV_VERSION.trim_start_matches("# ").to_string(),
            termination: trace.termination,
            p_bar,
            stats: TraceStats::from_records(&trace.records, p_bar),
        }
    }
}

pub fn trace_csv_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("trace_seed{seed}.csv"))
}

pub fn summary_json_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("summary_seed{seed}.json"))
}

/// Writes `trace_seed{seed}.csv` and `summary_seed{seed}.json` into `dir`.
pub fn write_run(dir: &Path, trace: &SimulationTrace, p_bar: f64) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let csv_path = trace_csv_path(dir, trace.seed);
    let file = std::fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    write_trace_csv(&trace.records, std::io::BufWriter::new(file))?;
    let summary = RunSummary::new(trace, p_bar);
    write_json(&summary_json_path(dir, trace.seed), &summary)?;
    Ok(summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(i: usize) -> AgentRecord {
        AgentRecord {
            x: [i as f64, 0.1, 1.0 / 3.0],
            x_hat: [i as f64 + 1e-17, 0.2, 0.3],
            p_trace: 0.1,
            p_min: 0.01,
            p_max: 0.05,
            error: 0.123456789012345,
            nees: f64::NAN,
            active: i.is_multiple_of(2),
            b0: if i.is_multiple_of(2) { 1e-300 } else { f64::NAN },
            rate: -0.0,
            risk_bound: f64::NAN,
            degenerate: false,
            resets: i,
        }
    }

    fn record(k: usize) -> TickRecord {
        TickRecord {
            k,
            t: k as f64 * 0.01,
            x_r: [0.1 * k as f64, f64::MIN_POSITIVE, -std::f64::consts::PI],
            p_bar: [1.0, 2.0],
            u: [0.2, -0.5235987755982988],
            s: if k == 1 { 1e-3 } else { 0.0 },
            max_risk_bound: 0.01 + 0.05 * k as f64,
            n_active: 1,
            feasible_without_slack: k != 1,
            goal_reached: k == 2,
            solver_error: false,
            status: QpStatus::Optimal,
            iterations: 3,
            solve_time: 0.0,
            clf_value: 1e10,
            agents: (0..3).map(agent).collect(),
        }
    }

    #[test]
    fn csv_round_trip_preserves_records() {
        let records: Vec<_> = (0..4).map(record).collect();
        let mut buf = Vec::new();
        write_trace_csv(&records, &mut buf).unwrap();
        let back = read_trace_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            // NaN != NaN, so compare the rendered rows instead.
            assert_eq!(row(a), row(b));
        }
        assert_eq!(
            TraceStats::from_records(&records, 0.1),
            TraceStats::from_records(&back, 0.1)
        );
    }

    #[test]
    fn header_starts_with_the_frozen_prefix() {
        let h = header(2);
        assert_eq!(&h[..8], &["t", "px", "py", "theta", "u1", "u2", "s", "max_risk_bound"]);
        assert_eq!(h.len(), 18 + 2 * 17);
        assert_eq!(h.last().unwrap(), "a1_resets");
    }

    #[test]
    fn stats_pick_out_slack_and_goal() {
        let records: Vec<_> = (0..4).map(record).collect();
        let st = TraceStats::from_records(&records, 0.1);
        assert_eq!(st.slack_active_ticks, vec![1]);
        assert_eq!(st.goal_time, Some(0.02));
        assert_eq!(st.ticks_above_p_bar, vec![2, 3]);
        assert!((st.max_risk_bound_without_slack - 0.16).abs() < 1e-15);
        assert_eq!(st.total_resets, 3);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let err = read_trace_csv("# scbf-trace v0\nt\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("scbf-trace v1"));
    }
}
