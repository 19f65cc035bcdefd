use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dpp::bounds::{
    djkm_error_estimate, empirical_error_report, second_order_slack, tdoa_error_bound,
    toa_attainment, DjkmErrorParams, ErrorBoundReport, MonteCarloConfig, Quantity, ROUNDOFF_FLOOR,
};
use dpp::export::{
    trace_rows, write_csv, write_json, write_measurements_csv, write_trace_csv, MeasurementReport,
};
use dpp::measure::{full_cycle_measurements, MeasurementSet};
use dpp::protocol::{message_count_djkm, message_count_dpp, message_count_dpw, simulate};
use dpp::scenario::{Scenario, SEED_ENV};
use dpp::solve::{procrustes_align, solve_measurements, FrameKind, Solution, SolverOptions};
use dpp::{Execution, NodeId, NodeRole, Position, System};

#[derive(Parser)]
#[command(
    name = "dpp",
    version,
    about = "Double-pulse ranging simulator and position solver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the timestamp trace of every cycle.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Compute μ, TDoA, ToA and direct distances for every cycle.
    Measure {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Monte-Carlo check of the drift error bounds on the scenario geometry.
    Bounds {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Position every node without a known position (first cycle).
    Solve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Channel usage of DPP, DPW and DJKM.
    Counts {
        /// Bilateral and Active node counts.
        #[arg(long, num_args = 2, value_names = ["M", "T"])]
        dpp: Option<Vec<u64>>,
        /// Mirror and tag counts.
        #[arg(long, num_args = 2, value_names = ["M", "T"])]
        dpw: Option<Vec<u64>>,
        /// Anchor count.
        #[arg(long, value_name = "K")]
        djkm: Option<u64>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Message counts and worst-case TDoA errors of DPP against DJKM.
    Compare {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Extra receiver separations to tabulate, meters.
        #[arg(long = "distance-m", value_name = "M")]
        distances: Vec<f64>,
        /// DJKM anchor response delay, seconds.
        #[arg(long, default_value_t = 1e-3)]
        response_delay: f64,
        #[arg(long, default_value_t = 20.0)]
        max_drift_ppm: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Largest clock drift accepted in the scenario and drawn by `bounds`.
    #[arg(long, default_value_t = 20.0)]
    max_drift_ppm: f64,
}

#[derive(Args)]
struct OutputArgs {
    /// Directory for report files; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Exit with status 2 on failed bounds, unsolved targets or measurement gaps.
    #[arg(long)]
    strict: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

enum Outcome {
    Pass,
    StrictFailure(String),
}

struct Loaded {
    scenario: Scenario,
    system: System,
    seed: u64,
    max_drift: f64,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Loaded> {
        let max_drift = ppm(self.max_drift_ppm)?;
        let scenario = Scenario::load(&self.scenario, max_drift)
            .with_context(|| format!("scenario {}", self.scenario.display()))?;
        let system = scenario.system()?;
        let seed = scenario.resolve_seed(self.seed, None)?;
        Ok(Loaded {
            scenario,
            system,
            seed,
            max_drift,
        })
    }
}

fn ppm(v: f64) -> Result<f64> {
    if !(v.is_finite() && v >= 0.0) {
        bail!("drift limit must be a non-negative number of ppm, got {v}");
    }
    Ok(v * 1e-6)
}

/// Opens `<out>/<name>` or stdout.
fn sink(out: &Option<PathBuf>, name: &str) -> Result<Box<dyn Write>> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok(Box::new(io::BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn measure_all(l: &Loaded) -> Result<Vec<MeasurementSet>> {
    let cfg = l.scenario.protocol_config(l.seed);
    let mcfg = l.scenario.measure_config();
    let traces = simulate(&l.system, &cfg, Execution::default())?;
    Ok(traces
        .iter()
        .map(|t| full_cycle_measurements(t, &mcfg))
        .collect())
}

fn cmd_simulate(args: &ScenarioArgs, out: &OutputArgs) -> Result<Outcome> {
    let l = args.load()?;
    let traces = simulate(
        &l.system,
        &l.scenario.protocol_config(l.seed),
        Execution::default(),
    )?;
    let format = out.format.unwrap_or(Format::Csv);
    let mut w = sink(&out.out, &format!("trace.{}", format.ext()))?;
    match format {
        Format::Csv => write_trace_csv(&mut w, &traces)?,
        Format::Json => write_json(&mut w, &trace_rows(&traces))?,
    }
    w.flush()?;
    Ok(Outcome::Pass)
}

fn cmd_measure(args: &ScenarioArgs, out: &OutputArgs) -> Result<Outcome> {
    let l = args.load()?;
    let sets = measure_all(&l)?;
    let mcfg = l.scenario.measure_config();
    let format = out.format.unwrap_or(Format::Csv);
    let mut w = sink(&out.out, &format!("measurements.{}", format.ext()))?;
    match format {
        Format::Csv => write_measurements_csv(&mut w, &sets, &mcfg)?,
        Format::Json => write_json(&mut w, &MeasurementReport::new(&sets, &mcfg))?,
    }
    w.flush()?;

    let mut problems = Vec::new();
    for s in &sets {
        for f in &s.failures {
            problems.push(format!("cycle {}: {}: {}", s.cycle, f.what, f.error));
        }
        let values =
            s.mu.values()
                .map(|m| m.value)
                .chain(s.tdoa.iter().map(|e| e.value))
                .chain(s.toa.values().map(|t| t.seconds))
                .chain(s.direct.values().copied());
        if values.into_iter().any(|v| !v.is_finite()) {
            problems.push(format!("cycle {}: non-finite value", s.cycle));
        }
    }
    strict_outcome(out.strict, problems)
}

#[derive(Serialize)]
struct BoundsReport {
    trials: usize,
    max_drift_ppm: f64,
    seed: u64,
    slack_s: f64,
    reports: Vec<ErrorBoundReport>,
    /// Smallest ToA error/bound ratio with every clock at `+max_drift`.
    toa_attainment: Option<f64>,
}

fn cmd_bounds(args: &ScenarioArgs, out: &OutputArgs, trials: usize) -> Result<Outcome> {
    let l = args.load()?;
    let cfg = l.scenario.protocol_config(l.seed);
    let mc = MonteCarloConfig {
        trials,
        max_drift: l.max_drift,
        seed: l.seed,
        ..MonteCarloConfig::default()
    };
    let reports = Quantity::ALL
        .iter()
        .map(|q| empirical_error_report(&l.system, &cfg, &mc, *q))
        .collect::<dpp::Result<Vec<_>>>()?;
    let bilaterals = l.system.with_role(NodeRole::Bilateral).count();
    let toa_attainment = if bilaterals >= 2 && l.max_drift > 0.0 {
        Some(toa_attainment(&l.system, &cfg, l.max_drift)?)
    } else {
        None
    };
    let report = BoundsReport {
        trials,
        max_drift_ppm: l.max_drift * 1e6,
        seed: l.seed,
        slack_s: second_order_slack(&l.system, &cfg, l.max_drift)? + ROUNDOFF_FLOOR,
        reports,
        toa_attainment,
    };
    let mut w = sink(&out.out, "bounds.json")?;
    write_json(&mut w, &report)?;
    w.flush()?;

    let problems = report
        .reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| {
            format!(
                "{} bound violated (seed {:?})",
                r.quantity.label(),
                r.failing_seed
            )
        })
        .collect();
    strict_outcome(out.strict, problems)
}

#[derive(Serialize)]
struct SolveReport {
    cycle: u64,
    #[serde(flatten)]
    solution: Solution,
    /// Absolute frame: RMS distance to ground truth. Relative frame: RMS after
    /// rigid alignment (reflection allowed) of every solved node.
    ground_truth_rms_m: Option<f64>,
}

#[derive(Serialize)]
struct PositionRow {
    node: NodeId,
    x: f64,
    y: f64,
    z: Option<f64>,
    residual_m: f64,
    iterations: usize,
    converged: bool,
}

fn truth_rms(solution: &Solution, system: &System) -> Result<Option<f64>> {
    let est: BTreeMap<NodeId, Position> = solution
        .estimates
        .iter()
        .map(|e| (e.node, e.position.clone()))
        .collect();
    let truth: BTreeMap<NodeId, Position> = est
        .keys()
        .map(|id| system.try_node(*id).map(|n| (*id, n.position.clone())))
        .collect::<dpp::Result<_>>()?;
    if est.is_empty() {
        return Ok(None);
    }
    Ok(match solution.frame {
        FrameKind::Absolute => {
            let sum: f64 = est
                .iter()
                .map(|(id, p)| p.distance(&truth[id]).map(|d| d * d))
                .sum::<dpp::Result<f64>>()?;
            Some((sum / est.len() as f64).sqrt())
        }
        FrameKind::Relative => procrustes_align(&est, &truth, true).ok().map(|f| f.rms),
    })
}

fn cmd_solve(args: &ScenarioArgs, out: &OutputArgs) -> Result<Outcome> {
    let l = args.load()?;
    let sets = measure_all(&l)?;
    let first = sets.first().context("simulation produced no cycle")?;
    let solution = solve_measurements(first, &l.system, &SolverOptions::default())?;
    let ground_truth_rms_m = truth_rms(&solution, &l.system)?;

    let mut problems: Vec<String> = solution
        .unsolved
        .iter()
        .map(|u| format!("node {} unsolved: {}", u.node, u.reason))
        .collect();
    problems.extend(solution.estimates.iter().filter(|e| !e.converged).map(|e| {
        format!(
            "node {} did not converge (rms {:e} m)",
            e.node, e.residual_norm
        )
    }));

    let format = out.format.unwrap_or(Format::Json);
    match format {
        Format::Json => {
            let mut w = sink(&out.out, "solution.json")?;
            write_json(
                &mut w,
                &SolveReport {
                    cycle: first.cycle,
                    solution,
                    ground_truth_rms_m,
                },
            )?;
            w.flush()?;
        }
        Format::Csv => {
            let rows: Vec<PositionRow> = solution
                .estimates
                .iter()
                .map(|e| {
                    let c = e.position.coords();
                    PositionRow {
                        node: e.node,
                        x: c[0],
                        y: c[1],
                        z: c.get(2).copied(),
                        residual_m: e.residual_norm,
                        iterations: e.iterations,
                        converged: e.converged,
                    }
                })
                .collect();
            let mut w = sink(&out.out, "positions.csv")?;
            write_csv(&mut w, &rows)?;
            w.flush()?;
        }
    }
    strict_outcome(out.strict, problems)
}

#[derive(Serialize)]
struct CountRow {
    scheme: &'static str,
    setup: String,
    messages: u64,
    detail: String,
}

fn cmd_counts(
    dpp: &Option<Vec<u64>>,
    dpw: &Option<Vec<u64>>,
    djkm: Option<u64>,
    format: Option<Format>,
) -> Result<Outcome> {
    if dpp.is_none() && dpw.is_none() && djkm.is_none() {
        bail!("give at least one of --dpp M T, --dpw M T, --djkm K");
    }
    let mut rows = Vec::new();
    if let Some(v) = dpp {
        rows.push(CountRow {
            scheme: "dpp",
            setup: format!("m={} t={}", v[0], v[1]),
            messages: message_count_dpp(v[0], v[1]),
            detail: "2(m+t)".into(),
        });
    }
    if let Some(v) = dpw {
        rows.push(CountRow {
            scheme: "dpw",
            setup: format!("m={} t={}", v[0], v[1]),
            messages: message_count_dpw(v[0], v[1]),
            detail: "3mt".into(),
        });
    }
    if let Some(k) = djkm {
        let c = message_count_djkm(k)?;
        rows.push(CountRow {
            scheme: "djkm",
            setup: format!("k={k}"),
            messages: c.total,
            detail: format!("n1={} n2={}", c.first_round, c.second_round),
        });
        rows.push(CountRow {
            scheme: "dpp",
            setup: format!("m={k} t=0"),
            messages: message_count_dpp(k, 0),
            detail: "same anchors as Bilaterals".into(),
        });
    }
    let mut w = io::stdout().lock();
    match format {
        Some(Format::Json) => write_json(&mut w, &rows)?,
        Some(Format::Csv) => write_csv(&mut w, &rows)?,
        None => {
            writeln!(
                w,
                "{:<6} {:<12} {:>10}  detail",
                "scheme", "setup", "messages"
            )?;
            for r in &rows {
                writeln!(
                    w,
                    "{:<6} {:<12} {:>10}  {}",
                    r.scheme, r.setup, r.messages, r.detail
                )?;
            }
        }
    }
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct ErrorRow {
    x: Option<NodeId>,
    z: Option<NodeId>,
    distance_m: f64,
    distance_s: f64,
    dpp_tdoa_bound_s: f64,
    djkm_error_s: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct CompareCounts {
    bilaterals: u64,
    actives: u64,
    passives: u64,
    dpp: u64,
    dpw: u64,
    djkm: Option<u64>,
}

#[derive(Serialize)]
struct CompareReport {
    max_drift_ppm: f64,
    response_delay_s: f64,
    signal_speed_mps: f64,
    counts: Option<CompareCounts>,
    errors: Vec<ErrorRow>,
}

fn cmd_compare(
    scenario: &Option<PathBuf>,
    distances: &[f64],
    response_delay: f64,
    max_drift_ppm: f64,
    out: &OutputArgs,
) -> Result<Outcome> {
    let eps = ppm(max_drift_ppm)?;
    let params = DjkmErrorParams::new(response_delay, eps, -eps)?;
    let djkm = djkm_error_estimate(&params);
    let system = match scenario {
        Some(p) => Some(load_system(p, eps)?),
        None => None,
    };
    let v = system
        .as_ref()
        .map_or(dpp::model::SPEED_OF_LIGHT, |s| s.signal_speed());
    let row = |x, z, d_m: f64| {
        let d_s = d_m / v;
        let dpp_bound = tdoa_error_bound(eps, eps, d_s);
        ErrorRow {
            x,
            z,
            distance_m: d_m,
            distance_s: d_s,
            dpp_tdoa_bound_s: dpp_bound,
            djkm_error_s: djkm,
            ratio: djkm / dpp_bound,
        }
    };

    let mut errors = Vec::new();
    let mut counts = None;
    if let Some(sys) = &system {
        let (p, a, b) = sys.partition();
        let (m, t) = (b.len() as u64, a.len() as u64);
        counts = Some(CompareCounts {
            bilaterals: m,
            actives: t,
            passives: p.len() as u64,
            dpp: message_count_dpp(m, t),
            dpw: message_count_dpw(m, t + p.len() as u64),
            djkm: message_count_djkm(m).ok().map(|c| c.total),
        });
        let receivers: Vec<&dpp::Node> = sys.receivers().collect();
        for (i, x) in receivers.iter().enumerate() {
            for z in &receivers[i + 1..] {
                if x.role != NodeRole::Bilateral && z.role != NodeRole::Bilateral {
                    continue;
                }
                errors.push(row(
                    Some(x.id),
                    Some(z.id),
                    x.position.distance(&z.position)?,
                ));
            }
        }
    }
    for &d in distances {
        if !(d.is_finite() && d > 0.0) {
            bail!("--distance-m must be positive, got {d}");
        }
        errors.push(row(None, None, d));
    }
    if errors.is_empty() {
        bail!("nothing to compare: give --scenario or --distance-m");
    }

    let report = CompareReport {
        max_drift_ppm,
        response_delay_s: response_delay,
        signal_speed_mps: v,
        counts,
        errors,
    };
    match out.format.unwrap_or(Format::Json) {
        Format::Json => {
            let mut w = sink(&out.out, "compare.json")?;
            write_json(&mut w, &report)?;
            w.flush()?;
        }
        Format::Csv => {
            let mut w = sink(&out.out, "compare.csv")?;
            write_csv(&mut w, &report.errors)?;
            w.flush()?;
        }
    }
    Ok(Outcome::Pass)
}

fn load_system(path: &Path, max_drift: f64) -> Result<System> {
    let s =
        Scenario::load(path, max_drift).with_context(|| format!("scenario {}", path.display()))?;
    Ok(s.system()?)
}

fn strict_outcome(strict: bool, problems: Vec<String>) -> Result<Outcome> {
    if strict && !problems.is_empty() {
        return Ok(Outcome::StrictFailure(problems.join("\n")));
    }
    Ok(Outcome::Pass)
}

fn run(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Simulate { scenario, output } => cmd_simulate(scenario, output),
        Command::Measure { scenario, output } => cmd_measure(scenario, output),
        Command::Bounds {
            scenario,
            output,
            trials,
        } => cmd_bounds(scenario, output, *trials),
        Command::Solve { scenario, output } => cmd_solve(scenario, output),
        Command::Counts {
            dpp,
            dpw,
            djkm,
            format,
        } => cmd_counts(dpp, dpw, *djkm, *format),
        Command::Compare {
            scenario,
            distances,
            response_delay,
            max_drift_ppm,
            output,
        } => cmd_compare(scenario, distances, *response_delay, *max_drift_ppm, output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::StrictFailure(msg)) => {
            eprintln!("strict check failed:\n{msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
