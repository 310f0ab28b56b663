//! Command-line driver: scenario runs, seed sweeps, and the packaged
//! resilience-boundary demonstration.
//!
//! Exit codes: 0 when every enforced check passes, 1 for monitor or
//! regression failures, 2 for usage and configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vaad::scenario::{parse_scenario, ScenarioFile};
use vaad::sim::{
    self, demo, metrics, monitors::MonitorReport, BroadcastMode, SimConfig, SimError, SimResult,
};

#[derive(Parser)]
#[command(name = "vaad", version, about = "Validated Byzantine approximate agreement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; write metrics CSV and optional JSONL trace.
    Run(RunArgs),
    /// Run one scenario across a seed range; write the aggregate CSV.
    Sweep(SweepArgs),
    /// Run the packaged n = 3t demonstration and its n = 3t + 1 contrast.
    DemoLowerBound(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the scenario's channel mode.
    #[arg(long, value_enum, value_name = "MODE")]
    broadcast: Option<BroadcastArg>,
    /// Artifact directory; defaults to the scenario's out_dir, then ".".
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Force full trace recording on or off.
    #[arg(long, value_enum, value_name = "on|off")]
    trace: Option<Toggle>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario file (JSON).
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    /// Inclusive seed range, written A..B.
    #[arg(long, value_name = "A..B")]
    seeds: String,
    /// Override the scenario's channel mode.
    #[arg(long, value_enum, value_name = "MODE")]
    broadcast: Option<BroadcastArg>,
    /// Artifact directory; defaults to the scenario's out_dir, then ".".
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Seed for sampling the two input values.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Directory for the JSON report; omitted means stdout only.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BroadcastArg {
    Ideal,
    Bracha,
}

impl From<BroadcastArg> for BroadcastMode {
    fn from(arg: BroadcastArg) -> Self {
        match arg {
            BroadcastArg::Ideal => BroadcastMode::Ideal,
            BroadcastArg::Bracha => BroadcastMode::Bracha,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::DemoLowerBound(args) => cmd_demo(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

const PASS: ExitCode = ExitCode::SUCCESS;
const FAILURE: ExitCode = ExitCode::FAILURE;

fn load_scenario(path: &Path) -> anyhow::Result<ScenarioFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    parse_scenario(&text).with_context(|| format!("parsing scenario {}", path.display()))
}

/// Scenario → validated config, with command-line overrides applied.
fn build_config(
    file: ScenarioFile,
    seed: Option<u64>,
    broadcast: Option<BroadcastArg>,
    trace: Option<Toggle>,
) -> anyhow::Result<SimConfig> {
    let mut config = file.into_config()?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(mode) = broadcast {
        config.broadcast_mode = mode.into();
    }
    if let Some(toggle) = trace {
        config.record_trace = matches!(toggle, Toggle::On);
    }
    if let Ok(raw) = std::env::var("VAAD_MAX_EVENTS") {
        config.max_events = raw
            .parse()
            .with_context(|| format!("VAAD_MAX_EVENTS: not a count: {raw:?}"))?;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(flag: Option<PathBuf>, file_out: &Option<String>) -> PathBuf {
    flag.unwrap_or_else(|| file_out.as_deref().map_or_else(|| PathBuf::from("."), PathBuf::from))
}

fn print_monitors(report: &MonitorReport) {
    for check in &report.checks {
        if check.passed {
            println!("monitor {}: pass", check.name);
        } else {
            println!("monitor {}: FAIL ({})", check.name, check.detail);
        }
    }
}

fn print_run_summary(result: &SimResult, epsilon: f64) {
    println!("terminated: {} correct nodes", result.outputs.len());
    println!("final rounds: max {}", result.final_round_max());
    println!("max pairwise output distance: {} (epsilon {})", result.max_pairwise_output(), epsilon);
    println!("events: {}", result.event_count);
    println!("trace digest: {}", result.trace_digest);
}

fn write_run_artifacts(dir: &Path, result: &SimResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, metrics::metrics_csv(result))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!("metrics: {}", metrics_path.display());
    if let Some(lines) = &result.trace_lines {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        let trace_path = dir.join("trace.jsonl");
        fs::write(&trace_path, text)
            .with_context(|| format!("writing {}", trace_path.display()))?;
        println!("trace: {}", trace_path.display());
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let file = load_scenario(&args.scenario)?;
    let dir = out_dir(args.out, &file.out_dir);
    let config = build_config(file, args.seed, args.broadcast, args.trace)?;
    let epsilon = config.epsilon;
    match sim::run(config) {
        Ok(result) => {
            print_monitors(&result.monitor_report);
            print_run_summary(&result, epsilon);
            write_run_artifacts(&dir, &result)?;
            Ok(PASS)
        }
        Err(SimError::MonitorViolation { monitor, detail, result }) => {
            print_monitors(&result.monitor_report);
            print_run_summary(&result, epsilon);
            write_run_artifacts(&dir, &result)?;
            eprintln!("monitor '{monitor}' failed: {detail}");
            Ok(FAILURE)
        }
        Err(SimError::EventCap { cap, events, result }) => {
            print_monitors(&result.monitor_report);
            write_run_artifacts(&dir, &result)?;
            eprintln!("event budget exhausted after {events} deliveries (cap {cap})");
            Ok(FAILURE)
        }
        Err(SimError::Config(err)) => Err(err.into()),
    }
}

fn parse_seed_range(text: &str) -> anyhow::Result<Vec<u64>> {
    let (a, b) = text
        .split_once("..")
        .with_context(|| format!("--seeds expects A..B, got {text:?}"))?;
    let a: u64 = a.trim().parse().with_context(|| format!("--seeds start: {a:?}"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("--seeds end: {b:?}"))?;
    if a > b {
        bail!("--seeds range is inverted: {a} > {b}");
    }
    Ok((a..=b).collect())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let seeds = parse_seed_range(&args.seeds)?;
    let file = load_scenario(&args.scenario)?;
    let dir = out_dir(args.out, &file.out_dir);
    let config = build_config(file, None, args.broadcast, None)?;
    let rows = match sim::run_sweep(&config, &seeds) {
        Ok(rows) => rows,
        Err(SimError::Config(err)) => return Err(err.into()),
        Err(err) => {
            eprintln!("{err}");
            return Ok(FAILURE);
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let sweep_path = dir.join("sweep.csv");
    fs::write(&sweep_path, metrics::sweep_csv(&rows))
        .with_context(|| format!("writing {}", sweep_path.display()))?;
    let agg = sim::aggregate(&rows);
    println!("runs: {}", agg.runs);
    println!("passes: {}", agg.passes);
    println!("sweep: {}", sweep_path.display());
    if agg.passes < agg.runs {
        for row in &rows {
            if let Some(failure) = row.result.monitor_report.first_failure() {
                eprintln!("seed {}: monitor '{}' failed: {}", row.seed, failure.name, failure.detail);
            }
        }
        return Ok(FAILURE);
    }
    Ok(PASS)
}

fn demo_report_json(outcome: &demo::DemoOutcome) -> String {
    let clusters: Vec<serde_json::Value> = outcome
        .clusters
        .iter()
        .map(|(rep, members)| {
            serde_json::json!({ "representative": rep, "members": members })
        })
        .collect();
    let report = serde_json::json!({
        "epsilon": demo::DEMO_EPSILON,
        "inputs": { "v1": outcome.inputs.0, "v2": outcome.inputs.1 },
        "clusters": clusters,
        "separation": outcome.separation,
        "contrast_monitors_pass": outcome.contrast.monitor_report.all_passed(),
        "contrast_clusters": demo::clusters(&outcome.contrast.outputs, demo::DEMO_EPSILON).len(),
    });
    let mut text = serde_json::to_string_pretty(&report).expect("serializable report");
    text.push('\n');
    text
}

fn cmd_demo(args: DemoArgs) -> anyhow::Result<ExitCode> {
    let outcome = match demo::run_demo(args.seed) {
        Ok(outcome) => outcome,
        Err(SimError::Config(err)) => return Err(err.into()),
        Err(err) => {
            eprintln!("demonstration regression: {err}");
            return Ok(FAILURE);
        }
    };
    println!("inputs: v1 = {}, v2 = {}", outcome.inputs.0, outcome.inputs.1);
    println!("clusters: {}", outcome.clusters.len());
    for (rep, members) in &outcome.clusters {
        println!("  {rep} <- nodes {members:?}");
    }
    println!("separation: {} (epsilon {})", outcome.separation, demo::DEMO_EPSILON);
    println!(
        "contrast (n = 3t + 1): monitors {}, {} cluster(s)",
        if outcome.contrast.monitor_report.all_passed() { "pass" } else { "FAIL" },
        demo::clusters(&outcome.contrast.outputs, demo::DEMO_EPSILON).len()
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("demo_report.json");
        fs::write(&path, demo_report_json(&outcome))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("report: {}", path.display());
    }
    if outcome.separation <= demo::DEMO_EPSILON {
        eprintln!(
            "demonstration regression: separation {} did not exceed epsilon {}",
            outcome.separation,
            demo::DEMO_EPSILON
        );
        return Ok(FAILURE);
    }
    Ok(PASS)
}
