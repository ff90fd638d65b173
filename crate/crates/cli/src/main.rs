//! `elasflow`: run, simulate, resume and report on workflows.
//!
//! Every subcommand is a thin wrapper over `elasflow::run` and
//! `elasflow::report`; the exit status is the run's exit code
//! (0 completed, 1 failed, 3 checkpointed) or 2 for usage and config errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use elasflow::elasticity::{read_csv, write_csv};
use elasflow::report::{elasticity_stats, format_scaling_table, gantt, scaling_table, ScalingPoint};
use elasflow::resources::InfraConfig;
use elasflow::run::{
    execute, resume, BackendSpec, ProviderSpec, RunOutcome, RunSpec, ELASTICITY_FILE, GRAPH_FILE, SUMMARY_FILE,
    TRACE_FILE,
};
use elasflow::scheduler::Trace;
use elasflow::sim::{FaultPlan, Scenario};
use elasflow::slurm::SlurmConfig;
use elasflow::workflows::{apply_overrides, load_workflow, Workflow};

#[derive(Parser)]
#[command(name = "elasflow", version, about = "Task-based workflows on elastic node pools")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workflow on the wall clock.
    Run(RunArgs),
    /// Execute a workflow in the discrete-event simulator.
    Simulate(SimArgs),
    /// Continue a stopped run in a new run directory.
    Resume {
        run_dir: PathBuf,
        /// Stop after this many orchestrator messages.
        #[arg(long)]
        stop_after_messages: Option<u64>,
    },
    /// Derive tables and timelines from finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Workflow document (JSON).
    workflow: PathBuf,
    /// Infrastructure description (TOML).
    infra: PathBuf,
    /// Override a workflow parameter, e.g. `--param n_structures=16`.
    #[arg(long = "param", value_name = "K=V", value_parser = parse_param)]
    params: Vec<(String, u64)>,
    /// Parent directory of the `run-NNN` directory.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Request a checkpointed stop at this time (seconds since start).
    #[arg(long)]
    stop_at: Option<f64>,
    /// Stop after this many orchestrator messages.
    #[arg(long)]
    stop_after_messages: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    /// Static nodes only.
    None,
    /// Provisioning delays drawn from the infrastructure's delay model.
    Sim,
    /// Expand and shrink the enclosing SLURM job.
    Slurm,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "none")]
    provider: Provider,
    /// Command run per task attempt (split on whitespace). Placeholders:
    /// {task_type} {task_id} {attempt} {fingerprint}. Without it each task
    /// sleeps for --mock-seconds.
    #[arg(long)]
    executor: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    mock_seconds: f64,
    /// Signal that triggers a checkpointed stop; repeatable.
    #[arg(long = "stop-signal", default_values_t = ["SIGTERM".to_string(), "SIGINT".to_string()])]
    stop_signals: Vec<String>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario file (TOML): seed, dispatch latency, durations, faults.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fault plan (TOML) replacing the scenario's `faults` table.
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    /// Speedup and efficiency across runs (first run is the baseline).
    Scaling,
    /// Elasticity statistics and the PW/IC/node series.
    Elasticity,
    /// Per-node task timeline.
    Gantt,
    /// Task graph in DOT.
    Graph,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(value_enum)]
    kind: ReportKind,
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Weak scaling: efficiency is the makespan ratio.
    #[arg(long)]
    weak: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_param(s: &str) -> Result<(String, u64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected K=V, got `{s}`"))?;
    let v = v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))?;
    Ok((k.to_string(), v))
}

fn load_inputs(c: &Common) -> Result<(Workflow, InfraConfig)> {
    let mut def = load_workflow(&c.workflow)?;
    apply_overrides(&mut def, &c.params);
    let wf = def.expand().with_context(|| c.workflow.display().to_string())?;
    Ok((wf, InfraConfig::load(&c.infra)?))
}

fn run_cmd(a: &RunArgs) -> Result<RunOutcome> {
    let (wf, infra) = load_inputs(&a.common)?;
    let provider = match a.provider {
        Provider::None => ProviderSpec::None,
        Provider::Sim => ProviderSpec::Sim,
        Provider::Slurm => {
            let env: BTreeMap<String, String> = std::env::vars().collect();
            ProviderSpec::Slurm { config: SlurmConfig::from_env(&env)? }
        }
    };
    let command = a.executor.as_ref().map(|s| s.split_whitespace().map(String::from).collect());
    let backend = BackendSpec::Local {
        command,
        mock_seconds: a.mock_seconds,
        provider,
        stop_signals: a.stop_signals.clone(),
        stop_at: a.common.stop_at,
    };
    Ok(execute(&a.common.out_dir, &RunSpec::new(wf, infra, backend), a.common.stop_after_messages)?)
}

/// The scenario the `simulate` flags describe.
fn scenario_from(a: &SimArgs) -> Result<Scenario> {
    let mut s = match &a.scenario {
        Some(p) => Scenario::load(p)?,
        None => Scenario::default(),
    };
    if let Some(p) = &a.faults {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        s.faults = FaultPlan::from_toml_str(&text).with_context(|| p.display().to_string())?;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if a.common.stop_at.is_some() {
        s.faults.stop_at = a.common.stop_at;
    }
    s.validate()?;
    Ok(s)
}

fn simulate_cmd(a: &SimArgs) -> Result<RunOutcome> {
    let (wf, infra) = load_inputs(&a.common)?;
    let spec = RunSpec::new(wf, infra, BackendSpec::Sim { scenario: scenario_from(a)? });
    Ok(execute(&a.common.out_dir, &spec, a.common.stop_after_messages)?)
}

fn read_summary(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    Ok(serde_json::from_str(&text)?)
}

fn scaling_point(dir: &Path) -> Result<ScalingPoint> {
    let spec = RunSpec::load(dir)?;
    let summary = read_summary(dir)?;
    let makespan = summary["makespan"].as_f64().ok_or_else(|| anyhow!("{}: no makespan", dir.display()))?;
    Ok(ScalingPoint {
        nodes: spec.infra.static_node_list().len() as u32,
        size: spec.workflow.steps.len() as u64,
        makespan,
    })
}

fn report_cmd(a: &ReportArgs) -> Result<String> {
    let single = || -> Result<&PathBuf> {
        match a.run_dirs.as_slice() {
            [d] => Ok(d),
            _ => bail!("this report takes exactly one run directory"),
        }
    };
    let mut out = String::new();
    match a.kind {
        ReportKind::Scaling => {
            let points: Vec<ScalingPoint> = a.run_dirs.iter().map(|d| scaling_point(d)).collect::<Result<_>>()?;
            out = format_scaling_table(&scaling_table(&points, a.weak));
        }
        ReportKind::Elasticity => {
            let path = single()?.join(ELASTICITY_FILE);
            let f = fs::File::open(&path).with_context(|| path.display().to_string())?;
            let rows = read_csv(BufReader::new(f))?;
            let s = elasticity_stats(&rows);
            out.push_str(&format!(
                "# evaluations={} nodes_up min={} max={} mean={:.2} max_pw={:.1} underprovisioned={}\n",
                s.evaluations, s.min_nodes_up, s.max_nodes_up, s.mean_nodes_up, s.max_pw, s.underprovisioned
            ));
            let mut csv = Vec::new();
            write_csv(&rows, &mut csv)?;
            out.push_str(&String::from_utf8(csv)?);
        }
        ReportKind::Gantt => {
            let path = single()?.join(TRACE_FILE);
            let f = fs::File::open(&path).with_context(|| path.display().to_string())?;
            let rows = gantt(&Trace::read_jsonl(BufReader::new(f))?);
            for r in rows {
                out.push_str(&serde_json::to_string(&r)?);
                out.push('\n');
            }
        }
        ReportKind::Graph => {
            let path = single()?.join(GRAPH_FILE);
            out = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
        }
    }
    Ok(out)
}

fn report_outcome(o: &RunOutcome) -> i32 {
    let s = &o.result.summary;
    println!("{}", o.dir.display());
    eprintln!(
        "{:?}: makespan {:.1}s, {} executed, {} skipped, {} ignored failures",
        s.status, s.makespan, s.executed_tasks, s.skipped, s.ignored_failures
    );
    if let Some(e) = &s.error {
        eprintln!("error: {e}");
    }
    s.exit_code
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match &cli.command {
        Command::Run(a) => run_cmd(a).map(|o| report_outcome(&o)),
        Command::Simulate(a) => simulate_cmd(a).map(|o| report_outcome(&o)),
        Command::Resume { run_dir, stop_after_messages } => {
            resume(run_dir, *stop_after_messages).map(|o| report_outcome(&o)).map_err(Into::into)
        }
        Command::Report(a) => report_cmd(a).and_then(|text| {
            match &a.out {
                Some(p) => fs::write(p, text).with_context(|| p.display().to_string())?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            Ok(0)
        }),
    };
    match code {
        Ok(c) => std::process::exit(c),
        Err(e) => {
            eprintln!("elasflow: {e:#}");
            std::process::exit(2);
        }
    }
}
