//! Run directories. Every execution writes a fresh `run-NNN` directory:
//!
//! ```text
//! run.json         what was run (workflow, infrastructure, backend)
//! trace.jsonl      scheduler trace
//! elasticity.csv   one row per elasticity evaluation
//! summary.json     outcome and counters
//! graph.dot        the task graph with final states
//! manifest.json    checkpoint records of completed tasks
//! outputs/         task outputs, addressed by data token
//! ```
//!
//! A resumed run gets its own directory; the previous one is never touched.

use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{NoProvider, NodeProvider};
use crate::elasticity::write_csv;
use crate::engine::{run_workflow, EngineError, EngineOptions, OutputDirs, RunResult};
use crate::local::{LocalExecutor, LocalRuntime, SignalBridge};
use crate::reliability::{signal_number, CheckpointManifest, EXIT_FAILURE};
use crate::resources::InfraConfig;
use crate::sim::{Scenario, SimProvider};
use crate::slurm::{ProcessRunner, SlurmConfig, SlurmProvider};
use crate::taskgraph::export_dot;
use crate::workflows::Workflow;

pub const RUN_VERSION: u32 = 1;

pub const RUN_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const ELASTICITY_FILE: &str = "elasticity.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GRAPH_FILE: &str = "graph.dot";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTPUTS_DIR: &str = "outputs";
const STAGING_DIR: &str = ".staging";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Config(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    None,
    /// Simulated provisioning delays on the wall clock.
    Sim,
    Slurm { config: SlurmConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Sim {
        scenario: Scenario,
    },
    Local {
        /// Command per attempt; a mock sleep of `mock_seconds` when absent.
        #[serde(default)]
        command: Option<Vec<String>>,
        #[serde(default)]
        mock_seconds: f64,
        provider: ProviderSpec,
        /// Signals that request a checkpointed stop.
        #[serde(default)]
        stop_signals: Vec<String>,
        /// Wall-clock seconds after which a stop is requested.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stop_at: Option<f64>,
    },
}

/// Everything needed to reproduce a run; persisted as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_version: u32,
    pub workflow: Workflow,
    pub infra: InfraConfig,
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
}

impl RunSpec {
    pub fn new(workflow: Workflow, infra: InfraConfig, backend: BackendSpec) -> Self {
        Self { run_version: RUN_VERSION, workflow, infra, backend, resumed_from: None }
    }

    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let spec: RunSpec = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if spec.run_version != RUN_VERSION {
            return Err(RunError::Config(format!("{}: unsupported run_version {}", path.display(), spec.run_version)));
        }
        Ok(spec)
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub result: RunResult,
}

/// Creates the next free `run-NNN` under `base`; never reuses a directory.
pub fn create_run_dir(base: &Path) -> Result<PathBuf, RunError> {
    fs::create_dir_all(base).map_err(|e| io_err(base, e))?;
    for n in 1.. {
        let dir = base.join(format!("run-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

/// Runs `spec` in a new directory under `base`.
pub fn execute(base: &Path, spec: &RunSpec, stop_after_messages: Option<u64>) -> Result<RunOutcome, RunError> {
    let dir = create_run_dir(base)?;
    execute_in(dir, spec, None, stop_after_messages)
}

/// Reruns the run in `prev` into a new sibling directory, skipping every
/// task whose checkpoint record and outputs are intact.
pub fn resume(prev: &Path, stop_after_messages: Option<u64>) -> Result<RunOutcome, RunError> {
    let mut spec = RunSpec::load(prev)?;
    match &mut spec.backend {
        BackendSpec::Sim { scenario } => scenario.faults.stop_at = None,
        BackendSpec::Local { stop_at, .. } => *stop_at = None,
    }
    spec.resumed_from = Some(prev.display().to_string());
    let manifest_path = prev.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        Some(CheckpointManifest::load(&manifest_path).map_err(|e| RunError::Config(e.to_string()))?)
    } else {
        warn!("{} missing: rerunning everything", manifest_path.display());
        None
    };
    let base = prev.parent().unwrap_or(Path::new("."));
    let dir = create_run_dir(base)?;
    copy_tree(&prev.join(OUTPUTS_DIR), &dir.join(OUTPUTS_DIR))?;
    execute_in(dir, &spec, manifest, stop_after_messages)
}

/// Simulates `spec` without touching the filesystem.
pub fn simulate_in_memory(spec: &RunSpec, stop_after_messages: Option<u64>) -> Result<RunResult, RunError> {
    let BackendSpec::Sim { scenario } = &spec.backend else {
        return Err(RunError::Config("in-memory runs need the simulated backend".into()));
    };
    let opts = EngineOptions { stop_after_messages, ..Default::default() };
    Ok(crate::engine::simulate(&spec.workflow, &spec.infra, scenario, opts)?)
}

fn execute_in(
    dir: PathBuf,
    spec: &RunSpec,
    restart: Option<CheckpointManifest>,
    stop_after_messages: Option<u64>,
) -> Result<RunOutcome, RunError> {
    let run_json = serde_json::to_string_pretty(spec).expect("run spec serializes");
    write_file(&dir.join(RUN_FILE), run_json.as_bytes())?;
    let opts = EngineOptions {
        stop_after_messages,
        outputs: Some(OutputDirs { staging: dir.join(STAGING_DIR), outputs: dir.join(OUTPUTS_DIR) }),
        restart,
        ..Default::default()
    };
    let mut result = match &spec.backend {
        BackendSpec::Sim { scenario } => crate::engine::simulate(&spec.workflow, &spec.infra, scenario, opts)?,
        BackendSpec::Local { command, mock_seconds, provider, stop_signals, stop_at } => {
            let opts = EngineOptions { stop_at: *stop_at, ..opts };
            let mut rt = LocalRuntime::new();
            let mut exec = LocalExecutor::new(&rt, command.clone(), *mock_seconds);
            let mut provider: Box<dyn NodeProvider> = match provider {
                ProviderSpec::None => Box::new(NoProvider),
                ProviderSpec::Sim => {
                    let e = &spec.infra.elasticity;
                    Box::new(SimProvider::new(0, e.provision_delay.clone(), e.elastic_max))
                }
                ProviderSpec::Slurm { config } => Box::new(
                    SlurmProvider::new(config, Box::new(ProcessRunner)).map_err(|e| RunError::Config(e.to_string()))?,
                ),
            };
            let signals: Vec<i32> = stop_signals
                .iter()
                .map(|s| signal_number(s).ok_or_else(|| RunError::Config(format!("unknown signal `{s}`"))))
                .collect::<Result<_, _>>()?;
            let _bridge = if signals.is_empty() {
                None
            } else {
                Some(SignalBridge::install(&signals, rt.sender()).map_err(|e| RunError::Config(e.to_string()))?)
            };
            run_workflow(&spec.workflow, &spec.infra, &mut rt, &mut exec, provider.as_mut(), opts)?
        }
    };
    if let Err(e) = result.manifest.save(&dir.join(MANIFEST_FILE)) {
        warn!("{e}");
        result.summary.exit_code = EXIT_FAILURE;
        result.summary.error = Some(format!("checkpoint manifest not written: {e}"));
    }
    write_artifacts(&dir, &result)?;
    info!("run written to {}", dir.display());
    Ok(RunOutcome { dir, result })
}

/// Trace, elasticity log, summary and graph of a finished run.
pub fn write_artifacts(dir: &Path, result: &RunResult) -> Result<(), RunError> {
    let path = dir.join(TRACE_FILE);
    let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    result.trace.write_jsonl(BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
    let path = dir.join(ELASTICITY_FILE);
    let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    write_csv(&result.elasticity, BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
    let summary = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
    write_file(&dir.join(GRAPH_FILE), export_dot(&result.graph).as_bytes())
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), RunError> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), RunError> {
    let entries = match fs::read_dir(from) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(from, e)),
    };
    fs::create_dir_all(to).map_err(|e| io_err(to, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(from, e))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        if src.is_dir() {
            copy_tree(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| io_err(&dst, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RunStatus;
    use crate::resources::NodeShape;
    use crate::sim::DurationSpec;
    use crate::workflows::generate_binding_affinity;
    use std::collections::BTreeMap;

    fn spec(stop_at: Option<f64>) -> RunSpec {
        let infra = InfraConfig::homogeneous(2, NodeShape { cpu_units: 4, gpu_units: 0 }, crate::workflows::task_env(1, 4, 0, 1e4));
        let mut scenario = Scenario::default();
        scenario.durations.default = DurationSpec::constant(10.0);
        scenario.faults.stop_at = stop_at;
        RunSpec::new(generate_binding_affinity(2), infra, BackendSpec::Sim { scenario })
    }

    fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn run_directories_are_never_reused() {
        let base = tempfile::tempdir().unwrap();
        let a = create_run_dir(base.path()).unwrap();
        let b = create_run_dir(base.path()).unwrap();
        assert_eq!(a.file_name().unwrap(), "run-001");
        assert_eq!(b.file_name().unwrap(), "run-002");
    }

    #[test]
    fn run_writes_every_artifact() {
        let base = tempfile::tempdir().unwrap();
        let out = execute(base.path(), &spec(None), None).unwrap();
        for f in [RUN_FILE, TRACE_FILE, ELASTICITY_FILE, SUMMARY_FILE, GRAPH_FILE, MANIFEST_FILE, OUTPUTS_DIR] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
        assert!(!out.dir.join(STAGING_DIR).exists());
        assert_eq!(RunSpec::load(&out.dir).unwrap(), spec(None));
        let summary: crate::engine::Summary =
            serde_json::from_str(&fs::read_to_string(out.dir.join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(summary, out.result.summary);
        assert!(out.dir.join(OUTPUTS_DIR).join("delta_g.dat").exists());
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let base = tempfile::tempdir().unwrap();
        let full = execute(base.path(), &spec(None), None).unwrap();
        let stopped = execute(base.path(), &spec(Some(35.0)), None).unwrap();
        assert_eq!(stopped.result.summary.status, RunStatus::Checkpointed);
        let resumed = resume(&stopped.dir, None).unwrap();
        assert_eq!(resumed.result.summary.status, RunStatus::Completed);
        assert!(resumed.result.summary.skipped > 0);
        assert_eq!(read_tree(&full.dir.join(OUTPUTS_DIR)), read_tree(&resumed.dir.join(OUTPUTS_DIR)));
        assert_eq!(resumed.dir.file_name().unwrap(), "run-003");
    }

    #[test]
    fn resume_without_manifest_reruns_everything() {
        let base = tempfile::tempdir().unwrap();
        let stopped = execute(base.path(), &spec(Some(35.0)), None).unwrap();
        fs::remove_file(stopped.dir.join(MANIFEST_FILE)).unwrap();
        let resumed = resume(&stopped.dir, None).unwrap();
        assert_eq!(resumed.result.summary.skipped, 0);
        assert_eq!(resumed.result.summary.exit_code, 0);
    }

    #[test]
    fn in_memory_matches_on_disk_trace() {
        let base = tempfile::tempdir().unwrap();
        let disk = execute(base.path(), &spec(None), None).unwrap();
        let mem = simulate_in_memory(&spec(None), None).unwrap();
        assert_eq!(fs::read_to_string(disk.dir.join(TRACE_FILE)).unwrap(), mem.trace.to_jsonl());
    }
}
