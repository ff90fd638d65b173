//! Elastic nodes on a SLURM cluster: expansion jobs submitted with an
//! `expand:` dependency on the main job, polled until running, attached to
//! the main allocation and cancelled again on shrink.
//!
//! All cluster interaction goes through a [`CommandRunner`]; the adapter
//! only looks at exit codes and output text.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{NodeProvider, ProviderError, ProviderEvent, ProvisionTicket, Runtime};

pub const DEFAULT_TEMPLATES: &str = include_str!("slurm_templates.toml");
pub const WORKER_LAUNCHER_VAR: &str = "ELASFLOW_WORKER_LAUNCHER";
pub const TEMPLATES_VAR: &str = "ELASFLOW_SLURM_TEMPLATES";
pub const READY_DIR_VAR: &str = "ELASFLOW_READY_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlurmError {
    #[error("templates: {0}")]
    Template(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("`{command}` exited with {code}: {stderr}")]
    Rejected { command: String, code: i32, stderr: String },
    #[error("could not parse a job id from `{0}`")]
    JobIdParse(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} is not running")]
    NotRunning(String),
    #[error("job {0} is not drained")]
    NotDrained(String),
    #[error("job {0} was already shrunk")]
    AlreadyShrunk(String),
    #[error("malformed host list `{0}`")]
    HostList(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    pub fn ok(stdout: &str) -> Self {
        Self { code: 0, stdout: stdout.into(), stderr: String::new() }
    }

    pub fn fail(code: i32, stderr: &str) -> Self {
        Self { code, stdout: String::new(), stderr: stderr.into() }
    }
}

pub trait CommandRunner: Send {
    fn run(&mut self, argv: &[String]) -> CommandOutput;
}

/// Runs commands as real subprocesses.
#[derive(Debug, Default)]
pub struct ProcessRunner;

impl CommandRunner for ProcessRunner {
    fn run(&mut self, argv: &[String]) -> CommandOutput {
        let Some((prog, args)) = argv.split_first() else {
            return CommandOutput::fail(127, "empty command");
        };
        match Command::new(prog).args(args).output() {
            Ok(o) => CommandOutput {
                code: o.status.code().unwrap_or(-1),
                stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
                stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
            },
            Err(e) => CommandOutput::fail(127, &e.to_string()),
        }
    }
}

/// Mock runner: answers from per-program queues of scripted outputs and
/// records every argv. Unscripted commands succeed with empty output.
#[derive(Clone, Debug, Default)]
pub struct ScriptedRunner {
    script: Arc<Mutex<BTreeMap<String, Vec<CommandOutput>>>>,
    log: Arc<Mutex<Vec<(Vec<String>, CommandOutput)>>>,
}

impl ScriptedRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues `out` as the next answer for `program`.
    pub fn push(&self, program: &str, out: CommandOutput) -> &Self {
        self.script.lock().unwrap().entry(program.to_string()).or_default().push(out);
        self
    }

    pub fn argv_log(&self) -> Vec<Vec<String>> {
        self.log.lock().unwrap().iter().map(|(a, _)| a.clone()).collect()
    }

    /// Recorded (argv, output) pairs, for replay.
    pub fn transcript(&self) -> Vec<(Vec<String>, CommandOutput)> {
        self.log.lock().unwrap().clone()
    }

    /// Runner answering with the outputs of a recorded transcript in order.
    pub fn replaying(transcript: &[(Vec<String>, CommandOutput)]) -> Self {
        let r = Self::new();
        for (argv, out) in transcript {
            r.push(&argv[0], out.clone());
        }
        r
    }
}

impl CommandRunner for ScriptedRunner {
    fn run(&mut self, argv: &[String]) -> CommandOutput {
        let out = {
            let mut s = self.script.lock().unwrap();
            match s.get_mut(argv.first().map(String::as_str).unwrap_or("")) {
                Some(q) if !q.is_empty() => q.remove(0),
                _ => CommandOutput::ok(""),
            }
        };
        self.log.lock().unwrap().push((argv.to_vec(), out.clone()));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandTemplates {
    pub expand: Vec<String>,
    pub poll: Vec<String>,
    pub update: Vec<String>,
    pub cancel: Vec<String>,
}

impl Default for CommandTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }
}

impl CommandTemplates {
    pub fn parse(text: &str) -> Result<Self, SlurmError> {
        let t: CommandTemplates = toml::from_str(text).map_err(|e| SlurmError::Template(e.to_string()))?;
        for (name, argv) in [("expand", &t.expand), ("poll", &t.poll), ("update", &t.update), ("cancel", &t.cancel)] {
            if argv.is_empty() {
                return Err(SlurmError::Template(format!("`{name}` is empty")));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, SlurmError> {
        let text = std::fs::read_to_string(path).map_err(|e| SlurmError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Replaces every `{key}` in every token; unknown keys are an error.
pub fn render(template: &[String], vars: &[(&str, &str)]) -> Result<Vec<String>, SlurmError> {
    template
        .iter()
        .map(|tok| {
            let mut out = String::new();
            let mut rest = tok.as_str();
            while let Some(open) = rest.find('{') {
                let close = rest[open..]
                    .find('}')
                    .map(|c| open + c)
                    .ok_or_else(|| SlurmError::Template(format!("unterminated placeholder in `{tok}`")))?;
                out.push_str(&rest[..open]);
                let key = &rest[open + 1..close];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| SlurmError::Template(format!("unknown placeholder `{{{key}}}`")))?;
                out.push_str(value);
                rest = &rest[close + 1..];
            }
            out.push_str(rest);
            Ok(out)
        })
        .collect()
}

/// Expands a SLURM host list such as `node[01-03,7],gpu5`.
pub fn expand_hostlist(list: &str) -> Result<Vec<String>, SlurmError> {
    let err = || SlurmError::HostList(list.to_string());
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0usize);
    for (i, ch) in list.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&list[start..i]);
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 || depth > 1 {
            return Err(err());
        }
    }
    if depth != 0 {
        return Err(err());
    }
    parts.push(&list[start..]);
    let mut hosts = Vec::new();
    for part in parts.into_iter().map(str::trim).filter(|p| !p.is_empty()) {
        let Some(open) = part.find('[') else {
            hosts.push(part.to_string());
            continue;
        };
        let close = part.find(']').ok_or_else(err)?;
        let (prefix, body, suffix) = (&part[..open], &part[open + 1..close], &part[close + 1..]);
        for range in body.split(',') {
            let (lo, hi) = range.split_once('-').unwrap_or((range, range));
            let width = lo.len();
            let (a, b): (u64, u64) = (lo.parse().map_err(|_| err())?, hi.parse().map_err(|_| err())?);
            if a > b {
                return Err(err());
            }
            for k in a..=b {
                hosts.push(format!("{prefix}{k:0width$}{suffix}"));
            }
        }
    }
    Ok(hosts)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobKind {
    Main,
    Expand,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Pending,
    Running,
    Cancelled,
    Completed,
}

impl JobState {
    fn parse(s: &str) -> JobState {
        match s {
            "RUNNING" => JobState::Running,
            "PENDING" | "CONFIGURING" | "REQUEUED" | "RESIZING" | "SUSPENDED" => JobState::Pending,
            "COMPLETED" | "COMPLETING" => JobState::Completed,
            _ => JobState::Cancelled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlurmJobRef {
    pub job_id: String,
    pub kind: JobKind,
    pub node_ids: Vec<String>,
    pub state: JobState,
    /// Main job this expansion depends on.
    pub depends_on: Option<String>,
    pub n_nodes: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlurmConfig {
    pub main_job_id: String,
    pub qos: String,
    /// Nodes of the main job before any expansion.
    pub main_nodes: u32,
    pub worker_launcher: String,
    pub poll_interval: f64,
    /// Directory where workers drop `<job_id>.ready` once registered.
    pub ready_dir: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl SlurmConfig {
    /// Reads the main job's identity from the SLURM job environment.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Self, SlurmError> {
        let get = |k: &str| env.get(k).cloned().ok_or_else(|| SlurmError::Config(format!("`{k}` is not set")));
        let main_nodes = get("SLURM_JOB_NUM_NODES")?
            .parse()
            .map_err(|_| SlurmError::Config("SLURM_JOB_NUM_NODES is not a number".into()))?;
        Ok(Self {
            main_job_id: get("SLURM_JOB_ID")?,
            qos: get("SLURM_JOB_QOS")?,
            main_nodes,
            worker_launcher: get(WORKER_LAUNCHER_VAR)?,
            poll_interval: 5.0,
            ready_dir: env.get(READY_DIR_VAR).map(PathBuf::from),
            templates: env.get(TEMPLATES_VAR).map(PathBuf::from),
        })
    }
}

/// Protocol state machine over a command runner.
pub struct SlurmAdapter {
    runner: Box<dyn CommandRunner>,
    templates: CommandTemplates,
    main: SlurmJobRef,
    qos: String,
    worker_launcher: String,
    jobs: BTreeMap<String, SlurmJobRef>,
    attached: BTreeSet<String>,
    shrunk: BTreeSet<String>,
}

/// Observable adapter state, for replay comparisons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterState {
    pub main_nodes: u32,
    pub jobs: BTreeMap<String, SlurmJobRef>,
    pub attached: BTreeSet<String>,
    pub shrunk: BTreeSet<String>,
}

impl SlurmAdapter {
    pub fn new(cfg: &SlurmConfig, templates: CommandTemplates, runner: Box<dyn CommandRunner>) -> Self {
        let main = SlurmJobRef {
            job_id: cfg.main_job_id.clone(),
            kind: JobKind::Main,
            node_ids: Vec::new(),
            state: JobState::Running,
            depends_on: None,
            n_nodes: cfg.main_nodes,
        };
        Self {
            runner,
            templates,
            main,
            qos: cfg.qos.clone(),
            worker_launcher: cfg.worker_launcher.clone(),
            jobs: BTreeMap::new(),
            attached: BTreeSet::new(),
            shrunk: BTreeSet::new(),
        }
    }

    pub fn state(&self) -> AdapterState {
        AdapterState {
            main_nodes: self.main.n_nodes,
            jobs: self.jobs.clone(),
            attached: self.attached.clone(),
            shrunk: self.shrunk.clone(),
        }
    }

    pub fn job(&self, id: &str) -> Option<&SlurmJobRef> {
        self.jobs.get(id)
    }

    fn exec(&mut self, argv: Vec<String>) -> Result<CommandOutput, SlurmError> {
        let out = self.runner.run(&argv);
        if out.code != 0 {
            return Err(SlurmError::Rejected { command: argv.join(" "), code: out.code, stderr: out.stderr.trim().to_string() });
        }
        Ok(out)
    }

    /// Target node count of the main job with the attached expansions.
    fn target_nodes(&self) -> u32 {
        self.main.n_nodes + self.attached.iter().filter_map(|j| self.jobs.get(j)).map(|j| j.n_nodes).sum::<u32>()
    }

    pub fn expand(&mut self, n_nodes: u32) -> Result<SlurmJobRef, SlurmError> {
        if self.main.state != JobState::Running {
            return Err(SlurmError::NotRunning(self.main.job_id.clone()));
        }
        let n = n_nodes.to_string();
        let argv = render(
            &self.templates.expand,
            &[("main_job_id", &self.main.job_id), ("qos", &self.qos), ("n_nodes", &n), ("worker_launcher", &self.worker_launcher)],
        )?;
        let out = self.exec(argv)?;
        let job_id = parse_job_id(&out.stdout)?;
        let job = SlurmJobRef {
            job_id: job_id.clone(),
            kind: JobKind::Expand,
            node_ids: Vec::new(),
            state: JobState::Pending,
            depends_on: Some(self.main.job_id.clone()),
            n_nodes,
        };
        self.jobs.insert(job_id, job.clone());
        Ok(job)
    }

    pub fn poll(&mut self, job_id: &str) -> Result<(JobState, Vec<String>), SlurmError> {
        if !self.jobs.contains_key(job_id) {
            return Err(SlurmError::UnknownJob(job_id.to_string()));
        }
        let argv = render(&self.templates.poll, &[("job_id", job_id)])?;
        let out = self.runner.run(&argv);
        let line = out.stdout.lines().map(str::trim).find(|l| !l.is_empty());
        let (state, nodes) = match (out.code, line) {
            (0, Some(line)) => {
                let (st, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
                let state = JobState::parse(st);
                let nodes = if state == JobState::Running { expand_hostlist(rest.trim())? } else { Vec::new() };
                (state, nodes)
            }
            // Job no longer known to the scheduler.
            _ => (JobState::Cancelled, Vec::new()),
        };
        let job = self.jobs.get_mut(job_id).expect("checked above");
        job.state = state;
        if !nodes.is_empty() {
            job.node_ids = nodes.clone();
        }
        Ok((state, nodes))
    }

    /// Adds a running expansion job to the main allocation. Repeating it
    /// re-issues the same update with the same target count.
    pub fn attach(&mut self, job_id: &str) -> Result<u32, SlurmError> {
        let job = self.jobs.get(job_id).ok_or_else(|| SlurmError::UnknownJob(job_id.to_string()))?;
        if job.state != JobState::Running {
            return Err(SlurmError::NotRunning(job_id.to_string()));
        }
        let newly = self.attached.insert(job_id.to_string());
        let target = self.target_nodes().to_string();
        let argv = render(&self.templates.update, &[("main_job_id", &self.main.job_id), ("num_nodes", &target)])?;
        let result = self.exec(argv.clone()).or_else(|_| self.exec(argv));
        match result {
            Ok(_) => Ok(self.target_nodes()),
            Err(e) => {
                if newly {
                    self.attached.remove(job_id);
                }
                Err(e)
            }
        }
    }

    /// Cancels a drained expansion job and shrinks the main allocation.
    pub fn shrink(&mut self, job_id: &str, drained: bool) -> Result<u32, SlurmError> {
        if self.shrunk.contains(job_id) {
            return Err(SlurmError::AlreadyShrunk(job_id.to_string()));
        }
        if !self.jobs.contains_key(job_id) {
            return Err(SlurmError::UnknownJob(job_id.to_string()));
        }
        if !drained {
            return Err(SlurmError::NotDrained(job_id.to_string()));
        }
        let argv = render(&self.templates.cancel, &[("job_id", job_id)])?;
        self.exec(argv)?;
        self.shrunk.insert(job_id.to_string());
        self.jobs.get_mut(job_id).expect("checked above").state = JobState::Cancelled;
        if self.attached.remove(job_id) {
            let target = self.target_nodes().to_string();
            let argv = render(&self.templates.update, &[("main_job_id", &self.main.job_id), ("num_nodes", &target)])?;
            self.exec(argv)?;
        }
        Ok(self.target_nodes())
    }
}

/// Job id from `sbatch` output (`Submitted batch job 123` or `123;cluster`).
pub fn parse_job_id(stdout: &str) -> Result<String, SlurmError> {
    stdout
        .split_whitespace()
        .rev()
        .map(|tok| tok.split(';').next().unwrap_or(tok))
        .find(|tok| !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit()))
        .map(str::to_string)
        .ok_or_else(|| SlurmError::JobIdParse(stdout.trim().to_string()))
}

/// [`NodeProvider`] backed by expansion jobs. Node readiness is learned by
/// polling; with a ready directory configured a node counts as ready only
/// once its worker has written `<job_id>.ready` there.
pub struct SlurmProvider {
    adapter: SlurmAdapter,
    poll_interval: f64,
    ready_dir: Option<PathBuf>,
    next_ticket: u64,
    pending: BTreeMap<ProvisionTicket, String>,
    active: BTreeMap<ProvisionTicket, String>,
}

impl SlurmProvider {
    pub fn new(cfg: &SlurmConfig, runner: Box<dyn CommandRunner>) -> Result<Self, SlurmError> {
        let templates = match &cfg.templates {
            Some(p) => CommandTemplates::load(p)?,
            None => CommandTemplates::default(),
        };
        Ok(Self {
            adapter: SlurmAdapter::new(cfg, templates, runner),
            poll_interval: cfg.poll_interval,
            ready_dir: cfg.ready_dir.clone(),
            next_ticket: 0,
            pending: BTreeMap::new(),
            active: BTreeMap::new(),
        })
    }

    pub fn adapter(&self) -> &SlurmAdapter {
        &self.adapter
    }

    fn worker_ready(&self, job_id: &str) -> bool {
        self.ready_dir.as_ref().map_or(true, |d| d.join(format!("{job_id}.ready")).exists())
    }
}

impl NodeProvider for SlurmProvider {
    fn request_node(&mut self, _rt: &mut dyn Runtime) -> Result<ProvisionTicket, ProviderError> {
        let job = self.adapter.expand(1).map_err(|e| ProviderError::Rejected(e.to_string()))?;
        let ticket = ProvisionTicket(self.next_ticket);
        self.next_ticket += 1;
        self.pending.insert(ticket, job.job_id);
        Ok(ticket)
    }

    fn release_node(&mut self, ticket: ProvisionTicket) -> Result<(), ProviderError> {
        let job = self.active.get(&ticket).or_else(|| self.pending.get(&ticket)).cloned().ok_or(ProviderError::UnknownNode(ticket))?;
        self.adapter.shrink(&job, true).map_err(|e| ProviderError::Rejected(e.to_string()))?;
        self.active.remove(&ticket);
        self.pending.remove(&ticket);
        Ok(())
    }

    fn poll_interval(&self) -> Option<f64> {
        Some(self.poll_interval)
    }

    fn poll(&mut self, _now: f64) -> Vec<ProviderEvent> {
        let mut events = Vec::new();
        let pending: Vec<(ProvisionTicket, String)> = self.pending.iter().map(|(t, j)| (*t, j.clone())).collect();
        for (ticket, job) in pending {
            match self.adapter.poll(&job) {
                Ok((JobState::Running, nodes)) if self.worker_ready(&job) => match self.adapter.attach(&job) {
                    Ok(_) => {
                        self.pending.remove(&ticket);
                        self.active.insert(ticket, job);
                        events.push(ProviderEvent::NodeReady { ticket, name: nodes.first().cloned() });
                    }
                    Err(e) => events.push(ProviderEvent::Error { ticket: Some(ticket), message: e.to_string() }),
                },
                Ok((JobState::Running | JobState::Pending, _)) => {}
                Ok((state, _)) => {
                    self.pending.remove(&ticket);
                    events.push(ProviderEvent::NodeLost { ticket, message: format!("expansion job {job} ended as {state:?}") });
                }
                Err(e) => events.push(ProviderEvent::Error { ticket: Some(ticket), message: e.to_string() }),
            }
        }
        events
    }
}
