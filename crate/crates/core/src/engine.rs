//! The orchestrator loop. It registers a workflow, dispatches READY tasks,
//! handles completions, failures, timeouts and stop requests, and runs the
//! periodic elasticity evaluation. It is the only mutator of the graph and
//! the resource pool; executors and providers talk to it through messages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AttemptId, ExecRequest, ExecResult, Executor, Message, NodeProvider, ProviderEvent, ProvisionTicket, Runtime};
use crate::elasticity::{
    estimate_infrastructure_capacity, estimate_parallel_workload, ElasticityController, ElasticityRow, ScaleAction,
};
use crate::reliability::{
    handle_failure, restart_check, safe_join, CheckpointManifest, CheckpointRecord, DefaultValue, FailureResolution,
    OutputArtifact, RestartDecision, EXIT_CHECKPOINTED, EXIT_FAILURE, EXIT_SUCCESS,
};
use crate::resources::{InfraConfig, NodeId, NodeShape, NodeState, PoolKind, ResourcePool};
use crate::sim::{Scenario, SimExecutor, SimProvider, SimRuntime};
use crate::scheduler::{schedule_step, LaunchEnv, Trace, TraceEvent, TraceKind, TRACE_VERSION};
use crate::taskgraph::{GraphError, TaskGraph, TaskId, TaskState};
use crate::workflows::Workflow;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EngineError {
    EngineError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Where task outputs go: written to `staging` on completion, moved to
/// `outputs` when the run ends or stops.
#[derive(Clone, Debug)]
pub struct OutputDirs {
    pub staging: PathBuf,
    pub outputs: PathBuf,
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    pub stop_at: Option<f64>,
    /// Stop after handling this many messages (event-boundary stops).
    pub stop_after_messages: Option<u64>,
    pub outputs: Option<OutputDirs>,
    /// Manifest of a previous run; tasks it covers are skipped.
    pub restart: Option<CheckpointManifest>,
    /// Consecutive idle evaluations before an unschedulable run is abandoned.
    pub max_idle_ticks: u32,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { stop_at: None, stop_after_messages: None, outputs: None, restart: None, max_idle_ticks: 10 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Completed,
    Failed,
    Checkpointed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub summary_version: u32,
    pub trace_version: u32,
    pub workflow: String,
    pub status: RunStatus,
    pub exit_code: i32,
    pub makespan: f64,
    pub task_counts: BTreeMap<String, usize>,
    pub ignored_failures: usize,
    pub skipped: usize,
    /// Distinct tasks that started at least once.
    pub executed_tasks: usize,
    pub starts: usize,
    pub retries: usize,
    pub timeouts: usize,
    pub max_nodes_up: usize,
    pub scale_up_requests: usize,
    /// Runtime messages the orchestrator handled; stop points range over these.
    pub messages_handled: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct RunResult {
    pub trace: Trace,
    pub elasticity: Vec<ElasticityRow>,
    pub summary: Summary,
    pub manifest: CheckpointManifest,
    pub graph: TaskGraph,
}

struct Attempt {
    task: TaskId,
    lease: u64,
    nodes: Vec<NodeId>,
    attempt_no: u32,
    started_at: Option<f64>,
}

struct Orchestrator<'a> {
    infra: &'a InfraConfig,
    rt: &'a mut dyn Runtime,
    exec: &'a mut dyn Executor,
    provider: &'a mut dyn NodeProvider,
    opts: EngineOptions,
    graph: TaskGraph,
    pool: ResourcePool,
    ctl: ElasticityController,
    elastic_shape: NodeShape,
    trace: Trace,
    rows: Vec<ElasticityRow>,
    attempts: BTreeMap<AttemptId, Attempt>,
    next_attempt: u64,
    attempts_made: BTreeMap<TaskId, u32>,
    tickets: BTreeMap<ProvisionTicket, NodeId>,
    requested_at: BTreeMap<ProvisionTicket, f64>,
    release_retry: BTreeSet<NodeId>,
    /// Draining nodes whose last lease ended; released once the ending
    /// event is in the trace.
    drained: Vec<NodeId>,
    records: BTreeMap<TaskId, CheckpointRecord>,
    messages: u64,
    stopped: bool,
    idle_ticks: u32,
    error: Option<String>,
    max_up: usize,
}

/// Runs `wf` to completion, failure or stop.
pub fn run_workflow(
    wf: &Workflow,
    infra: &InfraConfig,
    rt: &mut dyn Runtime,
    exec: &mut dyn Executor,
    provider: &mut dyn NodeProvider,
    opts: EngineOptions,
) -> Result<RunResult, EngineError> {
    let reference = infra.reference_shape();
    let mut o = Orchestrator {
        infra,
        rt,
        exec,
        provider,
        opts,
        graph: wf.empty_graph()?,
        pool: ResourcePool::new(),
        ctl: ElasticityController::new(infra.elasticity.clone(), reference.clone()),
        elastic_shape: infra.elasticity.node.clone().unwrap_or(reference),
        trace: Trace::new(),
        rows: Vec::new(),
        attempts: BTreeMap::new(),
        next_attempt: 0,
        attempts_made: BTreeMap::new(),
        tickets: BTreeMap::new(),
        requested_at: BTreeMap::new(),
        release_retry: BTreeSet::new(),
        drained: Vec::new(),
        records: BTreeMap::new(),
        messages: 0,
        stopped: false,
        idle_ticks: 0,
        error: None,
        max_up: 0,
    };
    if let Some(dirs) = &o.opts.outputs {
        fs::create_dir_all(&dirs.staging).map_err(|e| io_err(&dirs.staging, e))?;
        fs::create_dir_all(&dirs.outputs).map_err(|e| io_err(&dirs.outputs, e))?;
    }
    o.init(wf)?;
    o.main_loop()?;
    o.finish(&wf.name)
}

impl Orchestrator<'_> {
    fn ev(&self, kind: TraceKind) -> TraceEvent {
        TraceEvent::new(self.rt.now(), kind)
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    fn note_up(&mut self) {
        let up = self.pool.count(None, &[NodeState::Up, NodeState::Draining]);
        self.max_up = self.max_up.max(up);
    }

    fn init(&mut self, wf: &Workflow) -> Result<(), EngineError> {
        for (name, shape) in self.infra.static_node_list() {
            let id = self.pool.add_node(Some(name), &shape, PoolKind::Static, NodeState::Up);
            let e = self.ev(TraceKind::NodeUp).nodes(vec![id]).with("pool", "STATIC");
            self.emit(e);
        }
        self.note_up();
        let restart = match (&self.opts.restart, &self.opts.outputs) {
            (Some(m), Some(d)) => Some((m.clone(), d.outputs.clone())),
            (Some(_), None) => {
                warn!("restart manifest ignored: run has no output directory");
                None
            }
            _ => None,
        };
        for step in &wf.steps {
            let id = self.graph.register_task_deferred(&step.task_type, &step.args, self.infra)?;
            let e = self.ev(TraceKind::Register).task(id).with("type", &step.task_type);
            self.emit(e);
            let fp = self.graph.task(id).expect("registered").fingerprint.clone();
            if let Some((m, root)) = &restart {
                if restart_check(&fp, m, root) == RestartDecision::Skip {
                    self.graph.skip_task(id)?;
                    self.records.insert(id, m.find(&fp).expect("checked").clone());
                    let e = self.ev(TraceKind::Skip).task(id);
                    self.emit(e);
                    continue;
                }
            }
            if self.graph.promote(id) {
                let e = self.ev(TraceKind::Ready).task(id);
                self.emit(e);
            }
        }
        if let Some(t) = self.opts.stop_at {
            self.rt.post_at(t, Message::Stop);
        }
        self.rt.post_at(0.0, Message::ElasticityTick);
        if let Some(dt) = self.provider.poll_interval() {
            self.rt.post_at(dt, Message::ProviderPoll);
        }
        Ok(())
    }

    fn main_loop(&mut self) -> Result<(), EngineError> {
        loop {
            if let Some(k) = self.opts.stop_after_messages {
                if self.messages >= k && !self.graph.is_finished() {
                    self.stop("message limit")?;
                    return Ok(());
                }
            }
            self.dispatch()?;
            if self.graph.is_finished() {
                return Ok(());
            }
            let Some((_, msg)) = self.rt.next() else {
                self.error = Some("no further events can arrive".into());
                self.abandon()?;
                return Ok(());
            };
            self.messages += 1;
            self.handle(msg)?;
            self.release_drained();
            if self.stopped {
                return Ok(());
            }
        }
    }

    fn dispatch(&mut self) -> Result<(), EngineError> {
        for (id, lease) in schedule_step(&mut self.graph, &mut self.pool) {
            let n = {
                let c = self.attempts_made.entry(id).or_insert(0);
                *c += 1;
                *c
            };
            let aid = AttemptId(self.next_attempt);
            self.next_attempt += 1;
            let e = self.ev(TraceKind::Schedule).task(id).nodes(lease.node_ids.clone()).with("attempt", n);
            self.emit(e);
            let task = self.graph.task(id).expect("scheduled task exists");
            let req = ExecRequest {
                attempt: aid,
                task_id: id,
                task_type: task.type_name().to_string(),
                duration_model: task.task_type.duration_model_id().to_string(),
                fingerprint: task.fingerprint.clone(),
                attempt_no: n,
                launch: LaunchEnv::from_lease(&lease, &self.pool, task.reliability.time_out),
            };
            match self.exec.submit(&req, &mut *self.rt) {
                Ok(()) => {
                    self.attempts
                        .insert(aid, Attempt { task: id, lease: lease.id, nodes: lease.node_ids, attempt_no: n, started_at: None });
                }
                Err(err) => {
                    warn!("{id}: {err}");
                    *self.attempts_made.get_mut(&id).expect("counted") -= 1;
                    self.release_lease(lease.id);
                    self.graph.requeue(id)?;
                    let e = self.ev(TraceKind::Ready).task(id).with("rejected", err);
                    self.emit(e);
                    self.release_drained();
                }
            }
        }
        Ok(())
    }

    fn handle(&mut self, msg: Message) -> Result<(), EngineError> {
        match msg {
            Message::Started { attempt } => self.on_started(attempt)?,
            Message::Finished { attempt, result } => {
                if !self.attempts.contains_key(&attempt) {
                    return Ok(());
                }
                self.on_started(attempt)?;
                let a = self.attempts.remove(&attempt).expect("checked above");
                self.release_lease(a.lease);
                match result {
                    ExecResult::Success => self.on_success(&a)?,
                    ExecResult::Failure(reason) => {
                        let e = self.ev(TraceKind::Fail).task(a.task).nodes(a.nodes.clone()).with("attempt", a.attempt_no).with("reason", reason);
                        self.emit(e);
                        self.on_failure(a.task)?;
                    }
                }
            }
            Message::Timeout { attempt } => {
                let Some(a) = self.attempts.remove(&attempt) else {
                    return Ok(());
                };
                self.exec.cancel(attempt);
                self.release_lease(a.lease);
                let limit = self.graph.task(a.task).and_then(|t| t.reliability.time_out).unwrap_or_default();
                let e = self.ev(TraceKind::Timeout).task(a.task).nodes(a.nodes.clone()).with("attempt", a.attempt_no).with("limit", limit);
                self.emit(e);
                self.on_failure(a.task)?;
            }
            Message::NodeReady { ticket, name } => self.node_ready(ticket, name),
            Message::ElasticityTick => self.tick()?,
            Message::ProviderPoll => {
                let now = self.rt.now();
                for ev in self.provider.poll(now) {
                    match ev {
                        ProviderEvent::NodeReady { ticket, name } => self.node_ready(ticket, name),
                        ProviderEvent::NodeLost { ticket, message } => self.node_lost(ticket, &message),
                        ProviderEvent::Error { ticket, message } => {
                            let mut e = self.ev(TraceKind::ProviderError).with("reason", message);
                            if let Some(t) = ticket.and_then(|t| self.tickets.get(&t)) {
                                e = e.nodes(vec![*t]);
                            }
                            self.emit(e);
                        }
                    }
                }
                if let Some(dt) = self.provider.poll_interval() {
                    if !self.graph.is_finished() {
                        self.rt.post_at(now + dt, Message::ProviderPoll);
                    }
                }
            }
            Message::Stop => self.stop("signal")?,
        }
        Ok(())
    }

    fn on_started(&mut self, attempt: AttemptId) -> Result<(), EngineError> {
        let now = self.rt.now();
        let Some(a) = self.attempts.get_mut(&attempt) else {
            return Ok(());
        };
        if a.started_at.is_some() {
            return Ok(());
        }
        a.started_at = Some(now);
        let (id, nodes, n) = (a.task, a.nodes.clone(), a.attempt_no);
        self.graph.mark_running(id)?;
        let e = self.ev(TraceKind::Start).task(id).nodes(nodes).with("attempt", n);
        self.emit(e);
        if let Some(limit) = self.graph.task(id).and_then(|t| t.reliability.time_out) {
            self.rt.post_at(now + limit, Message::Timeout { attempt });
        }
        Ok(())
    }

    fn on_success(&mut self, a: &Attempt) -> Result<(), EngineError> {
        let now = self.rt.now();
        let task = self.graph.task(a.task).expect("attempt task exists");
        let duration = now - a.started_at.unwrap_or(now);
        self.ctl.profiles.record_execution(task.type_name(), duration);
        let mut outputs = BTreeMap::new();
        for b in task.outputs() {
            let body = format!(
                "token={}\nversion={}\ntask_type={}\nfingerprint={}\n",
                b.token,
                b.write_seq.unwrap_or_default(),
                task.type_name(),
                task.fingerprint
            );
            if self.write_output(&b.token, body.as_bytes())? {
                outputs.insert(b.token.clone(), OutputArtifact { path: b.token.clone(), size: body.len() as u64 });
            }
        }
        let record = CheckpointRecord { task_fingerprint: task.fingerprint.clone(), task_type: task.type_name().to_string(), outputs };
        self.records.insert(a.task, record);
        let c = self.graph.complete_task(a.task, TaskState::Done)?;
        let e = self.ev(TraceKind::End).task(a.task).nodes(a.nodes.clone()).with("attempt", a.attempt_no).with("duration", duration);
        self.emit(e);
        self.emit_ready(c.released);
        Ok(())
    }

    fn on_failure(&mut self, id: TaskId) -> Result<(), EngineError> {
        let task = self.graph.task(id).expect("failed task exists");
        let made = self.attempts_made.get(&id).copied().unwrap_or(1);
        match handle_failure(&task.reliability, made) {
            FailureResolution::Retry { next_attempt } => {
                self.graph.requeue(id)?;
                let e = self.ev(TraceKind::Ready).task(id).with("retry", next_attempt);
                self.emit(e);
            }
            FailureResolution::Ignore => {
                let defaults: Vec<(String, DefaultValue)> =
                    task.outputs().map(|b| (b.token.clone(), task.reliability.default_for(&b.param))).collect();
                for (token, d) in defaults {
                    if d == DefaultValue::EmptyFile {
                        self.write_output(&token, b"")?;
                    }
                }
                let c = self.graph.complete_task(id, TaskState::IgnoredFailed)?;
                self.emit_ready(c.released);
            }
            FailureResolution::Fail => {
                let c = self.graph.complete_task(id, TaskState::Failed)?;
                for t in c.cancelled {
                    let e = self.ev(TraceKind::Cancel).task(t).with("started", false).with("reason", format!("{id} failed"));
                    self.emit(e);
                }
            }
        }
        Ok(())
    }

    fn emit_ready(&mut self, ids: BTreeSet<TaskId>) {
        for t in ids {
            let e = self.ev(TraceKind::Ready).task(t);
            self.emit(e);
        }
    }

    /// Writes one output into staging; false if the token is not a safe
    /// relative path or outputs are not kept.
    fn write_output(&self, token: &str, body: &[u8]) -> Result<bool, EngineError> {
        let Some(dirs) = &self.opts.outputs else {
            return Ok(true);
        };
        let Some(path) = safe_join(&dirs.staging, token) else {
            warn!("output token `{token}` is not a relative path; not written");
            return Ok(false);
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(true)
    }

    fn release_lease(&mut self, lease: u64) {
        let lease = self.pool.release(lease).expect("lease held by an attempt");
        for n in lease.node_ids {
            let node = self.pool.node(n).expect("leased node exists");
            if node.state == NodeState::Draining && node.lease_count() == 0 {
                self.drained.push(n);
            }
        }
    }

    fn release_drained(&mut self) {
        for n in std::mem::take(&mut self.drained) {
            self.release_node(n, "drained");
        }
    }

    fn ticket_of(&self, node: NodeId) -> Option<ProvisionTicket> {
        self.tickets.iter().find(|(_, n)| **n == node).map(|(t, _)| *t)
    }

    fn release_node(&mut self, node: NodeId, reason: &str) {
        let Some(ticket) = self.ticket_of(node) else {
            return;
        };
        match self.provider.release_node(ticket) {
            Ok(()) => {
                self.pool.set_state(node, NodeState::Released).expect("node exists");
                self.tickets.remove(&ticket);
                self.release_retry.remove(&node);
                let e = self.ev(TraceKind::ScaleDown).nodes(vec![node]).with("phase", "release").with("reason", reason);
                self.emit(e);
            }
            Err(err) => {
                self.release_retry.insert(node);
                let e = self.ev(TraceKind::ProviderError).nodes(vec![node]).with("reason", err);
                self.emit(e);
            }
        }
    }

    fn node_ready(&mut self, ticket: ProvisionTicket, name: Option<String>) {
        let Some(&id) = self.tickets.get(&ticket) else {
            return;
        };
        if self.pool.node(id).map(|n| n.state) != Some(NodeState::Provisioning) {
            return;
        }
        self.pool.set_state(id, NodeState::Up).expect("node exists");
        if let Some(n) = name {
            self.pool.rename(id, n);
        }
        let latency = self.rt.now() - self.requested_at.get(&ticket).copied().unwrap_or(0.0);
        self.ctl.profiles.record_provision(latency);
        let e = self.ev(TraceKind::NodeUp).nodes(vec![id]).with("pool", "ELASTIC").with("latency", latency);
        self.emit(e);
        self.note_up();
    }

    fn node_lost(&mut self, ticket: ProvisionTicket, message: &str) {
        let Some(id) = self.tickets.remove(&ticket) else {
            return;
        };
        self.pool.set_state(id, NodeState::Released).expect("node exists");
        let e = self.ev(TraceKind::ProviderError).nodes(vec![id]).with("reason", message).with("lost", true);
        self.emit(e);
    }

    fn tick(&mut self) -> Result<(), EngineError> {
        let now = self.rt.now();
        for n in self.release_retry.clone() {
            self.release_node(n, "retry");
        }
        let cfg = &self.ctl.cfg;
        let pw = estimate_parallel_workload(
            self.graph.ready_iter().map(|id| {
                let t = self.graph.task(id).expect("ready task exists");
                (t.type_name(), &t.constraints)
            }),
            &self.ctl.profiles,
            &self.ctl.reference,
            cfg.requirement,
        );
        let ic = estimate_infrastructure_capacity(self.pool.nodes(), &self.ctl.profiles, &self.ctl.reference, cfg.count_provisioning);
        let held = self
            .pool
            .nodes()
            .filter(|n| n.pool == PoolKind::Elastic && n.state != NodeState::Released)
            .count() as u32;
        let mut loads: BTreeMap<NodeId, f64> = BTreeMap::new();
        for a in self.attempts.values() {
            if let Some(start) = a.started_at {
                let ty = self.graph.task(a.task).expect("attempt task exists").type_name();
                let rem = crate::elasticity::running_load([(ty, start)], &self.ctl.profiles, now);
                for n in &a.nodes {
                    *loads.entry(*n).or_default() += rem;
                }
            }
        }
        let nodes: Vec<_> = self.pool.nodes().collect();
        let decision = self.ctl.decide(now, pw, ic, &nodes, held, &loads);
        let provisioning = self.pool.count(None, &[NodeState::Provisioning]);
        self.rows.push(ElasticityRow {
            t: now,
            pw,
            ic,
            n_up: self.pool.count(None, &[NodeState::Up, NodeState::Draining]) as u32,
            n_provisioning: provisioning as u32,
            n_running_tasks: self.attempts.len() as u32,
        });
        debug!("t={now} pw={pw} ic={ic} -> {:?}", decision.action);
        let hold = decision.action == ScaleAction::Hold;
        match decision.action {
            ScaleAction::ScaleUp(k) => {
                for _ in 0..k {
                    match self.provider.request_node(&mut *self.rt) {
                        Ok(ticket) => {
                            let shape = self.elastic_shape.clone();
                            let id = self.pool.add_node(None, &shape, PoolKind::Elastic, NodeState::Provisioning);
                            self.tickets.insert(ticket, id);
                            self.requested_at.insert(ticket, now);
                            self.ctl.note_scale_up(now);
                            let e = self.ev(TraceKind::ScaleUpRequest).nodes(vec![id]).with("pw", pw).with("ic", ic);
                            self.emit(e);
                        }
                        Err(err) => {
                            let e = self.ev(TraceKind::ProviderError).with("reason", err).with("dropped", "SCALE_UP");
                            self.emit(e);
                        }
                    }
                }
            }
            ScaleAction::ScaleDown(node) => {
                self.pool.set_state(node, NodeState::Draining).expect("victim exists");
                let e = self.ev(TraceKind::ScaleDown).nodes(vec![node]).with("phase", "drain").with("pw", pw).with("ic", ic);
                self.emit(e);
                if self.pool.node(node).expect("victim exists").lease_count() == 0 {
                    self.release_node(node, "idle");
                }
            }
            ScaleAction::Hold => {}
        }
        if hold && self.release_retry.is_empty() && self.rt.is_quiescent() {
            self.error = Some(if self.attempts.is_empty() {
                format!("{} READY tasks cannot be placed on any node", self.graph.ready_count())
            } else {
                format!("no progress possible: {} running attempts will never report", self.attempts.len())
            });
            return self.abandon();
        }
        // Nothing running, nothing coming: the READY tasks can never be placed.
        let waiting = self.attempts.is_empty()
            && self.pool.count(None, &[NodeState::Provisioning]) == 0
            && !self.graph.is_finished();
        self.idle_ticks = if waiting { self.idle_ticks + 1 } else { 0 };
        if self.idle_ticks > self.opts.max_idle_ticks {
            self.error = Some(format!("{} READY tasks cannot be placed on any node", self.graph.ready_count()));
            return self.abandon();
        }
        if !self.graph.is_finished() {
            self.rt.post_at(now + self.ctl.cfg.period, Message::ElasticityTick);
        }
        Ok(())
    }

    /// Cancels everything still pending after an unrecoverable condition.
    fn abandon(&mut self) -> Result<(), EngineError> {
        warn!("abandoning run: {}", self.error.as_deref().unwrap_or("unknown"));
        for (aid, a) in std::mem::take(&mut self.attempts) {
            self.exec.cancel(aid);
            self.release_lease(a.lease);
            self.graph.complete_task(a.task, TaskState::Cancelled)?;
            let e = self.ev(TraceKind::Cancel).task(a.task).nodes(a.nodes).with("started", a.started_at.is_some()).with("reason", "abandoned");
            self.emit(e);
        }
        for id in self.graph.cancel_pending() {
            let e = self.ev(TraceKind::Cancel).task(id).with("started", false).with("reason", "abandoned");
            self.emit(e);
        }
        self.release_drained();
        Ok(())
    }

    fn stop(&mut self, reason: &str) -> Result<(), EngineError> {
        info!("stopping at t={}: {reason}", self.rt.now());
        self.stopped = true;
        for (aid, a) in std::mem::take(&mut self.attempts) {
            self.exec.cancel(aid);
            self.release_lease(a.lease);
            self.graph.complete_task(a.task, TaskState::Cancelled)?;
            let e = self
                .ev(TraceKind::Cancel)
                .task(a.task)
                .nodes(a.nodes)
                .with("started", a.started_at.is_some())
                .with("reason", reason);
            self.emit(e);
        }
        for id in self.graph.cancel_pending() {
            let e = self.ev(TraceKind::Cancel).task(id).with("started", false).with("reason", reason);
            self.emit(e);
        }
        self.release_drained();
        Ok(())
    }

    fn finish(mut self, workflow: &str) -> Result<RunResult, EngineError> {
        let makespan = self.rt.now();
        let elastic: Vec<NodeId> = self
            .pool
            .nodes()
            .filter(|n| n.pool == PoolKind::Elastic && n.state != NodeState::Released)
            .map(|n| n.node_id)
            .collect();
        for n in elastic {
            self.release_node(n, "shutdown");
            if self.pool.node(n).map(|x| x.state) != Some(NodeState::Released) {
                self.pool.set_state(n, NodeState::Released).expect("node exists");
            }
        }
        if let Some(dirs) = &self.opts.outputs {
            flush(&dirs.staging, &dirs.outputs)?;
            fs::remove_dir_all(&dirs.staging).map_err(|e| io_err(&dirs.staging, e))?;
        }
        let manifest = CheckpointManifest { records: self.records.values().cloned().collect(), ..CheckpointManifest::default() };
        let counts = self.graph.state_counts();
        let failed = counts[&TaskState::Failed] > 0;
        let (status, exit_code) = if self.stopped {
            (RunStatus::Checkpointed, EXIT_CHECKPOINTED)
        } else if failed || self.error.is_some() {
            (RunStatus::Failed, EXIT_FAILURE)
        } else {
            (RunStatus::Completed, EXIT_SUCCESS)
        };
        let e = self.ev(TraceKind::Checkpoint).with("records", manifest.records.len()).with("status", exit_code);
        self.emit(e);
        let started: BTreeSet<TaskId> = self.trace.of_kind(TraceKind::Start).filter_map(|e| e.task_id).collect();
        let summary = Summary {
            summary_version: SUMMARY_VERSION,
            trace_version: TRACE_VERSION,
            workflow: workflow.to_string(),
            status,
            exit_code,
            makespan,
            task_counts: counts.iter().map(|(s, n)| (s.as_str().to_string(), *n)).collect(),
            ignored_failures: counts[&TaskState::IgnoredFailed],
            skipped: counts[&TaskState::Skipped],
            executed_tasks: started.len(),
            starts: self.trace.count(TraceKind::Start),
            retries: self.trace.of_kind(TraceKind::Ready).filter(|e| e.get("retry").is_some()).count(),
            timeouts: self.trace.count(TraceKind::Timeout),
            max_nodes_up: self.max_up,
            scale_up_requests: self.trace.count(TraceKind::ScaleUpRequest),
            messages_handled: self.messages,
            error: self.error.clone(),
        };
        Ok(RunResult { trace: self.trace, elasticity: self.rows, summary, manifest, graph: self.graph })
    }
}

/// Runs `wf` under the discrete-event simulator.
pub fn simulate(wf: &Workflow, infra: &InfraConfig, scenario: &Scenario, mut opts: EngineOptions) -> Result<RunResult, EngineError> {
    let mut rt = SimRuntime::new();
    let mut exec = SimExecutor::new(scenario);
    let e = &infra.elasticity;
    let mut provider = SimProvider::new(scenario.seed, e.provision_delay.clone(), e.elastic_max);
    if opts.stop_at.is_none() {
        opts.stop_at = scenario.faults.stop_at;
    }
    run_workflow(wf, infra, &mut rt, &mut exec, &mut provider, opts)
}

/// Replays a finished run's trace and checks the resource-level safety
/// properties: per-node usage never exceeds capacity, nothing is scheduled
/// on a node after it starts draining, and every elastic node that came up
/// is released by the end.
pub fn audit_run(result: &RunResult, infra: &InfraConfig) -> Result<(), String> {
    result.trace.check_invariants()?;
    let static_shapes = infra.static_node_list();
    let elastic_shape = infra.elasticity.node.clone().unwrap_or_else(|| infra.reference_shape());
    let mut cap: BTreeMap<NodeId, NodeShape> = BTreeMap::new();
    let mut used: BTreeMap<NodeId, (u32, u32)> = BTreeMap::new();
    let mut closed: BTreeSet<NodeId> = BTreeSet::new();
    let mut elastic: BTreeSet<NodeId> = BTreeSet::new();
    let mut released: BTreeSet<NodeId> = BTreeSet::new();
    let demand = |id: TaskId| {
        let c = &result.graph.task(id).expect("traced task exists").constraints;
        (c.cpu_units(), c.gpu_units())
    };
    for e in result.trace.events() {
        match e.kind {
            TraceKind::NodeUp => {
                let n = e.node_list()[0];
                let shape = if e.get("pool") == Some("STATIC") {
                    static_shapes.get(n.0 as usize).map(|s| s.1.clone()).ok_or(format!("unknown static node {n}"))?
                } else {
                    elastic.insert(n);
                    elastic_shape.clone()
                };
                cap.insert(n, shape);
            }
            TraceKind::ScaleUpRequest => {
                elastic.insert(e.node_list()[0]);
            }
            TraceKind::ScaleDown => {
                let n = e.node_list()[0];
                closed.insert(n);
                if e.get("phase") == Some("release") {
                    if used.get(&n).is_some_and(|u| *u != (0, 0)) {
                        return Err(format!("{n} released at t={} while hosting work", e.t));
                    }
                    released.insert(n);
                }
            }
            TraceKind::ProviderError if e.get("lost").is_some() => {
                closed.insert(e.node_list()[0]);
                released.insert(e.node_list()[0]);
            }
            TraceKind::Schedule => {
                let id = e.task_id.ok_or("SCHEDULE without task")?;
                let (c, g) = demand(id);
                for n in e.node_list() {
                    if closed.contains(n) {
                        return Err(format!("{id} scheduled on draining or released node {n} at t={}", e.t));
                    }
                    let shape = cap.get(n).ok_or(format!("{id} scheduled on {n} before it came up"))?;
                    let u = used.entry(*n).or_default();
                    u.0 += c;
                    u.1 += g;
                    if u.0 > shape.cpu_units || u.1 > shape.gpu_units {
                        return Err(format!("{n} oversubscribed at t={}: {u:?} > {shape:?}", e.t));
                    }
                }
            }
            TraceKind::End | TraceKind::Fail | TraceKind::Timeout | TraceKind::Cancel | TraceKind::Ready
                if !e.node_list().is_empty() || e.get("rejected").is_some() =>
            {
                let id = e.task_id.ok_or("release event without task")?;
                let (c, g) = demand(id);
                for n in e.node_list() {
                    let u = used.entry(*n).or_default();
                    u.0 = u.0.checked_sub(c).ok_or(format!("{n} released more CPU than held"))?;
                    u.1 = u.1.checked_sub(g).ok_or(format!("{n} released more GPU than held"))?;
                }
            }
            _ => {}
        }
    }
    if let Some(n) = elastic.difference(&released).next() {
        return Err(format!("elastic node {n} never released"));
    }
    if let Some((n, u)) = used.iter().find(|(_, u)| **u != (0, 0)) {
        return Err(format!("{n} still holds {u:?} at the end"));
    }
    Ok(())
}

/// Moves every file under `from` to the same relative path under `to`.
fn flush(from: &Path, to: &Path) -> Result<(), EngineError> {
    let entries = match fs::read_dir(from) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(from, e)),
    };
    fs::create_dir_all(to).map_err(|e| io_err(to, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(from, e))?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            flush(&src, &dst)?;
        } else {
            fs::rename(&src, &dst).or_else(|_| fs::copy(&src, &dst).map(|_| ())).map_err(|e| io_err(&dst, e))?;
        }
    }
    Ok(())
}
