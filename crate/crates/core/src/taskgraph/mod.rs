//! Task dependency graph built from parameter directions.
//!
//! Every data token keeps a version history. A task reading a token (IN or
//! INOUT) depends on the producer of its latest version; a task writing a
//! token (OUT or INOUT) appends a new version and is ordered after the
//! previous writer and after every reader of the version it replaces.
//! Because edges always point from an earlier registration to a later one
//! the graph is acyclic by construction.

mod analysis;
mod dot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::{fingerprint, ReliabilityPolicy};
use crate::resources::{resolve_template, ConstraintTemplate, InfraConfig, ReliabilityTemplate, ResourceError, TaskConstraints};

pub use analysis::{max_antichain_width, GraphStats};
pub use dot::export_dot;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "IN")]
    In,
    #[serde(rename = "OUT")]
    Out,
    #[serde(rename = "INOUT")]
    InOut,
}

impl Direction {
    pub fn reads(self) -> bool {
        matches!(self, Direction::In | Direction::InOut)
    }

    pub fn writes(self) -> bool {
        matches!(self, Direction::Out | Direction::InOut)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub direction: Direction,
}

impl ParamSpec {
    pub fn new(name: &str, direction: Direction) -> Self {
        Self { name: name.to_string(), direction }
    }
}

/// A kind of task: its parameter schema plus constraint and reliability
/// templates. `duration_model` keys the simulated duration model and
/// defaults to the type name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskType {
    pub name: String,
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub constraints: ConstraintTemplate,
    #[serde(default)]
    pub reliability: ReliabilityTemplate,
    #[serde(default)]
    pub duration_model: Option<String>,
}

impl TaskType {
    pub fn new(name: &str, params: Vec<ParamSpec>) -> Self {
        Self {
            name: name.to_string(),
            params,
            constraints: ConstraintTemplate::default(),
            reliability: ReliabilityTemplate::default(),
            duration_model: None,
        }
    }

    pub fn with_constraints(mut self, c: ConstraintTemplate) -> Self {
        self.constraints = c;
        self
    }

    pub fn with_reliability(mut self, r: ReliabilityTemplate) -> Self {
        self.reliability = r;
        self
    }

    pub fn duration_model_id(&self) -> &str {
        self.duration_model.as_deref().unwrap_or(&self.name)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.name.trim().is_empty() {
            return Err(GraphError::InvalidType { name: self.name.clone(), reason: "empty name".into() });
        }
        if self.params.is_empty() {
            return Err(GraphError::InvalidType { name: self.name.clone(), reason: "no parameters".into() });
        }
        let mut seen = BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(GraphError::InvalidType {
                    name: self.name.clone(),
                    reason: format!("parameter `{}` declared twice", p.name),
                });
            }
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Producer {
    WorkflowInput,
    Task(TaskId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DataVersion {
    pub item_token: String,
    pub seq: u32,
    pub producer: Producer,
    /// Tasks that read this version, in registration order.
    pub readers: Vec<TaskId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DataItem {
    pub token: String,
    pub versions: Vec<DataVersion>,
}

impl DataItem {
    pub fn latest(&self) -> &DataVersion {
        self.versions.last().expect("data item has at least one version")
    }
}

/// One parameter of a task instance bound to a data token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Binding {
    pub param: String,
    pub direction: Direction,
    pub token: String,
    /// Version read (IN, INOUT).
    pub read_seq: Option<u32>,
    /// Version produced (OUT, INOUT).
    pub write_seq: Option<u32>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Created,
    Ready,
    Scheduled,
    Running,
    Done,
    Failed,
    IgnoredFailed,
    Cancelled,
    Skipped,
}

impl TaskState {
    pub const ALL: [TaskState; 9] = [
        TaskState::Created,
        TaskState::Ready,
        TaskState::Scheduled,
        TaskState::Running,
        TaskState::Done,
        TaskState::Failed,
        TaskState::IgnoredFailed,
        TaskState::Cancelled,
        TaskState::Skipped,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::Done | TaskState::Failed | TaskState::IgnoredFailed | TaskState::Cancelled | TaskState::Skipped
        )
    }

    /// States that satisfy a successor's dependency.
    pub fn releases_successors(self) -> bool {
        matches!(self, TaskState::Done | TaskState::IgnoredFailed | TaskState::Skipped)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Created => "CREATED",
            TaskState::Ready => "READY",
            TaskState::Scheduled => "SCHEDULED",
            TaskState::Running => "RUNNING",
            TaskState::Done => "DONE",
            TaskState::Failed => "FAILED",
            TaskState::IgnoredFailed => "IGNORED_FAILED",
            TaskState::Cancelled => "CANCELLED",
            TaskState::Skipped => "SKIPPED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Legal lifecycle moves. Besides the main pipeline, pending tasks may be
/// cancelled (failed predecessor or safe stop), RUNNING/SCHEDULED tasks go
/// back to READY on retry or executor rejection, and CREATED tasks may be
/// SKIPPED during a restart.
pub fn is_legal_transition(from: TaskState, to: TaskState) -> bool {
    use TaskState::*;
    matches!(
        (from, to),
        (Created, Ready)
            | (Ready, Scheduled)
            | (Scheduled, Running)
            | (Running, Done)
            | (Running, Failed)
            | (Running, IgnoredFailed)
            | (Running, Cancelled)
            | (Scheduled, Cancelled)
            | (Created, Cancelled)
            | (Ready, Cancelled)
            | (Created, Skipped)
            | (Running, Ready)
            | (Scheduled, Ready)
    )
}

#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub id: TaskId,
    pub task_type: Arc<TaskType>,
    pub bindings: Vec<Binding>,
    pub state: TaskState,
    pub predecessors: BTreeSet<TaskId>,
    pub successors: BTreeSet<TaskId>,
    pub constraints: TaskConstraints,
    pub reliability: ReliabilityPolicy,
    pub fingerprint: String,
}

impl TaskInstance {
    pub fn type_name(&self) -> &str {
        &self.task_type.name
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Binding> {
        self.bindings.iter().filter(|b| b.direction.writes())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown task type `{0}`")]
    UnknownType(String),
    #[error("task type `{name}` is invalid: {reason}")]
    InvalidType { name: String, reason: String },
    #[error("task type `{name}` already declared with a different definition")]
    ConflictingType { name: String },
    #[error("task type `{name}` expects {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("task type `{name}`: token `{token}` is read after being written by the same task")]
    SelfDependency { name: String, token: String },
    #[error("task type `{name}`: token `{token}` written twice by the same task")]
    DuplicateWrite { name: String, token: String },
    #[error("task type `{name}`: empty data token for parameter `{param}`")]
    EmptyToken { name: String, param: String },
    #[error("task type `{name}`: {source}")]
    Template { name: String, source: ResourceError },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("illegal transition of {id} from {from} to {to}")]
    IllegalTransition { id: TaskId, from: TaskState, to: TaskState },
}

/// Result of a completion: tasks that became READY and tasks cancelled
/// because a predecessor failed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Completion {
    pub released: BTreeSet<TaskId>,
    pub cancelled: BTreeSet<TaskId>,
}

#[derive(Clone, Debug, Default)]
pub struct TaskGraph {
    types: BTreeMap<String, Arc<TaskType>>,
    tasks: Vec<TaskInstance>,
    data: BTreeMap<String, DataItem>,
    occurrences: BTreeMap<String, u32>,
    ready: BTreeSet<TaskId>,
    open: usize,
}

impl TaskGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a task type. Re-declaring an identical type is a no-op.
    pub fn declare_type(&mut self, ty: TaskType) -> Result<(), GraphError> {
        ty.validate()?;
        if let Some(existing) = self.types.get(&ty.name) {
            if **existing != ty {
                return Err(GraphError::ConflictingType { name: ty.name });
            }
            return Ok(());
        }
        self.types.insert(ty.name.clone(), Arc::new(ty));
        Ok(())
    }

    pub fn task_type(&self, name: &str) -> Option<&Arc<TaskType>> {
        self.types.get(name)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskInstance> {
        self.tasks.get(id.0 as usize)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskInstance> {
        self.tasks.iter()
    }

    pub fn data_item(&self, token: &str) -> Option<&DataItem> {
        self.data.get(token)
    }

    pub fn data_items(&self) -> impl Iterator<Item = &DataItem> {
        self.data.values()
    }

    /// All edges (from, to) ordered by source then target.
    pub fn edges(&self) -> impl Iterator<Item = (TaskId, TaskId)> + '_ {
        self.tasks.iter().flat_map(|t| t.successors.iter().map(move |s| (t.id, *s)))
    }

    pub fn edge_count(&self) -> usize {
        self.tasks.iter().map(|t| t.successors.len()).sum()
    }

    /// Registers a task invocation and promotes it to READY when it has no
    /// unfinished predecessor.
    pub fn register_task<S: AsRef<str>>(&mut self, type_name: &str, args: &[S], env: &InfraConfig) -> Result<TaskId, GraphError> {
        let id = self.register_task_deferred(type_name, args, env)?;
        self.promote(id);
        Ok(id)
    }

    /// Registers a task but leaves it CREATED so the caller can decide to
    /// skip it (restart) before calling [`TaskGraph::promote`].
    pub fn register_task_deferred<S: AsRef<str>>(
        &mut self,
        type_name: &str,
        args: &[S],
        env: &InfraConfig,
    ) -> Result<TaskId, GraphError> {
        let ty = self.types.get(type_name).cloned().ok_or_else(|| GraphError::UnknownType(type_name.into()))?;
        if args.len() != ty.params.len() {
            return Err(GraphError::Arity { name: ty.name.clone(), expected: ty.params.len(), got: args.len() });
        }
        let (constraints, reliability) = resolve_template(&ty.constraints, &ty.reliability, env)
            .map_err(|source| GraphError::Template { name: ty.name.clone(), source })?;

        // Validate the whole argument list before touching any state.
        let mut written: BTreeSet<&str> = BTreeSet::new();
        for (p, a) in ty.params.iter().zip(args) {
            let token = a.as_ref();
            if token.is_empty() {
                return Err(GraphError::EmptyToken { name: ty.name.clone(), param: p.name.clone() });
            }
            if p.direction.reads() && written.contains(token) {
                return Err(GraphError::SelfDependency { name: ty.name.clone(), token: token.into() });
            }
            if p.direction.writes() && !written.insert(token) {
                return Err(GraphError::DuplicateWrite { name: ty.name.clone(), token: token.into() });
            }
        }

        let id = TaskId(self.tasks.len() as u32);
        let mut preds = BTreeSet::new();
        let mut bindings = Vec::with_capacity(args.len());
        for (p, a) in ty.params.iter().zip(args) {
            let token = a.as_ref();
            let item = self.data.entry(token.to_string()).or_insert_with(|| DataItem {
                token: token.to_string(),
                versions: Vec::new(),
            });
            let mut read_seq = None;
            if p.direction.reads() {
                if item.versions.is_empty() {
                    item.versions.push(DataVersion {
                        item_token: token.to_string(),
                        seq: 0,
                        producer: Producer::WorkflowInput,
                        readers: Vec::new(),
                    });
                }
                let v = item.versions.last_mut().expect("non-empty");
                if let Producer::Task(src) = v.producer {
                    preds.insert(src);
                }
                if !v.readers.contains(&id) {
                    v.readers.push(id);
                }
                read_seq = Some(v.seq);
            }
            let mut write_seq = None;
            if p.direction.writes() {
                let next = match item.versions.last() {
                    Some(prev) => {
                        if let Producer::Task(src) = prev.producer {
                            preds.insert(src);
                        }
                        preds.extend(prev.readers.iter().copied().filter(|r| *r != id));
                        prev.seq + 1
                    }
                    None => 1,
                };
                item.versions.push(DataVersion {
                    item_token: token.to_string(),
                    seq: next,
                    producer: Producer::Task(id),
                    readers: Vec::new(),
                });
                write_seq = Some(next);
            }
            bindings.push(Binding { param: p.name.clone(), direction: p.direction, token: token.to_string(), read_seq, write_seq });
        }
        preds.remove(&id);

        let tokens: Vec<&str> = args.iter().map(|a| a.as_ref()).collect();
        let base_fp = fingerprint(&ty.name, &tokens, &constraints, 0);
        let occ = self.occurrences.entry(base_fp.clone()).or_insert(0);
        let fp = if *occ == 0 { base_fp } else { fingerprint(&ty.name, &tokens, &constraints, *occ) };
        *occ += 1;

        for p in &preds {
            self.tasks[p.0 as usize].successors.insert(id);
        }
        self.open += 1;
        self.tasks.push(TaskInstance {
            id,
            task_type: ty,
            bindings,
            state: TaskState::Created,
            predecessors: preds,
            successors: BTreeSet::new(),
            constraints,
            reliability,
            fingerprint: fp,
        });
        Ok(id)
    }

    fn deps_satisfied(&self, id: TaskId) -> bool {
        self.tasks[id.0 as usize]
            .predecessors
            .iter()
            .all(|p| self.tasks[p.0 as usize].state.releases_successors())
    }

    /// Moves a CREATED task to READY if all its predecessors finished.
    pub fn promote(&mut self, id: TaskId) -> bool {
        let idx = id.0 as usize;
        if idx < self.tasks.len() && self.tasks[idx].state == TaskState::Created && self.deps_satisfied(id) {
            self.set_state(id, TaskState::Ready);
            true
        } else {
            false
        }
    }

    pub fn ready_tasks(&self) -> BTreeSet<TaskId> {
        self.ready.clone()
    }

    /// READY tasks in ascending id order, without copying.
    pub fn ready_iter(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.ready.iter().copied()
    }

    pub fn ready_count(&self) -> usize {
        self.ready.len()
    }

    fn set_state(&mut self, id: TaskId, to: TaskState) {
        let t = &mut self.tasks[id.0 as usize];
        if t.state == TaskState::Ready {
            self.ready.remove(&id);
        }
        if to == TaskState::Ready {
            self.ready.insert(id);
        }
        if !t.state.is_terminal() && to.is_terminal() {
            self.open -= 1;
        }
        t.state = to;
    }

    pub fn state(&self, id: TaskId) -> Option<TaskState> {
        self.task(id).map(|t| t.state)
    }

    fn transition(&mut self, id: TaskId, to: TaskState) -> Result<(), GraphError> {
        let from = self.state(id).ok_or(GraphError::UnknownTask(id))?;
        if !is_legal_transition(from, to) {
            return Err(GraphError::IllegalTransition { id, from, to });
        }
        self.set_state(id, to);
        Ok(())
    }

    pub fn mark_scheduled(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.transition(id, TaskState::Scheduled)
    }

    pub fn mark_running(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.transition(id, TaskState::Running)
    }

    /// Returns a SCHEDULED or RUNNING task to READY (retry, executor rejection).
    pub fn requeue(&mut self, id: TaskId) -> Result<(), GraphError> {
        self.transition(id, TaskState::Ready)
    }

    fn release_successors(&mut self, id: TaskId) -> BTreeSet<TaskId> {
        let succ: Vec<TaskId> = self.tasks[id.0 as usize].successors.iter().copied().collect();
        succ.into_iter().filter(|s| self.promote(*s)).collect()
    }

    /// Records the terminal outcome of a RUNNING (or, for CANCELLED,
    /// SCHEDULED) task. FAILED cancels all transitive successors.
    pub fn complete_task(&mut self, id: TaskId, outcome: TaskState) -> Result<Completion, GraphError> {
        let from = self.state(id).ok_or(GraphError::UnknownTask(id))?;
        let allowed = match outcome {
            TaskState::Done | TaskState::Failed | TaskState::IgnoredFailed => from == TaskState::Running,
            TaskState::Cancelled => matches!(from, TaskState::Running | TaskState::Scheduled),
            _ => false,
        };
        if !allowed {
            return Err(GraphError::IllegalTransition { id, from, to: outcome });
        }
        self.set_state(id, outcome);
        let mut c = Completion::default();
        match outcome {
            TaskState::Done | TaskState::IgnoredFailed => c.released = self.release_successors(id),
            TaskState::Failed => c.cancelled = self.cancel_descendants(id),
            _ => {}
        }
        Ok(c)
    }

    fn cancel_descendants(&mut self, id: TaskId) -> BTreeSet<TaskId> {
        let mut cancelled = BTreeSet::new();
        let mut stack: Vec<TaskId> = self.tasks[id.0 as usize].successors.iter().copied().collect();
        while let Some(s) = stack.pop() {
            if matches!(self.tasks[s.0 as usize].state, TaskState::Created | TaskState::Ready) {
                self.set_state(s, TaskState::Cancelled);
                cancelled.insert(s);
                stack.extend(self.tasks[s.0 as usize].successors.iter().copied());
            }
        }
        cancelled
    }

    /// Marks a CREATED task SKIPPED (restart) and releases its successors.
    pub fn skip_task(&mut self, id: TaskId) -> Result<BTreeSet<TaskId>, GraphError> {
        self.transition(id, TaskState::Skipped)?;
        Ok(self.release_successors(id))
    }

    /// Cancels every CREATED or READY task (safe stop). Returns them in id order.
    pub fn cancel_pending(&mut self) -> Vec<TaskId> {
        let out: Vec<TaskId> =
            self.tasks.iter().filter(|t| matches!(t.state, TaskState::Created | TaskState::Ready)).map(|t| t.id).collect();
        for id in &out {
            self.set_state(*id, TaskState::Cancelled);
        }
        out
    }

    pub fn is_finished(&self) -> bool {
        self.open == 0
    }

    pub fn state_counts(&self) -> BTreeMap<TaskState, usize> {
        let mut m: BTreeMap<TaskState, usize> = TaskState::ALL.iter().map(|s| (*s, 0)).collect();
        for t in &self.tasks {
            *m.entry(t.state).or_default() += 1;
        }
        m
    }

    /// Kahn's algorithm; `None` if a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        let mut indeg: Vec<usize> = self.tasks.iter().map(|t| t.predecessors.len()).collect();
        let mut queue: std::collections::VecDeque<TaskId> =
            self.tasks.iter().filter(|t| t.predecessors.is_empty()).map(|t| t.id).collect();
        let mut order = Vec::with_capacity(self.tasks.len());
        while let Some(id) = queue.pop_front() {
            order.push(id);
            for s in &self.tasks[id.0 as usize].successors {
                indeg[s.0 as usize] -= 1;
                if indeg[s.0 as usize] == 0 {
                    queue.push_back(*s);
                }
            }
        }
        (order.len() == self.tasks.len()).then_some(order)
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats::of(self)
    }
}
