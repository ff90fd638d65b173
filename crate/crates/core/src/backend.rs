//! Interfaces between the orchestrator and the things it drives: the clock
//! and message queue, task executors and node providers.
//!
//! Executors and providers never touch the graph or the resource pool.
//! They report back by posting [`Message`]s that the orchestrator handles
//! one at a time.

use thiserror::Error;

use crate::scheduler::LaunchEnv;
use crate::taskgraph::TaskId;

/// Identifier of one execution attempt of a task.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttemptId(pub u64);

/// Identifier of one node request made to a provider.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProvisionTicket(pub u64);

#[derive(Clone, Debug, PartialEq)]
pub enum ExecResult {
    Success,
    Failure(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Started { attempt: AttemptId },
    Finished { attempt: AttemptId, result: ExecResult },
    Timeout { attempt: AttemptId },
    NodeReady { ticket: ProvisionTicket, name: Option<String> },
    ElasticityTick,
    ProviderPoll,
    Stop,
}

/// Clock plus message queue. The simulated runtime pops a virtual-time
/// event heap; the local runtime blocks on a channel with wall-clock timers.
pub trait Runtime {
    fn now(&self) -> f64;
    /// Delivers `msg` at time `t` (clamped to now).
    fn post_at(&mut self, t: f64, msg: Message);
    /// Next message in time order, advancing the clock. `None` when nothing
    /// can ever arrive.
    fn next(&mut self) -> Option<(f64, Message)>;
    /// True when only periodic messages are pending, so no task or node
    /// event can arrive without the orchestrator acting first.
    fn is_quiescent(&self) -> bool {
        false
    }
}

impl Message {
    /// Ticks and polls that the orchestrator re-posts to itself.
    pub fn is_periodic(&self) -> bool {
        matches!(self, Message::ElasticityTick | Message::ProviderPoll)
    }
}

#[derive(Clone, Debug)]
pub struct ExecRequest {
    pub attempt: AttemptId,
    pub task_id: TaskId,
    pub task_type: String,
    pub duration_model: String,
    pub fingerprint: String,
    /// 1-based attempt number for this task.
    pub attempt_no: u32,
    pub launch: LaunchEnv,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("executor rejected the task: {0}")]
    Rejected(String),
}

pub trait Executor {
    /// Starts an attempt. The executor posts `Started` and later `Finished`
    /// (unless cancelled or hung).
    fn submit(&mut self, req: &ExecRequest, rt: &mut dyn Runtime) -> Result<(), ExecutorError>;
    fn cancel(&mut self, attempt: AttemptId);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("elastic budget exhausted ({0} nodes)")]
    BudgetExceeded(u32),
    #[error("unknown node request {0:?}")]
    UnknownNode(ProvisionTicket),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProviderEvent {
    NodeReady { ticket: ProvisionTicket, name: Option<String> },
    /// The request is gone for good; its budget slot is free again.
    NodeLost { ticket: ProvisionTicket, message: String },
    /// Transient problem; the request stays pending.
    Error { ticket: Option<ProvisionTicket>, message: String },
}

/// Source of elastic nodes.
pub trait NodeProvider {
    fn request_node(&mut self, rt: &mut dyn Runtime) -> Result<ProvisionTicket, ProviderError>;
    fn release_node(&mut self, ticket: ProvisionTicket) -> Result<(), ProviderError>;
    /// Providers that learn about node readiness by polling return the
    /// polling period; the orchestrator then posts `ProviderPoll` messages.
    fn poll_interval(&self) -> Option<f64> {
        None
    }
    fn poll(&mut self, _now: f64) -> Vec<ProviderEvent> {
        Vec::new()
    }
}

/// Provider that never grants nodes; used when elasticity is disabled.
#[derive(Debug, Default)]
pub struct NoProvider;

impl NodeProvider for NoProvider {
    fn request_node(&mut self, _rt: &mut dyn Runtime) -> Result<ProvisionTicket, ProviderError> {
        Err(ProviderError::BudgetExceeded(0))
    }

    fn release_node(&mut self, ticket: ProvisionTicket) -> Result<(), ProviderError> {
        Err(ProviderError::UnknownNode(ticket))
    }
}
