//! Discrete-event simulation backend: a virtual clock, an executor that
//! draws task durations from a model and a provider with sampled
//! provisioning latency.

mod model;

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

pub use model::{
    stream_rng, Distribution, DurationModel, DurationSpec, FaultKind, FaultMode, FaultPlan, FaultSpec, Scenario,
    ScenarioError,
};

use crate::backend::{
    ExecRequest, ExecResult, Executor, ExecutorError, Message, NodeProvider, ProviderError, ProvisionTicket, Runtime,
    AttemptId,
};
use crate::resources::DelayModel;

struct Entry<M> {
    t: f64,
    seq: u64,
    msg: M,
}

impl<M> PartialEq for Entry<M> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<M> Eq for Entry<M> {}
impl<M> PartialOrd for Entry<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Entry<M> {
    // Reversed: BinaryHeap is a max-heap, we pop the earliest.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

/// Time-ordered queue; ties pop in insertion order.
pub struct EventQueue<M> {
    heap: BinaryHeap<Entry<M>>,
    seq: u64,
}

impl<M> Default for EventQueue<M> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0 }
    }
}

impl<M> EventQueue<M> {
    pub fn push(&mut self, t: f64, msg: M) {
        self.heap.push(Entry { t, seq: self.seq, msg });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, M)> {
        self.heap.pop().map(|e| (e.t, e.msg))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.t)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Virtual clock; `next` jumps to the earliest pending message.
#[derive(Default)]
pub struct SimRuntime {
    now: f64,
    queue: EventQueue<Message>,
    substantive: usize,
}

impl SimRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

impl Runtime for SimRuntime {
    fn now(&self) -> f64 {
        self.now
    }

    fn post_at(&mut self, t: f64, msg: Message) {
        self.substantive += usize::from(!msg.is_periodic());
        self.queue.push(t.max(self.now), msg);
    }

    fn next(&mut self) -> Option<(f64, Message)> {
        let (t, msg) = self.queue.pop()?;
        self.substantive -= usize::from(!msg.is_periodic());
        self.now = t;
        Some((t, msg))
    }

    fn is_quiescent(&self) -> bool {
        self.substantive == 0
    }
}

/// Executor driven by a [`DurationModel`] and a [`FaultPlan`].
///
/// Dispatches go through a single serialized dispatcher: each costs
/// `dispatch_latency` seconds and the next one cannot begin before the
/// previous one is done.
pub struct SimExecutor {
    seed: u64,
    durations: DurationModel,
    faults: FaultPlan,
    dispatch_latency: f64,
    dispatcher_free_at: f64,
    cancelled: BTreeSet<AttemptId>,
}

impl SimExecutor {
    pub fn new(scenario: &Scenario) -> Self {
        Self {
            seed: scenario.seed,
            durations: scenario.durations.clone(),
            faults: scenario.faults.clone(),
            dispatch_latency: scenario.dispatch_latency,
            dispatcher_free_at: 0.0,
            cancelled: BTreeSet::new(),
        }
    }

    pub fn is_cancelled(&self, attempt: AttemptId) -> bool {
        self.cancelled.contains(&attempt)
    }
}

impl Executor for SimExecutor {
    fn submit(&mut self, req: &ExecRequest, rt: &mut dyn Runtime) -> Result<(), ExecutorError> {
        let start = self.dispatcher_free_at.max(rt.now()) + self.dispatch_latency;
        self.dispatcher_free_at = start;
        let units = req.launch.total_cpu_units();
        let d = self.durations.sample(self.seed, &req.duration_model, &req.fingerprint, req.attempt_no, units);
        rt.post_at(start, Message::Started { attempt: req.attempt });
        match self.faults.lookup(req.task_id, &req.fingerprint, req.attempt_no) {
            None => rt.post_at(start + d, Message::Finished { attempt: req.attempt, result: ExecResult::Success }),
            Some(FaultKind::FailAt(frac)) => rt.post_at(
                start + frac * d,
                Message::Finished { attempt: req.attempt, result: ExecResult::Failure("injected fault".into()) },
            ),
            Some(FaultKind::Hang) => {}
        }
        Ok(())
    }

    fn cancel(&mut self, attempt: AttemptId) {
        // Pending messages for a cancelled attempt are ignored by the orchestrator.
        self.cancelled.insert(attempt);
    }
}

/// Provider that grants up to `elastic_max` concurrently held nodes, each
/// becoming ready after a sampled delay.
pub struct SimProvider {
    seed: u64,
    delay: DelayModel,
    elastic_max: u32,
    next_ticket: u64,
    held: BTreeSet<ProvisionTicket>,
}

impl SimProvider {
    pub fn new(seed: u64, delay: DelayModel, elastic_max: u32) -> Self {
        Self { seed, delay, elastic_max, next_ticket: 0, held: BTreeSet::new() }
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    /// Provisioning delay for the given ticket.
    pub fn delay_for(&self, ticket: ProvisionTicket) -> f64 {
        let mut rng = stream_rng(self.seed, "provision", "", ticket.0);
        (self.delay.seconds * self.delay.distribution.sample(&mut rng)).max(0.0)
    }
}

impl NodeProvider for SimProvider {
    fn request_node(&mut self, rt: &mut dyn Runtime) -> Result<ProvisionTicket, ProviderError> {
        if self.held.len() as u32 >= self.elastic_max {
            return Err(ProviderError::BudgetExceeded(self.elastic_max));
        }
        let ticket = ProvisionTicket(self.next_ticket);
        self.next_ticket += 1;
        self.held.insert(ticket);
        let at = rt.now() + self.delay_for(ticket);
        rt.post_at(at, Message::NodeReady { ticket, name: None });
        Ok(ticket)
    }

    fn release_node(&mut self, ticket: ProvisionTicket) -> Result<(), ProviderError> {
        if self.held.remove(&ticket) {
            Ok(())
        } else {
            Err(ProviderError::UnknownNode(ticket))
        }
    }
}
