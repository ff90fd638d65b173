//! Wall-clock backend: a real-time runtime, a thread-per-attempt executor
//! and a bridge from POSIX signals to the orchestrator's stop request.

use std::collections::BTreeMap;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use signal_hook::iterator::{Handle, Signals};

use crate::backend::{AttemptId, ExecRequest, ExecResult, Executor, ExecutorError, Message, Runtime};
use crate::sim::EventQueue;

/// Runtime on the wall clock. Timers posted with `post_at` and messages sent
/// from worker threads are merged; due timers are delivered first.
pub struct LocalRuntime {
    origin: Instant,
    timers: EventQueue<Message>,
    tx: Sender<Message>,
    rx: Receiver<Message>,
}

impl Default for LocalRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalRuntime {
    pub fn new() -> Self {
        let (tx, rx) = channel();
        Self { origin: Instant::now(), timers: EventQueue::default(), tx, rx }
    }

    /// Handle for threads that report into this runtime.
    pub fn sender(&self) -> Sender<Message> {
        self.tx.clone()
    }
}

impl Runtime for LocalRuntime {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn post_at(&mut self, t: f64, msg: Message) {
        self.timers.push(t.max(self.now()), msg);
    }

    fn next(&mut self) -> Option<(f64, Message)> {
        loop {
            let now = self.now();
            match self.timers.peek_time() {
                Some(t) if t <= now => return self.timers.pop().map(|(_, m)| (now, m)),
                Some(t) => match self.rx.recv_timeout(Duration::from_secs_f64(t - now)) {
                    Ok(m) => return Some((self.now(), m)),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return None,
                },
                // The runtime holds a sender, so this only returns on a message.
                None => return self.rx.recv().ok().map(|m| (self.now(), m)),
            }
        }
    }
}

/// Runs each attempt on its own thread: either a mock that sleeps for
/// `mock_seconds`, or an external command. Command arguments may contain
/// `{task_type}`, `{task_id}`, `{attempt}` and `{fingerprint}`.
pub struct LocalExecutor {
    command: Option<Vec<String>>,
    mock_seconds: f64,
    tx: Sender<Message>,
    cancel: BTreeMap<AttemptId, Arc<AtomicBool>>,
}

const POLL: Duration = Duration::from_millis(20);

impl LocalExecutor {
    pub fn new(rt: &LocalRuntime, command: Option<Vec<String>>, mock_seconds: f64) -> Self {
        Self { command, mock_seconds, tx: rt.sender(), cancel: BTreeMap::new() }
    }

    fn argv(&self, req: &ExecRequest) -> Option<Vec<String>> {
        let cmd = self.command.as_ref()?;
        Some(
            cmd.iter()
                .map(|a| {
                    a.replace("{task_type}", &req.task_type)
                        .replace("{task_id}", &req.task_id.0.to_string())
                        .replace("{attempt}", &req.attempt_no.to_string())
                        .replace("{fingerprint}", &req.fingerprint)
                })
                .collect(),
        )
    }
}

fn run_mock(seconds: f64, stop: &AtomicBool) -> Option<ExecResult> {
    let until = Instant::now() + Duration::from_secs_f64(seconds.max(0.0));
    while Instant::now() < until {
        if stop.load(Ordering::Relaxed) {
            return None;
        }
        thread::sleep(POLL.min(until.saturating_duration_since(Instant::now())));
    }
    Some(ExecResult::Success)
}

fn run_command(argv: &[String], env: &BTreeMap<String, String>, stop: &AtomicBool) -> Option<ExecResult> {
    let Some((prog, args)) = argv.split_first() else {
        return Some(ExecResult::Failure("empty command".into()));
    };
    let mut child = match Command::new(prog).args(args).envs(env).stdin(Stdio::null()).spawn() {
        Ok(c) => c,
        Err(e) => return Some(ExecResult::Failure(format!("{prog}: {e}"))),
    };
    loop {
        if stop.load(Ordering::Relaxed) {
            let _ = child.kill();
            let _ = child.wait();
            return None;
        }
        match child.try_wait() {
            Ok(Some(status)) if status.success() => return Some(ExecResult::Success),
            Ok(Some(status)) => return Some(ExecResult::Failure(format!("{prog}: {status}"))),
            Ok(None) => thread::sleep(POLL),
            Err(e) => return Some(ExecResult::Failure(format!("{prog}: {e}"))),
        }
    }
}

impl Executor for LocalExecutor {
    fn submit(&mut self, req: &ExecRequest, rt: &mut dyn Runtime) -> Result<(), ExecutorError> {
        let stop = Arc::new(AtomicBool::new(false));
        self.cancel.insert(req.attempt, stop.clone());
        rt.post_at(rt.now(), Message::Started { attempt: req.attempt });
        let tx = self.tx.clone();
        let attempt = req.attempt;
        let argv = self.argv(req);
        let mut env = req.launch.env_vars();
        env.insert("ELASFLOW_TASK_ID".into(), req.task_id.0.to_string());
        env.insert("ELASFLOW_TASK_TYPE".into(), req.task_type.clone());
        env.insert("ELASFLOW_ATTEMPT".into(), req.attempt_no.to_string());
        let mock = self.mock_seconds;
        thread::Builder::new()
            .name(format!("attempt-{}", attempt.0))
            .spawn(move || {
                let out = match argv {
                    Some(argv) => run_command(&argv, &env, &stop),
                    None => run_mock(mock, &stop),
                };
                if let Some(result) = out {
                    // The orchestrator may already be gone after a stop.
                    let _ = tx.send(Message::Finished { attempt, result });
                }
            })
            .map_err(|e| ExecutorError::Rejected(e.to_string()))?;
        Ok(())
    }

    fn cancel(&mut self, attempt: AttemptId) {
        if let Some(flag) = self.cancel.remove(&attempt) {
            flag.store(true, Ordering::Relaxed);
        }
    }
}

/// Forwards the given signals to the runtime as `Stop`. Drop to uninstall.
pub struct SignalBridge {
    handle: Handle,
    thread: Option<thread::JoinHandle<()>>,
}

impl SignalBridge {
    pub fn install(signals: &[i32], tx: Sender<Message>) -> std::io::Result<Self> {
        let mut sigs = Signals::new(signals)?;
        let handle = sigs.handle();
        let thread = thread::spawn(move || {
            for sig in sigs.forever() {
                debug!("signal {sig}: requesting stop");
                if tx.send(Message::Stop).is_err() {
                    break;
                }
            }
        });
        Ok(Self { handle, thread: Some(thread) })
    }
}

impl Drop for SignalBridge {
    fn drop(&mut self) {
        self.handle.close();
        if let Some(t) = self.thread.take() {
            if t.join().is_err() {
                warn!("signal thread panicked");
            }
        }
    }
}
