//! Append-only execution trace and its JSON-lines encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::resources::NodeId;
use crate::taskgraph::TaskId;

pub const TRACE_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceKind {
    Register,
    Ready,
    Schedule,
    Start,
    End,
    Fail,
    Timeout,
    Cancel,
    Skip,
    ScaleUpRequest,
    NodeUp,
    ScaleDown,
    Checkpoint,
    ProviderError,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_ids: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub detail: BTreeMap<String, String>,
}

impl TraceEvent {
    pub fn new(t: f64, kind: TraceKind) -> Self {
        Self { t, kind, task_id: None, node_ids: None, detail: BTreeMap::new() }
    }

    pub fn task(mut self, id: TaskId) -> Self {
        self.task_id = Some(id);
        self
    }

    pub fn nodes(mut self, ids: Vec<NodeId>) -> Self {
        self.node_ids = Some(ids);
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.detail.insert(key.to_string(), value.to_string());
        self
    }

    pub fn node_list(&self) -> &[NodeId] {
        self.node_ids.as_deref().unwrap_or(&[])
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.get(key).map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    trace_version: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an event. Time never goes backwards.
    pub fn push(&mut self, ev: TraceEvent) {
        debug_assert!(self.events.last().map_or(true, |l| l.t <= ev.t), "trace time went backwards");
        self.events.push(ev);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: TraceKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer(&mut w, &Header { trace_version: TRACE_VERSION })?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty trace"))??;
        let h: Header = serde_json::from_str(&header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        if h.trace_version != TRACE_VERSION {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported trace_version {}", h.trace_version),
            ));
        }
        let mut events = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
        }
        Ok(Self { events })
    }

    /// Structural checks every finished trace must satisfy; returns the
    /// first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut last = f64::NEG_INFINITY;
        let mut scheduled: BTreeSet<TaskId> = BTreeSet::new();
        let mut started: BTreeMap<TaskId, usize> = BTreeMap::new();
        let (mut starts, mut ends, mut fails, mut timeouts, mut cancels_after_start) = (0, 0, 0, 0, 0);
        for (i, e) in self.events.iter().enumerate() {
            if e.t < last {
                return Err(format!("event {i} at t={} precedes t={last}", e.t));
            }
            last = e.t;
            let id = e.task_id;
            match e.kind {
                TraceKind::Schedule => {
                    scheduled.insert(id.ok_or("SCHEDULE without task")?);
                }
                TraceKind::Start => {
                    let id = id.ok_or("START without task")?;
                    if !scheduled.contains(&id) {
                        return Err(format!("START of {id} without prior SCHEDULE"));
                    }
                    *started.entry(id).or_default() += 1;
                    starts += 1;
                }
                TraceKind::End => ends += 1,
                TraceKind::Fail => fails += 1,
                TraceKind::Timeout => timeouts += 1,
                TraceKind::Cancel if e.get("started") == Some("true") => cancels_after_start += 1,
                _ => {}
            }
        }
        if starts != ends + fails + timeouts + cancels_after_start {
            return Err(format!(
                "#START={starts} != #END={ends} + #FAIL={fails} + #TIMEOUT={timeouts} + #CANCEL(after START)={cancels_after_start}"
            ));
        }
        Ok(())
    }
}
