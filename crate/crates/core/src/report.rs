//! Post-run analysis: scaling tables, elasticity statistics and a per-node
//! Gantt view reconstructed from the trace.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::elasticity::ElasticityRow;
use crate::resources::NodeId;
use crate::scheduler::{Trace, TraceKind};
use crate::taskgraph::TaskId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub nodes: u32,
    /// Problem size (task or branch count); equal across a strong-scaling series.
    pub size: u64,
    pub makespan: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub nodes: u32,
    pub size: u64,
    pub makespan: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

/// Speedup and efficiency against the first point. Strong scaling divides
/// the speedup by the node ratio; weak scaling compares makespans directly.
pub fn scaling_table(points: &[ScalingPoint], weak: bool) -> Vec<ScalingRow> {
    let Some(base) = points.first() else {
        return Vec::new();
    };
    points
        .iter()
        .map(|p| {
            let speedup = base.makespan / p.makespan;
            let efficiency = if weak { speedup } else { speedup * base.nodes as f64 / p.nodes as f64 };
            ScalingRow { nodes: p.nodes, size: p.size, makespan: p.makespan, speedup, efficiency }
        })
        .collect()
}

pub fn format_scaling_table(rows: &[ScalingRow]) -> String {
    let mut out = String::from("nodes      size     makespan   speedup  efficiency\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} {:>9} {:>12.1} {:>9.2} {:>10.1}%",
            r.nodes,
            r.size,
            r.makespan,
            r.speedup,
            r.efficiency * 100.0
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticityStats {
    pub evaluations: usize,
    pub max_nodes_up: u32,
    pub min_nodes_up: u32,
    /// Node count averaged over time between the first and last evaluation.
    pub mean_nodes_up: f64,
    pub max_pw: f64,
    /// Evaluations with PW above IC.
    pub underprovisioned: usize,
}

pub fn elasticity_stats(rows: &[ElasticityRow]) -> ElasticityStats {
    let span = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    let weighted: f64 = rows.windows(2).map(|w| w[0].n_up as f64 * (w[1].t - w[0].t)).fold(0.0, |acc, x| acc + x);
    ElasticityStats {
        evaluations: rows.len(),
        max_nodes_up: rows.iter().map(|r| r.n_up).max().unwrap_or(0),
        min_nodes_up: rows.iter().map(|r| r.n_up).min().unwrap_or(0),
        mean_nodes_up: if span > 0.0 { weighted / span } else { rows.first().map_or(0.0, |r| r.n_up as f64) },
        max_pw: rows.iter().map(|r| r.pw).fold(0.0, f64::max),
        underprovisioned: rows.iter().filter(|r| r.pw > r.ic).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanttBar {
    pub task_id: TaskId,
    pub start: f64,
    pub end: f64,
    /// END, FAIL, TIMEOUT or CANCEL.
    pub outcome: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanttRow {
    pub node_id: NodeId,
    pub pool: String,
    pub up_at: f64,
    pub released_at: Option<f64>,
    pub bars: Vec<GanttBar>,
}

/// One row per node that ever came up, with the task intervals it hosted.
pub fn gantt(trace: &Trace) -> Vec<GanttRow> {
    let mut rows: BTreeMap<NodeId, GanttRow> = BTreeMap::new();
    let mut open: BTreeMap<TaskId, f64> = BTreeMap::new();
    for e in trace.events() {
        match e.kind {
            TraceKind::NodeUp => {
                for n in e.node_list() {
                    rows.insert(
                        *n,
                        GanttRow {
                            node_id: *n,
                            pool: e.get("pool").unwrap_or("STATIC").to_string(),
                            up_at: e.t,
                            released_at: None,
                            bars: Vec::new(),
                        },
                    );
                }
            }
            TraceKind::ScaleDown if e.get("phase") == Some("release") => {
                for n in e.node_list() {
                    if let Some(r) = rows.get_mut(n) {
                        r.released_at = Some(e.t);
                    }
                }
            }
            TraceKind::Start => {
                if let Some(id) = e.task_id {
                    open.insert(id, e.t);
                }
            }
            TraceKind::End | TraceKind::Fail | TraceKind::Timeout | TraceKind::Cancel => {
                let Some(id) = e.task_id else { continue };
                let Some(start) = open.remove(&id) else { continue };
                for n in e.node_list() {
                    if let Some(r) = rows.get_mut(n) {
                        r.bars.push(GanttBar { task_id: id, start, end: e.t, outcome: e.kind.to_string() });
                    }
                }
            }
            _ => {}
        }
    }
    rows.into_values().collect()
}
