//! Placement of READY tasks onto free resources and the launch contract
//! handed to executors.

mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use trace::{Trace, TraceEvent, TraceKind, TRACE_VERSION};

use crate::resources::{Lease, NodeId, ResourcePool, TaskConstraints};
use crate::taskgraph::{TaskGraph, TaskId};

/// Environment contract for one task execution: which nodes it owns, how
/// many CPU units per node and which GPU devices on each node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaunchEnv {
    pub node_ids: Vec<NodeId>,
    pub node_names: Vec<String>,
    pub cpu_units_per_node: u32,
    /// Device indices per node, parallel to `node_ids`.
    pub gpu_device_indices: Vec<Vec<u32>>,
    pub timeout: Option<f64>,
}

impl LaunchEnv {
    pub fn from_lease(lease: &Lease, pool: &ResourcePool, timeout: Option<f64>) -> Self {
        Self {
            node_ids: lease.node_ids.clone(),
            node_names: lease
                .node_ids
                .iter()
                .map(|id| pool.node(*id).map(|n| n.name.clone()).unwrap_or_else(|| id.to_string()))
                .collect(),
            cpu_units_per_node: lease.cpu_per_node,
            gpu_device_indices: lease.gpu_indices.clone(),
            timeout,
        }
    }

    /// Variables exported to a launched process.
    pub fn env_vars(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("OMP_NUM_THREADS".into(), self.cpu_units_per_node.to_string());
        m.insert("ELASFLOW_NUM_NODES".into(), self.node_ids.len().to_string());
        m.insert("ELASFLOW_NODELIST".into(), self.node_names.join(","));
        let gpus = self.gpu_device_indices.first().map(|g| g.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
        m.insert("CUDA_VISIBLE_DEVICES".into(), gpus.unwrap_or_default());
        if let Some(t) = self.timeout {
            m.insert("ELASFLOW_TIMEOUT".into(), t.to_string());
        }
        m
    }

    pub fn total_cpu_units(&self) -> u32 {
        self.cpu_units_per_node * self.node_ids.len() as u32
    }
}

/// Greedy FIFO placement: READY tasks in ascending id order, each placed
/// first-fit if its constraints fit the currently free resources. Tasks that
/// do not fit stay READY and do not block later tasks.
pub fn schedule_step(graph: &mut TaskGraph, pool: &mut ResourcePool) -> Vec<(TaskId, Lease)> {
    let mut out = Vec::new();
    // Free resources only shrink within a step, so a constraint that did not
    // fit once cannot fit later in the same step.
    let mut unfit: BTreeSet<TaskConstraints> = BTreeSet::new();
    let ready: Vec<TaskId> = graph.ready_iter().collect();
    for id in ready {
        if !pool.has_free_cpu() {
            break;
        }
        let task = graph.task(id).expect("ready task exists");
        if unfit.contains(&task.constraints) {
            continue;
        }
        let Some(assignment) = pool.fits(&task.constraints) else {
            unfit.insert(task.constraints.clone());
            continue;
        };
        let lease = pool.allocate(&assignment).expect("fits() checked availability");
        graph.mark_scheduled(id).expect("READY -> SCHEDULED");
        out.push((id, lease));
    }
    out
}
