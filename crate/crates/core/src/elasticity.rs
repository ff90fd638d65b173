//! Workload and capacity estimates and the scaling policy built on them.
//!
//! PW = sum over READY tasks of R x mean execution time, IC = sum over UP and
//! PROVISIONING nodes of C x mean provisioning time. Both are in
//! node-seconds. The policy adds one node while PW > IC and removes one
//! elastic node while PW < IC.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::resources::{ElasticityConfig, NodeId, NodeResource, NodeShape, NodeState, PoolKind, RequirementMode, TaskConstraints};

/// Lower bound on the mean provisioning time used in IC.
pub const MIN_RT: f64 = 1.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeProfile {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl TypeProfile {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn variance(&self) -> Option<f64> {
        (self.count > 1).then(|| {
            let n = self.count as f64;
            ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
        })
    }
}

/// Observed execution times per task type and node provisioning latencies.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileStore {
    types: BTreeMap<String, TypeProfile>,
    priors: BTreeMap<String, f64>,
    default_mean_et: f64,
    rt_count: u64,
    rt_sum: f64,
    rt_prior: f64,
}

impl ProfileStore {
    pub fn new(cfg: &ElasticityConfig) -> Self {
        Self {
            types: BTreeMap::new(),
            priors: cfg.mean_et_priors.clone(),
            default_mean_et: cfg.default_mean_et,
            rt_count: 0,
            rt_sum: 0.0,
            rt_prior: cfg.rt_prior,
        }
    }

    pub fn record_execution(&mut self, task_type: &str, seconds: f64) {
        let p = self.types.entry(task_type.to_string()).or_default();
        p.count += 1;
        p.sum += seconds;
        p.sum_sq += seconds * seconds;
    }

    pub fn record_provision(&mut self, seconds: f64) {
        self.rt_count += 1;
        self.rt_sum += seconds;
    }

    pub fn profile(&self, task_type: &str) -> Option<&TypeProfile> {
        self.types.get(task_type)
    }

    /// Observed mean, else the type prior, else the default.
    pub fn mean_et(&self, task_type: &str) -> f64 {
        self.types
            .get(task_type)
            .and_then(TypeProfile::mean)
            .or_else(|| self.priors.get(task_type).copied())
            .unwrap_or(self.default_mean_et)
    }

    /// Mean provisioning time (observed or prior), clamped to [`MIN_RT`].
    pub fn mean_rt(&self) -> f64 {
        let rt = if self.rt_count > 0 { self.rt_sum / self.rt_count as f64 } else { self.rt_prior };
        rt.max(MIN_RT)
    }
}

/// Node-equivalents a task occupies.
pub fn requirement(c: &TaskConstraints, reference: &NodeShape, mode: RequirementMode) -> f64 {
    let nodes = c.computing_nodes() as f64;
    match mode {
        RequirementMode::WholeNodes => nodes,
        RequirementMode::Fractional => {
            let mut f = c.cpu_units() as f64 / reference.cpu_units.max(1) as f64;
            if reference.gpu_units > 0 {
                f = f.max(c.gpu_units() as f64 / reference.gpu_units as f64);
            }
            nodes * f
        }
    }
}

/// Capacity of a node in reference node-equivalents.
pub fn capacity(node: &NodeResource, reference: &NodeShape) -> f64 {
    node.cpu_units as f64 / reference.cpu_units.max(1) as f64
}

/// Parallel workload: sum of requirement times mean execution time over
/// `(task type, constraints)` pairs of READY tasks.
pub fn estimate_parallel_workload<'a>(
    ready: impl IntoIterator<Item = (&'a str, &'a TaskConstraints)>,
    profiles: &ProfileStore,
    reference: &NodeShape,
    mode: RequirementMode,
) -> f64 {
    // Folds from +0.0; an empty `f64::sum` is -0.0 and prints as `-0`.
    ready.into_iter().map(|(ty, c)| requirement(c, reference, mode) * profiles.mean_et(ty)).fold(0.0, |acc, x| acc + x)
}

/// Whether a node contributes to IC.
pub fn counts_for_capacity(node: &NodeResource, count_provisioning: bool) -> bool {
    match node.state {
        NodeState::Up => true,
        NodeState::Provisioning => count_provisioning,
        NodeState::Draining | NodeState::Released => false,
    }
}

/// Infrastructure capacity: sum of node capacity times mean provisioning
/// time over the nodes that count.
pub fn estimate_infrastructure_capacity<'a>(
    nodes: impl IntoIterator<Item = &'a NodeResource>,
    profiles: &ProfileStore,
    reference: &NodeShape,
    count_provisioning: bool,
) -> f64 {
    let rt = profiles.mean_rt();
    nodes
        .into_iter()
        .filter(|n| counts_for_capacity(n, count_provisioning))
        .map(|n| capacity(n, reference) * rt)
        .fold(0.0, |acc, x| acc + x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScaleAction {
    ScaleUp(u32),
    ScaleDown(NodeId),
    Hold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub action: ScaleAction,
    pub pw: f64,
    pub ic: f64,
    pub t: f64,
}

/// Estimated remaining seconds of the tasks running on one node, from
/// `(task type, start time)` pairs.
pub fn running_load<'a>(running: impl IntoIterator<Item = (&'a str, f64)>, profiles: &ProfileStore, now: f64) -> f64 {
    running.into_iter().map(|(ty, start)| (profiles.mean_et(ty) - (now - start)).max(0.0)).fold(0.0, |acc, x| acc + x)
}

/// Elastic UP node with the minimum running load among those whose capacity
/// fits the underused amount (or the smallest ones if none fits). Ties go to
/// the newest node.
pub fn select_victim(
    nodes: &[&NodeResource],
    pw: f64,
    ic: f64,
    rt: f64,
    loads: &BTreeMap<NodeId, f64>,
    reference: &NodeShape,
) -> Option<NodeId> {
    let elastic: Vec<&NodeResource> =
        nodes.iter().copied().filter(|n| n.pool == PoolKind::Elastic && n.state == NodeState::Up).collect();
    if elastic.is_empty() {
        return None;
    }
    let underused = (ic - pw) / rt.max(MIN_RT);
    let mut candidates: Vec<&NodeResource> = elastic.iter().copied().filter(|n| capacity(n, reference) <= underused).collect();
    if candidates.is_empty() {
        let smallest = elastic.iter().map(|n| n.cpu_units).min().expect("non-empty");
        candidates = elastic.into_iter().filter(|n| n.cpu_units == smallest).collect();
    }
    candidates
        .into_iter()
        .min_by(|a, b| {
            let la = loads.get(&a.node_id).copied().unwrap_or(0.0);
            let lb = loads.get(&b.node_id).copied().unwrap_or(0.0);
            la.total_cmp(&lb).then(b.node_id.cmp(&a.node_id))
        })
        .map(|n| n.node_id)
}

/// Periodic scaling policy with scale-up hysteresis.
#[derive(Clone, Debug)]
pub struct ElasticityController {
    pub cfg: ElasticityConfig,
    pub reference: NodeShape,
    pub profiles: ProfileStore,
    last_scale_up: Option<f64>,
}

impl ElasticityController {
    pub fn new(cfg: ElasticityConfig, reference: NodeShape) -> Self {
        let profiles = ProfileStore::new(&cfg);
        Self { cfg, reference, profiles, last_scale_up: None }
    }

    pub fn note_scale_up(&mut self, t: f64) {
        self.last_scale_up = Some(t);
    }

    /// `held_elastic` counts elastic nodes not yet RELEASED.
    #[allow(clippy::too_many_arguments)]
    pub fn decide(
        &self,
        t: f64,
        pw: f64,
        ic: f64,
        nodes: &[&NodeResource],
        held_elastic: u32,
        loads: &BTreeMap<NodeId, f64>,
    ) -> ScalingDecision {
        let rt = self.profiles.mean_rt();
        let action = if pw > ic {
            if held_elastic < self.cfg.elastic_max {
                ScaleAction::ScaleUp(1)
            } else {
                ScaleAction::Hold
            }
        } else if pw < ic {
            let cooling = self.last_scale_up.is_some_and(|s| t - s < rt);
            match (cooling, select_victim(nodes, pw, ic, rt, loads, &self.reference)) {
                (false, Some(id)) => ScaleAction::ScaleDown(id),
                _ => ScaleAction::Hold,
            }
        } else {
            ScaleAction::Hold
        };
        ScalingDecision { action, pw, ic, t }
    }
}

pub const CSV_HEADER: &str = "t,pw,ic,n_up,n_provisioning,n_running_tasks";

/// One evaluation of the elasticity policy. `n_up` counts UP and DRAINING
/// nodes (both still hold resources).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticityRow {
    pub t: f64,
    pub pw: f64,
    pub ic: f64,
    pub n_up: u32,
    pub n_provisioning: u32,
    pub n_running_tasks: u32,
}

pub fn write_csv<W: Write>(rows: &[ElasticityRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.t, r.pw, r.ic, r.n_up, r.n_provisioning, r.n_running_tasks)?;
    }
    w.flush()
}

pub fn read_csv<R: BufRead>(r: R) -> io::Result<Vec<ElasticityRow>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty elasticity csv".into()))??;
    if header.trim() != CSV_HEADER {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("line {}: expected 6 fields", i + 2)));
        }
        let num = |k: usize| f[k].trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
        let int = |k: usize| f[k].trim().parse::<u32>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
        rows.push(ElasticityRow { t: num(0)?, pw: num(1)?, ic: num(2)?, n_up: int(3)?, n_provisioning: int(4)?, n_running_tasks: int(5)? });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::{ProcessorSpec, ProcessorType};
    use proptest::prelude::*;

    fn shape(cpu: u32) -> NodeShape {
        NodeShape { cpu_units: cpu, gpu_units: 0 }
    }

    fn node(id: u32, pool: PoolKind, state: NodeState) -> NodeResource {
        NodeResource::new(NodeId(id), format!("node{id}"), &shape(48), pool, state)
    }

    fn cons(nodes: u32, cpu: u32) -> TaskConstraints {
        TaskConstraints::new(nodes, vec![ProcessorSpec { processor_type: ProcessorType::Cpu, computing_units: cpu }]).unwrap()
    }

    fn store(priors: &[(&str, f64)], rt: f64) -> ProfileStore {
        let cfg = ElasticityConfig {
            mean_et_priors: priors.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            rt_prior: rt,
            ..ElasticityConfig::default()
        };
        ProfileStore::new(&cfg)
    }

    #[test]
    fn pw_examples() {
        let p = store(&[("t1", 100.0), ("t2", 50.0), ("t3", 30.0)], 60.0);
        let (c1, c2) = (cons(1, 1), cons(2, 1));
        let r = shape(48);
        let pw = estimate_parallel_workload([("t1", &c1), ("t2", &c2)], &p, &r, RequirementMode::WholeNodes);
        assert_eq!(pw, 200.0);
        assert_eq!(estimate_parallel_workload([], &p, &r, RequirementMode::WholeNodes), 0.0);
        let ten: Vec<(&str, &TaskConstraints)> = (0..10).map(|_| ("t3", &c1)).collect();
        assert_eq!(estimate_parallel_workload(ten, &p, &r, RequirementMode::WholeNodes), 300.0);
        // Unknown type falls back to the default of 60 s.
        assert_eq!(estimate_parallel_workload([("zz", &c1)], &p, &r, RequirementMode::WholeNodes), 60.0);
    }

    #[test]
    fn fractional_requirement() {
        let r = shape(48);
        assert_eq!(requirement(&cons(1, 24), &r, RequirementMode::Fractional), 0.5);
        assert_eq!(requirement(&cons(2, 48), &r, RequirementMode::Fractional), 2.0);
        assert_eq!(requirement(&cons(1, 24), &r, RequirementMode::WholeNodes), 1.0);
    }

    #[test]
    fn ic_examples() {
        let p = store(&[], 60.0);
        let r = shape(48);
        let three: Vec<NodeResource> = (0..3).map(|i| node(i, PoolKind::Static, NodeState::Up)).collect();
        assert_eq!(estimate_infrastructure_capacity(&three, &p, &r, true), 180.0);
        assert_eq!(estimate_infrastructure_capacity(&[], &p, &r, true), 0.0);

        let p = store(&[], 120.0);
        let mut seven: Vec<NodeResource> = (0..6).map(|i| node(i, PoolKind::Static, NodeState::Up)).collect();
        seven.push(node(6, PoolKind::Elastic, NodeState::Provisioning));
        // Oracle: per-node sum including the provisioning node.
        let oracle: f64 = seven.iter().map(|_| 1.0 * 120.0).sum();
        assert_eq!(oracle, 840.0);
        assert_eq!(estimate_infrastructure_capacity(&seven, &p, &r, true), oracle);
        assert_eq!(estimate_infrastructure_capacity(&seven, &p, &r, false), 720.0);
    }

    #[test]
    fn rt_is_observed_mean_and_clamped() {
        let mut p = store(&[], 0.0);
        assert_eq!(p.mean_rt(), MIN_RT);
        p.record_provision(100.0);
        p.record_provision(140.0);
        assert_eq!(p.mean_rt(), 120.0);
        p.record_execution("a", 10.0);
        p.record_execution("a", 20.0);
        assert_eq!(p.mean_et("a"), 15.0);
        assert_eq!(p.profile("a").unwrap().variance(), Some(50.0));
    }

    fn controller(elastic_max: u32) -> ElasticityController {
        let cfg = ElasticityConfig { elastic_max, rt_prior: 60.0, ..ElasticityConfig::default() };
        ElasticityController::new(cfg, shape(48))
    }

    #[test]
    fn decision_rules() {
        let c = controller(2);
        let idle = node(7, PoolKind::Elastic, NodeState::Up);
        let s = node(0, PoolKind::Static, NodeState::Up);
        let nodes = [&s, &idle];
        let none = BTreeMap::new();
        assert_eq!(c.decide(0.0, 200.0, 180.0, &nodes, 1, &none).action, ScaleAction::ScaleUp(1));
        assert_eq!(c.decide(0.0, 200.0, 180.0, &nodes, 2, &none).action, ScaleAction::Hold);
        assert_eq!(c.decide(0.0, 100.0, 180.0, &nodes, 1, &none).action, ScaleAction::ScaleDown(NodeId(7)));
        assert_eq!(c.decide(0.0, 180.0, 180.0, &nodes, 1, &none).action, ScaleAction::Hold);
        assert_eq!(c.decide(0.0, 100.0, 180.0, &[&s], 0, &none).action, ScaleAction::Hold);
    }

    #[test]
    fn hysteresis_blocks_scale_down_for_one_rt() {
        let mut c = controller(2);
        c.note_scale_up(100.0);
        let n = node(7, PoolKind::Elastic, NodeState::Up);
        let none = BTreeMap::new();
        assert_eq!(c.decide(159.0, 0.0, 60.0, &[&n], 1, &none).action, ScaleAction::Hold);
        assert_eq!(c.decide(160.0, 0.0, 60.0, &[&n], 1, &none).action, ScaleAction::ScaleDown(NodeId(7)));
    }

    #[test]
    fn victim_examples() {
        let r = shape(48);
        let n7 = node(7, PoolKind::Elastic, NodeState::Up);
        let n8 = node(8, PoolKind::Elastic, NodeState::Up);
        let s0 = node(0, PoolKind::Static, NodeState::Up);
        let nodes = [&s0, &n7, &n8];
        let p = store(&[("md", 100.0)], 60.0);

        let mut loads = BTreeMap::new();
        loads.insert(NodeId(8), running_load([("md", 0.0)], &p, 10.0));
        assert_eq!(select_victim(&nodes, 0.0, 180.0, 60.0, &loads, &r), Some(NodeId(7)));

        assert_eq!(select_victim(&nodes, 0.0, 180.0, 60.0, &BTreeMap::new(), &r), Some(NodeId(8)));

        // Remaining-time oracle: mean 100 s, started at 40 and 20, now 110.
        let now = 110.0;
        let l7 = running_load([("md", 40.0)], &p, now);
        let l8 = running_load([("md", 20.0)], &p, now);
        assert_eq!((l7, l8), (30.0, 10.0));
        let loads = BTreeMap::from([(NodeId(7), l7), (NodeId(8), l8)]);
        assert_eq!(select_victim(&nodes, 0.0, 180.0, 60.0, &loads, &r), Some(NodeId(8)));
    }

    #[test]
    fn victim_falls_back_to_smallest_when_none_fits() {
        let r = shape(48);
        let big = NodeResource::new(NodeId(7), "big", &shape(96), PoolKind::Elastic, NodeState::Up);
        let small = NodeResource::new(NodeId(8), "small", &shape(48), PoolKind::Elastic, NodeState::Up);
        let idle_big = BTreeMap::from([(NodeId(8), 5.0)]);
        // Underused = 0.5 node: nothing fits, smallest (n8) wins despite its load.
        assert_eq!(select_victim(&[&big, &small], 30.0, 60.0, 60.0, &idle_big, &r), Some(NodeId(8)));
        // Underused = 2 nodes: both fit, idle big node wins.
        assert_eq!(select_victim(&[&big, &small], 0.0, 120.0, 60.0, &idle_big, &r), Some(NodeId(7)));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ElasticityRow { t: 0.0, pw: 200.0, ic: 180.0, n_up: 3, n_provisioning: 0, n_running_tasks: 2 },
            ElasticityRow { t: 30.0, pw: 0.5, ic: 240.0, n_up: 3, n_provisioning: 1, n_running_tasks: 0 },
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,pw,ic,n_up,n_provisioning,n_running_tasks\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
        assert!(read_csv(&b"a,b\n"[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn pw_is_monotone_in_the_ready_set(
            tasks in proptest::collection::vec((0usize..3, 1u32..4), 0..20),
            extra in (0usize..3, 1u32..4),
        ) {
            let p = store(&[("a", 10.0), ("b", 35.0)], 60.0);
            let names = ["a", "b", "c"];
            let cs: Vec<TaskConstraints> = tasks.iter().map(|(_, n)| cons(*n, 1)).collect();
            let extra_c = cons(extra.1, 1);
            let r = shape(48);
            let base = estimate_parallel_workload(
                tasks.iter().zip(&cs).map(|((k, _), c)| (names[*k], c)), &p, &r, RequirementMode::WholeNodes);
            let more = estimate_parallel_workload(
                tasks.iter().zip(&cs).map(|((k, _), c)| (names[*k], c)).chain([(names[extra.0], &extra_c)]),
                &p, &r, RequirementMode::WholeNodes);
            prop_assert!(more >= base);
        }
    }
}
