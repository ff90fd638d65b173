//! Compute nodes, task constraints and the infrastructure configuration.
//!
//! Task types carry constraint and reliability *templates* whose numeric
//! fields may be `$NAME` placeholders. The placeholders are resolved only
//! against the `env` section of an [`InfraConfig`], so the same workflow
//! definition can be bound to different machines without edits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::reliability::{DefaultValue, FailurePolicy, ReliabilityPolicy};
use crate::sim::Distribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("placeholder `${0}` has no value in the infrastructure env")]
    MissingVariable(String),
    #[error("field `{field}`: `{value}` is not a valid number")]
    NotANumber { field: String, value: String },
    #[error("field `{0}`: computing units must be >= 1")]
    ZeroUnits(String),
    #[error("field `{0}`: value must be > 0")]
    NonPositive(String),
    #[error("processor type {0} listed more than once")]
    DuplicateProcessor(ProcessorType),
    #[error("allocation exceeds availability on node {0}")]
    OverAllocation(NodeId),
    #[error("node {0} is not UP")]
    NodeNotUp(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("lease {0} is not active (double release?)")]
    UnknownLease(u64),
    #[error("invalid infrastructure config: {0}")]
    InvalidConfig(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProcessorType {
    Cpu,
    Gpu,
}

impl fmt::Display for ProcessorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessorType::Cpu => f.write_str("CPU"),
            ProcessorType::Gpu => f.write_str("GPU"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub processor_type: ProcessorType,
    pub computing_units: u32,
}

/// Resolved per-task resource demand: `computing_nodes` nodes, each providing
/// the listed processor units.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskConstraints {
    computing_nodes: u32,
    processors: Vec<ProcessorSpec>,
}

impl TaskConstraints {
    pub fn new(computing_nodes: u32, processors: Vec<ProcessorSpec>) -> Result<Self, ResourceError> {
        if computing_nodes == 0 {
            return Err(ResourceError::ZeroUnits("computing_nodes".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &processors {
            if p.computing_units == 0 {
                return Err(ResourceError::ZeroUnits(format!("{} computingUnits", p.processor_type)));
            }
            if !seen.insert(p.processor_type) {
                return Err(ResourceError::DuplicateProcessor(p.processor_type));
            }
        }
        let mut processors = processors;
        processors.sort_by_key(|p| p.processor_type);
        Ok(Self { computing_nodes, processors })
    }

    /// One node, one CPU unit.
    pub fn single_cpu() -> Self {
        Self { computing_nodes: 1, processors: Vec::new() }
    }

    pub fn computing_nodes(&self) -> u32 {
        self.computing_nodes
    }

    pub fn processors(&self) -> &[ProcessorSpec] {
        &self.processors
    }

    fn units(&self, kind: ProcessorType) -> Option<u32> {
        self.processors.iter().find(|p| p.processor_type == kind).map(|p| p.computing_units)
    }

    /// CPU units per node. A task without a CPU entry still occupies one unit.
    pub fn cpu_units(&self) -> u32 {
        self.units(ProcessorType::Cpu).unwrap_or(1)
    }

    pub fn gpu_units(&self) -> u32 {
        self.units(ProcessorType::Gpu).unwrap_or(0)
    }

    /// Canonical text used for fingerprints.
    pub fn canonical(&self) -> String {
        format!("nodes={};cpu={};gpu={}", self.computing_nodes, self.cpu_units(), self.gpu_units())
    }
}

/// Raw template value: either a literal or a `$NAME` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct TemplateValue(pub String);

impl TemplateValue {
    pub fn literal(v: impl fmt::Display) -> Self {
        Self(v.to_string())
    }

    pub fn placeholder(name: &str) -> Self {
        Self(format!("${name}"))
    }

    /// Name of the referenced variable, if this is a placeholder.
    pub fn placeholder_name(&self) -> Option<&str> {
        let raw = self.0.trim();
        let rest = raw.strip_prefix('$')?;
        Some(rest.strip_prefix('{').and_then(|r| r.strip_suffix('}')).unwrap_or(rest))
    }

    pub fn resolve<'a>(&'a self, env: &'a BTreeMap<String, String>) -> Result<&'a str, ResourceError> {
        match self.placeholder_name() {
            Some(name) => env
                .get(name)
                .map(|v| v.trim())
                .ok_or_else(|| ResourceError::MissingVariable(name.to_string())),
            None => Ok(self.0.trim()),
        }
    }
}

impl<'de> Deserialize<'de> for TemplateValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(TemplateValue(de_scalar_string(d)?))
    }
}

/// Accepts a string, integer, float or bool and yields its text form.
fn de_scalar_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Scalar {
        Str(String),
        Int(i64),
        Float(f64),
        Bool(bool),
    }
    Ok(match Scalar::deserialize(d)? {
        Scalar::Str(s) => s,
        Scalar::Int(i) => i.to_string(),
        Scalar::Float(f) => f.to_string(),
        Scalar::Bool(b) => b.to_string(),
    })
}

fn de_env<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    #[derive(Deserialize)]
    struct V(#[serde(deserialize_with = "de_scalar_string")] String);
    let raw = BTreeMap::<String, V>::deserialize(d)?;
    Ok(raw.into_iter().map(|(k, v)| (k, v.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessorTemplate {
    #[serde(rename = "processorType")]
    pub processor_type: ProcessorType,
    #[serde(rename = "computingUnits")]
    pub computing_units: TemplateValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTemplate {
    #[serde(default = "one")]
    pub computing_nodes: TemplateValue,
    #[serde(default)]
    pub processors: Vec<ProcessorTemplate>,
}

fn one() -> TemplateValue {
    TemplateValue::literal(1)
}

impl Default for ConstraintTemplate {
    fn default() -> Self {
        Self { computing_nodes: one(), processors: Vec::new() }
    }
}

impl ConstraintTemplate {
    /// The multinode + constraint pair used by MD engine tasks.
    pub fn multinode_from_env() -> Self {
        Self {
            computing_nodes: TemplateValue::placeholder("TASK_NUM_NODES"),
            processors: vec![
                ProcessorTemplate {
                    processor_type: ProcessorType::Cpu,
                    computing_units: TemplateValue::placeholder("TASK_NUM_CPUS"),
                },
                ProcessorTemplate {
                    processor_type: ProcessorType::Gpu,
                    computing_units: TemplateValue::placeholder("TASK_NUM_GPUS"),
                },
            ],
        }
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        std::iter::once(&self.computing_nodes)
            .chain(self.processors.iter().map(|p| &p.computing_units))
            .filter_map(|v| v.placeholder_name())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ReliabilityTemplate {
    #[serde(default)]
    pub on_failure: FailurePolicy,
    #[serde(default)]
    pub max_retries: Option<TemplateValue>,
    #[serde(default)]
    pub time_out: Option<TemplateValue>,
    #[serde(default)]
    pub default_outputs: BTreeMap<String, DefaultValue>,
}

impl ReliabilityTemplate {
    /// `on_failure='IGNORE', time_out='$TASK_TIMEOUT'`
    pub fn ignore_with_env_timeout() -> Self {
        Self {
            on_failure: FailurePolicy::Ignore,
            max_retries: None,
            time_out: Some(TemplateValue::placeholder("TASK_TIMEOUT")),
            default_outputs: BTreeMap::new(),
        }
    }
}

fn parse_u32(field: &str, raw: &str) -> Result<u32, ResourceError> {
    let v: i64 = raw
        .parse()
        .map_err(|_| ResourceError::NotANumber { field: field.into(), value: raw.into() })?;
    if v <= 0 {
        return Err(ResourceError::ZeroUnits(field.into()));
    }
    u32::try_from(v).map_err(|_| ResourceError::NotANumber { field: field.into(), value: raw.into() })
}

pub fn resolve_constraints(
    template: &ConstraintTemplate,
    env: &BTreeMap<String, String>,
) -> Result<TaskConstraints, ResourceError> {
    let computing_nodes = parse_u32("computing_nodes", template.computing_nodes.resolve(env)?)?;
    let mut processors = Vec::new();
    for p in &template.processors {
        let raw = p.computing_units.resolve(env)?;
        let field = format!("{} computingUnits", p.processor_type);
        // A GPU entry bound to 0 means "no GPU on this machine" and is dropped.
        if p.processor_type == ProcessorType::Gpu && raw.parse::<i64>().ok() == Some(0) {
            continue;
        }
        processors.push(ProcessorSpec { processor_type: p.processor_type, computing_units: parse_u32(&field, raw)? });
    }
    TaskConstraints::new(computing_nodes, processors)
}

pub fn resolve_reliability(
    template: &ReliabilityTemplate,
    env: &BTreeMap<String, String>,
) -> Result<ReliabilityPolicy, ResourceError> {
    let max_retries = match (&template.max_retries, template.on_failure) {
        (Some(v), _) => {
            let raw = v.resolve(env)?;
            raw.parse::<u32>()
                .map_err(|_| ResourceError::NotANumber { field: "max_retries".into(), value: raw.into() })?
        }
        (None, FailurePolicy::Retry) => 1,
        (None, _) => 0,
    };
    if template.on_failure == FailurePolicy::Retry && max_retries == 0 {
        return Err(ResourceError::ZeroUnits("max_retries".into()));
    }
    let time_out = match &template.time_out {
        Some(v) => {
            let raw = v.resolve(env)?;
            let secs: f64 = raw
                .parse()
                .map_err(|_| ResourceError::NotANumber { field: "time_out".into(), value: raw.into() })?;
            if !(secs > 0.0) || !secs.is_finite() {
                return Err(ResourceError::NonPositive("time_out".into()));
            }
            Some(secs)
        }
        None => None,
    };
    Ok(ReliabilityPolicy {
        on_failure: template.on_failure,
        max_retries,
        time_out,
        default_outputs: template.default_outputs.clone(),
    })
}

/// Resolves both templates of a task type against the infrastructure env.
pub fn resolve_template(
    constraints: &ConstraintTemplate,
    reliability: &ReliabilityTemplate,
    env: &InfraConfig,
) -> Result<(TaskConstraints, ReliabilityPolicy), ResourceError> {
    Ok((resolve_constraints(constraints, &env.env)?, resolve_reliability(reliability, &env.env)?))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PoolKind {
    Static,
    Elastic,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeState {
    Provisioning,
    Up,
    Draining,
    Released,
}

/// Hardware shape of a node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShape {
    pub cpu_units: u32,
    #[serde(default)]
    pub gpu_units: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeResource {
    pub node_id: NodeId,
    pub name: String,
    pub cpu_units: u32,
    pub gpu_units: u32,
    pub pool: PoolKind,
    pub state: NodeState,
    pub free_cpu: u32,
    pub free_gpu: u32,
    gpu_busy: Vec<bool>,
    leases: BTreeSet<u64>,
}

impl NodeResource {
    pub fn new(node_id: NodeId, name: impl Into<String>, shape: &NodeShape, pool: PoolKind, state: NodeState) -> Self {
        Self {
            node_id,
            name: name.into(),
            cpu_units: shape.cpu_units,
            gpu_units: shape.gpu_units,
            pool,
            state,
            free_cpu: shape.cpu_units,
            free_gpu: shape.gpu_units,
            gpu_busy: vec![false; shape.gpu_units as usize],
            leases: BTreeSet::new(),
        }
    }

    pub fn shape(&self) -> NodeShape {
        NodeShape { cpu_units: self.cpu_units, gpu_units: self.gpu_units }
    }

    pub fn lease_count(&self) -> usize {
        self.leases.len()
    }

    pub fn lease_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.leases.iter().copied()
    }

    fn can_host(&self, cpu: u32, gpu: u32) -> bool {
        self.state == NodeState::Up && self.free_cpu >= cpu && self.free_gpu >= gpu
    }

    pub fn allocated_cpu(&self) -> u32 {
        self.cpu_units - self.free_cpu
    }

    pub fn allocated_gpu(&self) -> u32 {
        self.gpu_units - self.free_gpu
    }
}

/// Placement chosen by [`fits`]; not yet allocated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub node_ids: Vec<NodeId>,
    pub cpu_per_node: u32,
    pub gpu_per_node: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Lease {
    pub id: u64,
    pub node_ids: Vec<NodeId>,
    pub cpu_per_node: u32,
    pub gpu_per_node: u32,
    /// Device indices granted on each node, parallel to `node_ids`.
    pub gpu_indices: Vec<Vec<u32>>,
}

/// First-fit by node id: the first `computing_nodes` UP nodes that each have
/// enough free CPU and GPU units.
pub fn fits<'a>(nodes: impl IntoIterator<Item = &'a NodeResource>, c: &TaskConstraints) -> Option<Assignment> {
    let (cpu, gpu) = (c.cpu_units(), c.gpu_units());
    let mut candidates: Vec<&NodeResource> = nodes.into_iter().filter(|n| n.can_host(cpu, gpu)).collect();
    candidates.sort_by_key(|n| n.node_id);
    let wanted = c.computing_nodes() as usize;
    if candidates.len() < wanted {
        return None;
    }
    Some(Assignment {
        node_ids: candidates[..wanted].iter().map(|n| n.node_id).collect(),
        cpu_per_node: cpu,
        gpu_per_node: gpu,
    })
}

/// All nodes known to a run, plus the active leases on them.
#[derive(Clone, Debug, Default)]
pub struct ResourcePool {
    nodes: BTreeMap<NodeId, NodeResource>,
    leases: BTreeMap<u64, Lease>,
    next_lease: u64,
    next_node: u32,
}

impl ResourcePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: Option<String>, shape: &NodeShape, pool: PoolKind, state: NodeState) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        let name = name.unwrap_or_else(|| format!("node{}", id.0));
        self.nodes.insert(id, NodeResource::new(id, name, shape, pool, state));
        id
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeResource> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeResource> {
        self.nodes.values()
    }

    pub fn set_state(&mut self, id: NodeId, state: NodeState) -> Result<(), ResourceError> {
        self.nodes.get_mut(&id).ok_or(ResourceError::UnknownNode(id))?.state = state;
        Ok(())
    }

    pub fn rename(&mut self, id: NodeId, name: String) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.name = name;
        }
    }

    pub fn count(&self, pool: Option<PoolKind>, states: &[NodeState]) -> usize {
        self.nodes
            .values()
            .filter(|n| pool.map_or(true, |p| n.pool == p) && states.contains(&n.state))
            .count()
    }

    /// Whether any UP node has a free CPU unit.
    pub fn has_free_cpu(&self) -> bool {
        self.nodes.values().any(|n| n.state == NodeState::Up && n.free_cpu > 0)
    }

    pub fn fits(&self, c: &TaskConstraints) -> Option<Assignment> {
        fits(self.nodes.values(), c)
    }

    pub fn allocate(&mut self, a: &Assignment) -> Result<Lease, ResourceError> {
        for id in &a.node_ids {
            let n = self.nodes.get(id).ok_or(ResourceError::UnknownNode(*id))?;
            if n.state != NodeState::Up {
                return Err(ResourceError::NodeNotUp(*id));
            }
            if !n.can_host(a.cpu_per_node, a.gpu_per_node) {
                return Err(ResourceError::OverAllocation(*id));
            }
        }
        let lease_id = self.next_lease;
        self.next_lease += 1;
        let mut gpu_indices = Vec::with_capacity(a.node_ids.len());
        for id in &a.node_ids {
            let n = self.nodes.get_mut(id).expect("checked above");
            n.free_cpu -= a.cpu_per_node;
            n.free_gpu -= a.gpu_per_node;
            let mut granted = Vec::new();
            for (idx, busy) in n.gpu_busy.iter_mut().enumerate() {
                if granted.len() == a.gpu_per_node as usize {
                    break;
                }
                if !*busy {
                    *busy = true;
                    granted.push(idx as u32);
                }
            }
            n.leases.insert(lease_id);
            gpu_indices.push(granted);
        }
        let lease = Lease {
            id: lease_id,
            node_ids: a.node_ids.clone(),
            cpu_per_node: a.cpu_per_node,
            gpu_per_node: a.gpu_per_node,
            gpu_indices,
        };
        self.leases.insert(lease_id, lease.clone());
        Ok(lease)
    }

    pub fn release(&mut self, lease_id: u64) -> Result<Lease, ResourceError> {
        let lease = self.leases.remove(&lease_id).ok_or(ResourceError::UnknownLease(lease_id))?;
        for (id, gpus) in lease.node_ids.iter().zip(&lease.gpu_indices) {
            let n = self.nodes.get_mut(id).expect("leased node exists");
            n.free_cpu += lease.cpu_per_node;
            n.free_gpu += lease.gpu_per_node;
            for g in gpus {
                n.gpu_busy[*g as usize] = false;
            }
            n.leases.remove(&lease_id);
        }
        Ok(lease)
    }

    pub fn lease(&self, lease_id: u64) -> Option<&Lease> {
        self.leases.get(&lease_id)
    }

    pub fn active_leases(&self) -> impl Iterator<Item = &Lease> {
        self.leases.values()
    }

    /// Checks `allocated + free == capacity` on every node against the
    /// active leases. Returns the first violating node.
    pub fn conservation_violation(&self) -> Option<NodeId> {
        for n in self.nodes.values() {
            let (mut cpu, mut gpu) = (0u32, 0u32);
            for l in self.leases.values() {
                let k = l.node_ids.iter().filter(|id| **id == n.node_id).count() as u32;
                cpu += k * l.cpu_per_node;
                gpu += k * l.gpu_per_node;
            }
            if cpu + n.free_cpu != n.cpu_units || gpu + n.free_gpu != n.gpu_units {
                return Some(n.node_id);
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticNodeSpec {
    /// Host name prefix; nodes are named `<name><index>` when `count > 1`.
    #[serde(default)]
    pub name: Option<String>,
    pub cpu_units: u32,
    #[serde(default)]
    pub gpu_units: u32,
    #[serde(default = "one_u32")]
    pub count: u32,
}

fn one_u32() -> u32 {
    1
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementMode {
    /// Every ready task counts `computing_nodes` node-equivalents.
    #[default]
    WholeNodes,
    /// Tasks count the fraction of the reference node they occupy.
    Fractional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticityConfig {
    #[serde(default)]
    pub elastic_max: u32,
    /// Shape cloned for every elastic node.
    #[serde(default)]
    pub node: Option<NodeShape>,
    #[serde(default = "default_delay")]
    pub provision_delay: DelayModel,
    /// Seconds between two workload/capacity evaluations.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Provisioning time assumed before any node has been observed coming up.
    #[serde(default = "default_rt_prior")]
    pub rt_prior: f64,
    /// Mean execution time assumed for task types without profile data.
    #[serde(default = "default_mean_et")]
    pub default_mean_et: f64,
    /// Per task type cold-start mean execution time.
    #[serde(default)]
    pub mean_et_priors: BTreeMap<String, f64>,
    #[serde(default = "yes")]
    pub count_provisioning: bool,
    #[serde(default)]
    pub requirement: RequirementMode,
}

fn default_period() -> f64 {
    30.0
}
fn default_rt_prior() -> f64 {
    60.0
}
fn default_mean_et() -> f64 {
    60.0
}
fn yes() -> bool {
    true
}
fn default_delay() -> DelayModel {
    DelayModel { seconds: 60.0, distribution: Distribution::Constant }
}

impl Default for ElasticityConfig {
    fn default() -> Self {
        Self {
            elastic_max: 0,
            node: None,
            provision_delay: default_delay(),
            period: default_period(),
            rt_prior: default_rt_prior(),
            default_mean_et: default_mean_et(),
            mean_et_priors: BTreeMap::new(),
            count_provisioning: true,
            requirement: RequirementMode::default(),
        }
    }
}

/// Provisioning latency: `seconds` scaled by a sample of `distribution`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub seconds: f64,
    #[serde(default)]
    pub distribution: Distribution,
}

/// Infrastructure description: the `env` used to resolve task templates,
/// the static node pool and the elasticity settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default, deserialize_with = "de_env")]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub static_nodes: Vec<StaticNodeSpec>,
    #[serde(default)]
    pub elasticity: ElasticityConfig,
}

impl InfraConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ResourceError> {
        let de = toml::Deserializer::new(text);
        let cfg: InfraConfig =
            serde_path_to_error::deserialize(de).map_err(|e| ResourceError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ResourceError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ResourceError::InvalidConfig(m) => ResourceError::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("infra config serializes")
    }

    /// `n` identical static nodes and no elasticity.
    pub fn homogeneous(n: u32, shape: NodeShape, env: BTreeMap<String, String>) -> Self {
        Self {
            name: None,
            env,
            static_nodes: vec![StaticNodeSpec { name: None, cpu_units: shape.cpu_units, gpu_units: shape.gpu_units, count: n }],
            elasticity: ElasticityConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ResourceError> {
        for (i, n) in self.static_nodes.iter().enumerate() {
            if n.cpu_units == 0 {
                return Err(ResourceError::InvalidConfig(format!("static_nodes[{i}].cpu_units must be >= 1")));
            }
        }
        let e = &self.elasticity;
        if e.elastic_max > 0 && e.node.is_none() && self.static_nodes.is_empty() {
            return Err(ResourceError::InvalidConfig("elasticity.node is required when there are no static nodes".into()));
        }
        if let Some(n) = &e.node {
            if n.cpu_units == 0 {
                return Err(ResourceError::InvalidConfig("elasticity.node.cpu_units must be >= 1".into()));
            }
        }
        if !(e.period > 0.0) {
            return Err(ResourceError::InvalidConfig("elasticity.period must be > 0".into()));
        }
        if !(e.provision_delay.seconds >= 0.0) {
            return Err(ResourceError::InvalidConfig("elasticity.provision_delay.seconds must be >= 0".into()));
        }
        e.provision_delay
            .distribution
            .validate()
            .map_err(|m| ResourceError::InvalidConfig(format!("elasticity.provision_delay: {m}")))?;
        Ok(())
    }

    /// Expanded static node list as (name, shape).
    pub fn static_node_list(&self) -> Vec<(String, NodeShape)> {
        let mut out = Vec::new();
        for spec in &self.static_nodes {
            let shape = NodeShape { cpu_units: spec.cpu_units, gpu_units: spec.gpu_units };
            for k in 0..spec.count {
                let name = match (&spec.name, spec.count) {
                    (Some(n), 1) => n.clone(),
                    (Some(n), _) => format!("{n}{k}"),
                    (None, _) => format!("node{}", out.len()),
                };
                out.push((name, shape.clone()));
            }
        }
        out
    }

    pub fn static_node_count(&self) -> u32 {
        self.static_nodes.iter().map(|s| s.count).sum()
    }

    /// Shape of elastic nodes; also the capacity reference for workload estimates.
    pub fn reference_shape(&self) -> NodeShape {
        self.elasticity
            .node
            .clone()
            .or_else(|| self.static_nodes.first().map(|s| NodeShape { cpu_units: s.cpu_units, gpu_units: s.gpu_units }))
            .unwrap_or(NodeShape { cpu_units: 1, gpu_units: 0 })
    }
}
