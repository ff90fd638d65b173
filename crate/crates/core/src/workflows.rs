//! Workflow documents and the two built-in workflow generators.
//!
//! A workflow document is JSON:
//!
//! ```json
//! {
//!   "name": "demo",
//!   "params": { "n_mutations": 4 },
//!   "task_types": [
//!     { "name": "prep", "params": [ { "name": "out", "direction": "OUT" } ] }
//!   ],
//!   "steps": [
//!     { "task": "prep", "args": ["a.dat"] },
//!     { "generator": "md_setup", "params": { "n_mutations": 2 } }
//!   ]
//! }
//! ```
//!
//! Generator parameters are looked up in the step, then in the document
//! `params`, then fall back to the generator default.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::DefaultValue;
use crate::resources::{ConstraintTemplate, InfraConfig, ReliabilityTemplate};
use crate::taskgraph::{Direction, GraphError, ParamSpec, TaskGraph, TaskId, TaskType};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("step {index}: unknown generator `{name}`")]
    UnknownGenerator { index: usize, name: String },
    #[error("step {index}: unknown task type `{name}`")]
    UnknownType { index: usize, name: String },
    #[error("step {index}: task type `{name}` expects {expected} arguments, got {got}")]
    Arity { index: usize, name: String, expected: usize, got: usize },
    #[error("step {index}: output `{token}` is already produced by step {first}")]
    DuplicateOutput { index: usize, token: String, first: usize },
    #[error("step {index}: parameter `{name}` = {value} is out of range ({range})")]
    ParamRange { index: usize, name: String, value: u64, range: String },
    #[error("step {index}: must have either `task` and `args` or `generator`")]
    BadStep { index: usize },
    #[error("task type `{0}` declared twice with different definitions")]
    ConflictingType(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDefinition {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, u64>,
    #[serde(default)]
    pub task_types: Vec<TaskType>,
    pub steps: Vec<StepDef>,
}

/// One task registration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub task_type: String,
    pub args: Vec<String>,
}

impl Step {
    fn new(task_type: &str, args: &[&str]) -> Self {
        Self { task_type: task_type.to_string(), args: args.iter().map(|s| s.to_string()).collect() }
    }
}

/// Fully expanded workflow: declared types plus the ordered registrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub name: String,
    pub types: Vec<TaskType>,
    pub steps: Vec<Step>,
}

impl Workflow {
    fn empty(name: &str) -> Self {
        Self { name: name.to_string(), types: Vec::new(), steps: Vec::new() }
    }

    fn add_type(&mut self, ty: TaskType) -> Result<(), WorkflowError> {
        match self.types.iter().find(|t| t.name == ty.name) {
            Some(existing) if *existing == ty => Ok(()),
            Some(_) => Err(WorkflowError::ConflictingType(ty.name)),
            None => {
                self.types.push(ty);
                Ok(())
            }
        }
    }

    fn append(&mut self, other: Workflow) -> Result<(), WorkflowError> {
        for t in other.types {
            self.add_type(t)?;
        }
        self.steps.extend(other.steps);
        Ok(())
    }

    pub fn task_type(&self, name: &str) -> Option<&TaskType> {
        self.types.iter().find(|t| t.name == name)
    }

    /// Graph with all types declared and no tasks.
    pub fn empty_graph(&self) -> Result<TaskGraph, GraphError> {
        let mut g = TaskGraph::new();
        for t in &self.types {
            g.declare_type(t.clone())?;
        }
        Ok(g)
    }

    /// Registers every step in order.
    pub fn build_graph(&self, infra: &InfraConfig) -> Result<TaskGraph, GraphError> {
        let mut g = self.empty_graph()?;
        for s in &self.steps {
            g.register_task(&s.task_type, &s.args, infra)?;
        }
        Ok(g)
    }
}

fn schema_err(path: &Path, e: impl std::fmt::Display) -> WorkflowError {
    WorkflowError::Schema { path: path.display().to_string(), message: e.to_string() }
}

impl WorkflowDefinition {
    /// Parses and validates a document. Errors carry the JSON field path
    /// and line/column.
    pub fn from_json_str(text: &str) -> Result<Self, WorkflowError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let def: WorkflowDefinition = serde_path_to_error::deserialize(de).map_err(|e| WorkflowError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        def.expand()?;
        Ok(def)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow serializes")
    }

    pub fn from_workflow_params(name: &str, generator: &str, params: &[(&str, u64)]) -> Self {
        Self {
            name: name.to_string(),
            params: BTreeMap::new(),
            task_types: Vec::new(),
            steps: vec![StepDef {
                task: None,
                args: None,
                generator: Some(generator.to_string()),
                params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            }],
        }
    }

    /// Expands generators and checks types, arities and duplicate outputs.
    pub fn expand(&self) -> Result<Workflow, WorkflowError> {
        let mut wf = Workflow::empty(&self.name);
        for t in &self.task_types {
            t.validate()?;
            wf.add_type(t.clone())?;
        }
        // Pure OUT bindings per token, to detect two steps producing the same output.
        let mut producers: BTreeMap<String, usize> = BTreeMap::new();
        for (index, step) in self.steps.iter().enumerate() {
            match (&step.task, &step.args, &step.generator) {
                (Some(task), Some(args), None) if step.params.is_empty() => {
                    let ty = wf
                        .task_type(task)
                        .ok_or_else(|| WorkflowError::UnknownType { index, name: task.clone() })?;
                    if ty.params.len() != args.len() {
                        return Err(WorkflowError::Arity { index, name: task.clone(), expected: ty.params.len(), got: args.len() });
                    }
                    for (p, a) in ty.params.iter().zip(args) {
                        if p.direction == Direction::Out {
                            if let Some(first) = producers.insert(a.clone(), index) {
                                return Err(WorkflowError::DuplicateOutput { index, token: a.clone(), first });
                            }
                        }
                    }
                    wf.steps.push(Step { task_type: task.clone(), args: args.clone() });
                }
                (None, None, Some(generator)) => {
                    let param = |name: &str, default: u64| step.params.get(name).or(self.params.get(name)).copied().unwrap_or(default);
                    let generated = match generator.as_str() {
                        "md_setup" => {
                            let n = param("n_mutations", 1);
                            check_range(index, "n_mutations", n, 1, 100_000)?;
                            generate_md_setup(n as u32)
                        }
                        "binding_affinity" => {
                            let n = param("n_structures", 2);
                            check_range(index, "n_structures", n, 1, 100_000)?;
                            generate_binding_affinity(n as u32)
                        }
                        other => return Err(WorkflowError::UnknownGenerator { index, name: other.to_string() }),
                    };
                    wf.append(generated)?;
                }
                _ => return Err(WorkflowError::BadStep { index }),
            }
        }
        Ok(wf)
    }
}

fn check_range(index: usize, name: &str, value: u64, lo: u64, hi: u64) -> Result<(), WorkflowError> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(WorkflowError::ParamRange { index, name: name.into(), value, range: format!("{lo}..={hi}") })
    }
}

pub fn load_workflow(path: &Path) -> Result<WorkflowDefinition, WorkflowError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| WorkflowError::Io { path: path.display().to_string(), message: e.to_string() })?;
    WorkflowDefinition::from_json_str(&text).map_err(|e| match e {
        WorkflowError::Schema { path: field, message } => schema_err(path, format!("at `{field}`: {message}")),
        other => other,
    })
}

/// Overrides document-level parameters (`k=v` pairs from the command line).
pub fn apply_overrides(def: &mut WorkflowDefinition, overrides: &[(String, u64)]) {
    for (k, v) in overrides {
        def.params.insert(k.clone(), *v);
        for s in &mut def.steps {
            s.params.remove(k);
        }
    }
}

fn ty(name: &str, params: &[(&str, Direction)]) -> TaskType {
    TaskType::new(name, params.iter().map(|(n, d)| ParamSpec::new(n, *d)).collect())
}

use Direction::{In, InOut, Out};

/// Steps per mutation chain, ending in the constrained MD run.
pub const MD_CHAIN_STEPS: usize = 12;
/// Tasks before the fan-out.
pub const MD_PREFIX_STEPS: usize = 2;
/// The single multinode/GPU task type of each chain.
pub const MD_TYPE: &str = "mdrun_md";

fn md_setup_types() -> Vec<TaskType> {
    vec![
        ty("fetch_structure", &[("input", In), ("output", Out)]),
        ty("fix_structure", &[("input", In), ("output", Out)]),
        ty("mutate", &[("input", In), ("output", Out)]),
        ty("pdb2gmx", &[("input", In), ("gro", Out), ("top", Out)]),
        ty("editconf", &[("input", In), ("output", Out)]),
        ty("solvate", &[("input", In), ("top", InOut), ("output", Out)]),
        ty("grompp_genion", &[("input", In), ("top", In), ("tpr", Out)]),
        ty("genion", &[("tpr", In), ("top", InOut), ("output", Out)]),
        ty("grompp_min", &[("input", In), ("top", In), ("tpr", Out)]),
        ty("mdrun_min", &[("tpr", In), ("output", Out)]),
        ty("grompp_nvt", &[("input", In), ("top", In), ("tpr", Out)]),
        ty("mdrun_nvt", &[("tpr", In), ("output", Out)]),
        ty("grompp_md", &[("input", In), ("top", In), ("tpr", Out)]),
        ty(MD_TYPE, &[("tpr", In), ("trajectory", Out)]).with_constraints(ConstraintTemplate::multinode_from_env()),
    ]
}

/// Mutation MD setup: a two-step preparation of the wild type structure,
/// then one independent 12-step chain per mutation
/// (mutate, topology, box, solvation, ions, minimisation, NVT, MD run).
pub fn generate_md_setup(n_mutations: u32) -> Workflow {
    let mut wf = Workflow::empty("md_setup");
    wf.types = md_setup_types();
    wf.steps.push(Step::new("fetch_structure", &["input.pdb", "wt.pdb"]));
    wf.steps.push(Step::new("fix_structure", &["wt.pdb", "wt_fixed.pdb"]));
    for i in 0..n_mutations {
        let f = |s: &str| format!("mut{i}/{s}");
        let (pdb, gro, top, boxed, solv) = (f("mutated.pdb"), f("system.gro"), f("topology.top"), f("box.gro"), f("solvated.gro"));
        let (ions_tpr, ions, min_tpr, min, nvt_tpr, nvt, md_tpr, traj) = (
            f("ions.tpr"),
            f("ions.gro"),
            f("min.tpr"),
            f("min.gro"),
            f("nvt.tpr"),
            f("nvt.gro"),
            f("md.tpr"),
            f("md.xtc"),
        );
        wf.steps.extend([
            Step::new("mutate", &["wt_fixed.pdb", &pdb]),
            Step::new("pdb2gmx", &[&pdb, &gro, &top]),
            Step::new("editconf", &[&gro, &boxed]),
            Step::new("solvate", &[&boxed, &top, &solv]),
            Step::new("grompp_genion", &[&solv, &top, &ions_tpr]),
            Step::new("genion", &[&ions_tpr, &top, &ions]),
            Step::new("grompp_min", &[&ions, &top, &min_tpr]),
            Step::new("mdrun_min", &[&min_tpr, &min]),
            Step::new("grompp_nvt", &[&min, &top, &nvt_tpr]),
            Step::new("mdrun_nvt", &[&nvt_tpr, &nvt]),
            Step::new("grompp_md", &[&nvt, &top, &md_tpr]),
            Step::new(MD_TYPE, &[&md_tpr, &traj]),
        ]);
    }
    wf
}

pub const ENSEMBLES: [&str; 2] = ["forward", "reverse"];
/// Per-ensemble preparation, run once per ensemble.
pub const BA_INITIAL_TYPES: [&str; 2] = ["extract_frames", "gen_ensemble"];
/// Per-structure branch, in chain order.
pub const BA_BRANCH_TYPES: [&str; 5] = ["extract_structure", "mutate_structure", "gentop", "grompp_ti", "mdrun_ti"];
/// Sequential aggregation.
pub const BA_TAIL_TYPES: [&str; 3] = ["histogram_forward", "histogram_reverse", "delta_g"];
/// The long, failure-prone TI simulation of each branch.
pub const TI_TYPE: &str = "mdrun_ti";

fn ti_reliability() -> ReliabilityTemplate {
    let mut r = ReliabilityTemplate::ignore_with_env_timeout();
    r.default_outputs.insert("dhdl".into(), DefaultValue::EmptyFile);
    r
}

/// Binding affinity: per ensemble, frames are extracted and an ensemble of
/// structures generated; each of the 2n structures then runs an independent
/// five-step branch ending in a TI simulation; the forward and reverse
/// histograms and the final free energy are computed sequentially.
pub fn generate_binding_affinity(n_structures: u32) -> Workflow {
    let n = n_structures as usize;
    let mut wf = Workflow::empty("binding_affinity");
    let dhdl_params: Vec<(String, Direction)> = (0..n).map(|i| (format!("dhdl_{i}"), In)).collect();
    let hist = |name: &str, last: Direction| {
        let mut params: Vec<ParamSpec> = dhdl_params.iter().map(|(p, d)| ParamSpec::new(p, *d)).collect();
        params.push(ParamSpec::new("histograms", last));
        TaskType::new(name, params)
    };
    wf.types = vec![
        ty("extract_frames", &[("trajectory", In), ("frames", Out)]),
        ty("gen_ensemble", &[("frames", In), ("ensemble", Out)]),
        ty("extract_structure", &[("ensemble", In), ("structure", Out)]),
        ty("mutate_structure", &[("structure", In), ("hybrid", Out)]),
        ty("gentop", &[("hybrid", In), ("topology", Out)]),
        ty("grompp_ti", &[("topology", In), ("tpr", Out)]),
        ty(TI_TYPE, &[("tpr", In), ("dhdl", Out)])
            .with_constraints(ConstraintTemplate::multinode_from_env())
            .with_reliability(ti_reliability()),
        hist("histogram_forward", Out),
        hist("histogram_reverse", InOut),
        ty("delta_g", &[("histograms", In), ("result", Out)]),
    ];
    for e in ENSEMBLES {
        let (traj, frames, ens) = (format!("{e}/trajectory.xtc"), format!("{e}/frames.dat"), format!("{e}/ensemble.dat"));
        wf.steps.push(Step::new("extract_frames", &[&traj, &frames]));
        wf.steps.push(Step::new("gen_ensemble", &[&frames, &ens]));
    }
    for e in ENSEMBLES {
        let ens = format!("{e}/ensemble.dat");
        for i in 0..n {
            let f = |s: &str| format!("{e}/s{i}/{s}");
            let (s, h, t, tpr) = (f("structure.pdb"), f("hybrid.pdb"), f("topology.top"), f("ti.tpr"));
            wf.steps.extend([
                Step::new("extract_structure", &[&ens, &s]),
                Step::new("mutate_structure", &[&s, &h]),
                Step::new("gentop", &[&h, &t]),
                Step::new("grompp_ti", &[&t, &tpr]),
                Step::new(TI_TYPE, &[&tpr, &dhdl_token(e, i)]),
            ]);
        }
    }
    for (e, name) in ENSEMBLES.iter().zip(["histogram_forward", "histogram_reverse"]) {
        let mut args: Vec<String> = (0..n).map(|i| dhdl_token(e, i)).collect();
        args.push("histograms.dat".into());
        wf.steps.push(Step { task_type: name.into(), args });
    }
    wf.steps.push(Step::new("delta_g", &["histograms.dat", "delta_g.dat"]));
    wf
}

pub fn dhdl_token(ensemble: &str, i: usize) -> String {
    format!("{ensemble}/s{i}/dhdl.xvg")
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BaPhase {
    Initial,
    Branch,
    Tail,
}

pub fn ba_phase(type_name: &str) -> Option<BaPhase> {
    if BA_INITIAL_TYPES.contains(&type_name) {
        Some(BaPhase::Initial)
    } else if BA_BRANCH_TYPES.contains(&type_name) {
        Some(BaPhase::Branch)
    } else if BA_TAIL_TYPES.contains(&type_name) {
        Some(BaPhase::Tail)
    } else {
        None
    }
}

/// Task ids of a graph grouped by binding-affinity phase.
pub fn ba_phase_sets(g: &TaskGraph) -> BTreeMap<BaPhase, BTreeSet<TaskId>> {
    let mut m: BTreeMap<BaPhase, BTreeSet<TaskId>> = BTreeMap::new();
    for t in g.tasks() {
        if let Some(p) = ba_phase(t.type_name()) {
            m.entry(p).or_default().insert(t.id);
        }
    }
    m
}

/// Template environment with the variables the generators' constrained
/// types reference.
pub fn task_env(nodes: u32, cpus: u32, gpus: u32, timeout: f64) -> BTreeMap<String, String> {
    [
        ("TASK_NUM_NODES", nodes.to_string()),
        ("TASK_NUM_CPUS", cpus.to_string()),
        ("TASK_NUM_GPUS", gpus.to_string()),
        ("TASK_TIMEOUT", timeout.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
