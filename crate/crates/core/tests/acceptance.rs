//! Acceptance criteria for the engine, one PASS/FAIL line each.
//!
//! `cargo test -p elasflow-core --test acceptance` runs all of them; extra
//! arguments select criteria by substring (`-- AC-4`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use elasflow::elasticity::{estimate_infrastructure_capacity, estimate_parallel_workload, read_csv, ProfileStore};
use elasflow::engine::{audit_run, run_workflow, simulate, EngineOptions, RunStatus};
use elasflow::reliability::FailurePolicy;
use elasflow::resources::{
    DelayModel, ElasticityConfig, InfraConfig, NodeId, NodeResource, NodeShape, NodeState, PoolKind, ProcessorSpec,
    ProcessorType, ReliabilityTemplate, RequirementMode, ResourcePool, TaskConstraints, TemplateValue,
};
use elasflow::run::{execute, resume, BackendSpec, RunSpec, ELASTICITY_FILE, OUTPUTS_DIR, TRACE_FILE};
use elasflow::scheduler::TraceKind;
use elasflow::sim::{Distribution, DurationSpec, FaultSpec, Scenario, SimExecutor, SimRuntime};
use elasflow::slurm::{CommandOutput, CommandTemplates, ScriptedRunner, SlurmAdapter, SlurmConfig, SlurmProvider};
use elasflow::taskgraph::{max_antichain_width, Direction, ParamSpec, TaskGraph, TaskId, TaskState, TaskType};
use elasflow::workflows::{
    ba_phase_sets, generate_binding_affinity, generate_md_setup, task_env, BaPhase, Step, Workflow, MD_TYPE, TI_TYPE,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// MareNostrum-like node: 48 CPU cores, no GPU.
const NODE_CPUS: u32 = 48;

fn shape() -> NodeShape {
    NodeShape { cpu_units: NODE_CPUS, gpu_units: 0 }
}

/// Every multinode task takes one whole node.
fn infra(nodes: u32, timeout: f64) -> InfraConfig {
    let mut i = InfraConfig::homogeneous(nodes, shape(), task_env(1, NODE_CPUS, 0, timeout));
    // Evaluations only cost time here; keep them sparse.
    i.elasticity.period = 3600.0;
    i
}

fn scenario(default: f64, models: &[(&str, f64)]) -> Scenario {
    let mut s = Scenario::default();
    s.durations.default = DurationSpec::constant(default);
    for (k, v) in models {
        s.durations.models.insert(k.to_string(), DurationSpec::constant(*v));
    }
    s
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------

fn ac1_estimator_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let states = [NodeState::Provisioning, NodeState::Up, NodeState::Draining, NodeState::Released];
    let (mut max_pw, mut max_ic) = (0i64, 0i64);
    for case in 0..1000 {
        let ref_cpu = [1u32, 2, 4, 8, 16, 48][rng.gen_range(0..6)];
        let reference = NodeShape { cpu_units: ref_cpu, gpu_units: 0 };
        let mut cfg = ElasticityConfig { default_mean_et: rng.gen_range(1..500) as f64, ..ElasticityConfig::default() };
        // Oracle's view of each type's mean execution time.
        let n_types = rng.gen_range(1..6);
        let mut mean: Vec<i64> = Vec::new();
        let mut observed: Vec<Vec<i64>> = Vec::new();
        for t in 0..n_types {
            let m = rng.gen_range(1..2000i64);
            match rng.gen_range(0..3) {
                0 => {
                    cfg.mean_et_priors.insert(format!("t{t}"), m as f64);
                    observed.push(Vec::new());
                }
                1 => {
                    // Symmetric pairs keep the arithmetic mean an integer.
                    let mut xs = Vec::new();
                    for _ in 0..rng.gen_range(1..4) {
                        let d = rng.gen_range(0..m);
                        xs.extend([m - d, m + d]);
                    }
                    observed.push(xs);
                }
                _ => observed.push(Vec::new()),
            }
            let known = cfg.mean_et_priors.contains_key(&format!("t{t}")) || !observed[t].is_empty();
            mean.push(if known { m } else { cfg.default_mean_et as i64 });
        }
        let rt = rng.gen_range(1..400i64);
        let observe_rt = rng.gen_bool(0.5);
        if !observe_rt {
            cfg.rt_prior = rt as f64;
        }
        let mut profiles = ProfileStore::new(&cfg);
        for (t, xs) in observed.iter().enumerate() {
            for x in xs {
                profiles.record_execution(&format!("t{t}"), *x as f64);
            }
        }
        if observe_rt {
            let d = rng.gen_range(0..rt);
            profiles.record_provision((rt - d) as f64);
            profiles.record_provision((rt + d) as f64);
        }

        let mut tasks: Vec<(String, TaskConstraints)> = Vec::new();
        let mut pw_oracle = 0i64;
        for _ in 0..rng.gen_range(0..60) {
            let t = rng.gen_range(0..n_types);
            let nodes = rng.gen_range(1..5u32);
            let cpu = rng.gen_range(1..=ref_cpu);
            let c = TaskConstraints::new(nodes, vec![ProcessorSpec { processor_type: ProcessorType::Cpu, computing_units: cpu }])
                .map_err(|e| e.to_string())?;
            pw_oracle += nodes as i64 * mean[t];
            tasks.push((format!("t{t}"), c));
        }
        let count_provisioning = rng.gen_bool(0.5);
        let mut nodes = Vec::new();
        let mut ic_oracle = 0i64;
        for i in 0..rng.gen_range(0..40u32) {
            let k = rng.gen_range(1..5u32);
            let st = states[rng.gen_range(0..4)];
            let pool = if rng.gen_bool(0.5) { PoolKind::Static } else { PoolKind::Elastic };
            let counted = st == NodeState::Up || (st == NodeState::Provisioning && count_provisioning);
            if counted {
                ic_oracle += k as i64 * rt;
            }
            nodes.push(NodeResource::new(NodeId(i), format!("n{i}"), &NodeShape { cpu_units: k * ref_cpu, gpu_units: 0 }, pool, st));
        }
        let pw = estimate_parallel_workload(
            tasks.iter().map(|(t, c)| (t.as_str(), c)),
            &profiles,
            &reference,
            RequirementMode::WholeNodes,
        );
        let ic = estimate_infrastructure_capacity(nodes.iter(), &profiles, &reference, count_provisioning);
        ensure!(pw == pw_oracle as f64, "case {case}: PW {pw} != oracle {pw_oracle}");
        ensure!(ic == ic_oracle as f64, "case {case}: IC {ic} != oracle {ic_oracle}");
        max_pw = max_pw.max(pw_oracle);
        max_ic = max_ic.max(ic_oracle);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "1000 cases took {secs:.2}s");
    Ok(format!("1000/1000 exact (max PW {max_pw}, max IC {max_ic} node-s) in {secs:.3}s"))
}

// ---------------------------------------------------------------------------

fn ac2_graph_shape() -> Outcome {
    let g = generate_binding_affinity(2).build_graph(&infra(1, 1e6)).map_err(|e| e.to_string())?;
    let phases = ba_phase_sets(&g);
    let w = |p: BaPhase| max_antichain_width(&g, Some(&phases[&p]));
    let (wi, wm, wt) = (w(BaPhase::Initial), w(BaPhase::Branch), w(BaPhase::Tail));
    ensure!(wi == 2, "initial width {wi} != 2");
    ensure!(wm == 4, "middle width {wm} != 4");
    ensure!(wt == 1, "tail width {wt} != 1");
    // Weakly connected components of the middle phase are the sub-workflows.
    let middle = &phases[&BaPhase::Branch];
    let mut comp: BTreeMap<TaskId, TaskId> = middle.iter().map(|t| (*t, *t)).collect();
    fn find(c: &mut BTreeMap<TaskId, TaskId>, x: TaskId) -> TaskId {
        let p = c[&x];
        if p == x {
            return x;
        }
        let r = find(c, p);
        c.insert(x, r);
        r
    }
    for (a, b) in g.edges() {
        if middle.contains(&a) && middle.contains(&b) {
            let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
            comp.insert(ra, rb);
        }
    }
    let roots: BTreeSet<TaskId> = middle.iter().map(|t| find(&mut comp, *t)).collect();
    ensure!(roots.len() == 4, "{} middle sub-workflows, expected 4", roots.len());
    ensure!(max_antichain_width(&g, None) >= 4, "overall width below middle width");
    Ok(format!("widths initial={wi} middle={wm} tail={wt}; 4 independent sub-workflows"))
}

// ---------------------------------------------------------------------------

fn ti_task(g: &TaskGraph, token: &str) -> TaskId {
    g.tasks()
        .find(|t| t.type_name() == TI_TYPE && t.outputs().any(|b| b.token == token))
        .map(|t| t.id)
        .expect("TI task exists")
}

fn ac3_failure_tolerance() -> Outcome {
    let wf = generate_binding_affinity(10);
    let inf = infra(4, 1e6);
    let g = wf.build_graph(&inf).map_err(|e| e.to_string())?;
    let failed: BTreeSet<String> = ["forward/s1/dhdl.xvg", "forward/s7/dhdl.xvg", "reverse/s4/dhdl.xvg"].map(String::from).into();
    let mut sc = scenario(10.0, &[(TI_TYPE, 500.0)]);
    for tok in &failed {
        sc.faults.inject.push(FaultSpec::fail_ordinal(ti_task(&g, tok).0));
    }
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = execute(base.path(), &RunSpec::new(wf, inf, BackendSpec::Sim { scenario: sc }), None).map_err(|e| e.to_string())?;
    let s = &out.result.summary;
    ensure!(s.exit_code == 0, "exit code {}", s.exit_code);
    ensure!(s.ignored_failures == 3, "{} ignored failures", s.ignored_failures);
    ensure!(s.task_counts["IGNORED_FAILED"] == 3, "IGNORED_FAILED count {}", s.task_counts["IGNORED_FAILED"]);
    ensure!(s.task_counts["DONE"] == out.result.graph.len() - 3, "not every other task is DONE");
    let files = read_tree(&out.dir.join(OUTPUTS_DIR));
    let empty: BTreeSet<String> =
        files.iter().filter(|(_, b)| b.is_empty()).map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    ensure!(empty == failed, "zero-byte outputs {empty:?} != failed branches {failed:?}");
    let dhdl = files.keys().filter(|p| p.ends_with("dhdl.xvg")).count();
    ensure!(dhdl == 20, "{dhdl} dhdl outputs, expected 20");
    Ok(format!("exit 0, 3 IGNORED_FAILED, zero-byte dhdl exactly for {failed:?}"))
}

// ---------------------------------------------------------------------------

fn ac4_restart_idempotence() -> Outcome {
    let started = Instant::now();
    let spec = RunSpec::new(generate_binding_affinity(4), infra(2, 1e6), BackendSpec::Sim { scenario: scenario(10.0, &[(TI_TYPE, 100.0)]) });
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = execute(base.path(), &spec, None).map_err(|e| e.to_string())?;
    ensure!(full.result.summary.status == RunStatus::Completed, "uninterrupted run did not complete");
    let reference = read_tree(&full.dir.join(OUTPUTS_DIR));
    let total = full.result.graph.len();
    let boundaries = full.result.summary.messages_handled;
    for k in 0..=boundaries {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let stopped = execute(dir.path(), &spec, Some(k)).map_err(|e| e.to_string())?;
        let done_before = stopped.result.summary.task_counts["DONE"];
        let last = if stopped.result.summary.status == RunStatus::Checkpointed {
            ensure!(stopped.result.summary.exit_code == 3, "k={k}: stopped run exit {}", stopped.result.summary.exit_code);
            let resumed = resume(&stopped.dir, None).map_err(|e| e.to_string())?;
            let s = &resumed.result.summary;
            ensure!(s.status == RunStatus::Completed, "k={k}: resume ended {:?}", s.status);
            ensure!(
                s.executed_tasks == total - done_before,
                "k={k}: executed {} on resume, expected {total} - {done_before}",
                s.executed_tasks
            );
            ensure!(s.skipped == done_before, "k={k}: skipped {} != {done_before}", s.skipped);
            resumed
        } else {
            ensure!(k == boundaries, "k={k}: run completed before its stop point");
            stopped
        };
        ensure!(read_tree(&last.dir.join(OUTPUTS_DIR)) == reference, "k={k}: outputs differ from the uninterrupted run");
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "sweep took {secs:.1}s");
    Ok(format!("{} stop points over {total} tasks, outputs byte-identical, in {secs:.1}s", boundaries + 1))
}

// ---------------------------------------------------------------------------

fn ac5_malleability() -> Outcome {
    let n_mutations = 16;
    let mut inf = InfraConfig::homogeneous(6, shape(), task_env(1, NODE_CPUS, 0, 1e6));
    inf.elasticity = ElasticityConfig {
        elastic_max: 7,
        node: Some(shape()),
        provision_delay: DelayModel { seconds: 60.0, distribution: Distribution::Constant },
        period: 30.0,
        rt_prior: 60.0,
        default_mean_et: 10.0,
        mean_et_priors: [(MD_TYPE.to_string(), 3000.0)].into(),
        ..ElasticityConfig::default()
    };
    let sc = scenario(10.0, &[(MD_TYPE, 3000.0)]);
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = RunSpec::new(generate_md_setup(n_mutations), inf.clone(), BackendSpec::Sim { scenario: sc });
    let out = execute(base.path(), &spec, None).map_err(|e| e.to_string())?;
    ensure!(out.result.summary.exit_code == 0, "exit {}", out.result.summary.exit_code);
    audit_run(&out.result, &inf)?;
    let rows = read_csv(std::io::BufReader::new(fs::File::open(out.dir.join(ELASTICITY_FILE)).unwrap())).map_err(|e| e.to_string())?;
    let first_md = out
        .result
        .trace
        .of_kind(TraceKind::Start)
        .filter(|e| out.result.graph.task(e.task_id.unwrap()).unwrap().type_name() == MD_TYPE)
        .map(|e| e.t)
        .fold(f64::INFINITY, f64::min);
    let makespan = out.result.summary.makespan;
    let setup: Vec<_> = rows.iter().filter(|r| r.t < first_md).collect();
    ensure!(!setup.is_empty(), "no evaluation during setup");
    ensure!(setup.iter().all(|r| r.n_up == 6 && r.n_provisioning == 0), "resources changed during setup");
    let peak = rows.iter().map(|r| r.n_up).max().unwrap();
    ensure!(peak > 6, "never grew above 6 nodes");
    ensure!(rows.iter().all(|r| r.n_up + r.n_provisioning <= 13), "exceeded 13 nodes");
    ensure!(rows.iter().all(|r| r.n_up >= 6), "dropped below 6 nodes");
    let peak_t = rows.iter().find(|r| r.n_up == peak).unwrap().t;
    let back = rows.iter().find(|r| r.t > peak_t && r.n_up == 6 && r.n_provisioning == 0).map(|r| r.t);
    ensure!(back.is_some_and(|t| t < makespan), "did not return to 6 nodes before completion");
    Ok(format!(
        "6 nodes until t={first_md:.0}, peak {peak} nodes at t={peak_t:.0}, back to 6 at t={:.0}, makespan {makespan:.0}",
        back.unwrap()
    ))
}

// ---------------------------------------------------------------------------

const SMALL: f64 = 10.0;
const TI: f64 = 1000.0;

/// Makespan of binding_affinity(n) on `nodes` whole-node slots.
fn ba_makespan(n: u32, nodes: u32, latency: f64) -> Result<f64, String> {
    let mut sc = scenario(SMALL, &[(TI_TYPE, TI)]);
    sc.dispatch_latency = latency;
    let r = simulate(&generate_binding_affinity(n), &infra(nodes, 1e9), &sc, EngineOptions::default()).map_err(|e| e.to_string())?;
    ensure!(r.summary.exit_code == 0, "BA({n}) on {nodes} nodes: exit {}", r.summary.exit_code);
    Ok(r.summary.makespan)
}

fn ac6_strong_scaling() -> Outcome {
    let started = Instant::now();
    let n = 512;
    let branches = 2 * n;
    // Amdahl oracle from the duration model: the initial chain and the tail
    // are serial; the branch phase is perfectly divisible work.
    let serial = 2.0 * SMALL + 3.0 * SMALL;
    let parallel = branches as f64 * TI + branches as f64 * 4.0 * SMALL / NODE_CPUS as f64;
    let t1 = ba_makespan(n, 1, 0.0)?;
    let mut lines = Vec::new();
    for nodes in [1u32, 2, 4, 8, 16, 32, 64] {
        let t = ba_makespan(n, nodes, 0.0)?;
        let speedup = t1 / t;
        let bound = t1 / (serial + parallel / nodes as f64);
        ensure!(speedup <= bound * (1.0 + 1e-9), "{nodes} nodes: speedup {speedup:.2} above the Amdahl bound {bound:.2}");
        if nodes <= branches / 8 {
            ensure!(speedup >= 0.9 * nodes as f64, "{nodes} nodes: speedup {speedup:.2} below 90% of ideal");
        }
        lines.push(format!("{nodes}:{speedup:.1}/{bound:.1}"));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(format!("speedup/Amdahl bound per node count {} in {secs:.1}s", lines.join(" ")))
}

// ---------------------------------------------------------------------------

/// Makespan without dispatch overhead: the initial chain, four prep stages
/// over `per_node` branches sharing 48 cores, `per_node` TI runs back to
/// back, and the serial tail.
fn weak_compute(per_node: u32) -> f64 {
    2.0 * SMALL + 4.0 * SMALL * (per_node as f64 / NODE_CPUS as f64).ceil() + per_node as f64 * TI + 3.0 * SMALL
}

/// Configured-model prediction of the weak-scaling makespan. One dispatcher
/// serves submissions in FIFO order. Prep tasks need one core each, so every
/// branch's prep stage is submitted as soon as it is ready and queues ahead of
/// the TI wave; that latency is paid serially. TI dispatches overlap TI
/// execution while `nodes * L` stays below one TI run.
fn weak_prediction(nodes: u32, per_node: u32, latency: f64) -> f64 {
    let branches = (per_node * nodes) as f64;
    let serial_tasks = 4.0 + 4.0 * branches + 3.0;
    weak_compute(per_node) + serial_tasks * latency
}

fn ac7_weak_scaling() -> Outcome {
    let started = Instant::now();
    let per_node = 64;
    // Latency chosen so the model predicts 80% efficiency at 64 nodes.
    let c = weak_compute(per_node);
    let serial = |n: u32| 7.0 + 4.0 * (per_node * n) as f64;
    let latency = 0.2 * c / (0.8 * serial(64) - serial(1));
    ensure!(64.0 * latency < TI, "TI dispatch no longer overlaps execution");
    let t1 = ba_makespan(per_node / 2, 1, latency)?;
    let p1 = weak_prediction(1, per_node, latency);
    let mut lines = Vec::new();
    let mut last = 0.0;
    for nodes in [1u32, 2, 4, 8, 16, 32, 64] {
        let t = ba_makespan(per_node * nodes / 2, nodes, latency)?;
        let eff = t1 / t;
        let pred = p1 / weak_prediction(nodes, per_node, latency);
        ensure!((eff - pred).abs() <= 0.10, "{nodes} nodes: efficiency {eff:.3} vs predicted {pred:.3}");
        lines.push(format!("{nodes}:{:.1}%/{:.1}%", eff * 100.0, pred * 100.0));
        last = eff;
    }
    ensure!(last >= 0.75, "efficiency {last:.3} at 64 nodes below 75%");
    Ok(format!(
        "latency {latency:.3}s; efficiency sim/model {} in {:.1}s",
        lines.join(" "),
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn hang_case(policy: FailurePolicy) -> Result<(f64, Vec<f64>, elasflow::engine::RunResult), String> {
    let rel = ReliabilityTemplate {
        on_failure: policy,
        max_retries: Some(TemplateValue::literal(1)),
        time_out: Some(TemplateValue::literal(300)),
        ..Default::default()
    };
    let wf = Workflow {
        name: "hang".into(),
        types: vec![
            TaskType::new("prep", vec![ParamSpec::new("o", Direction::Out)]),
            TaskType::new("sim", vec![ParamSpec::new("i", Direction::In), ParamSpec::new("o", Direction::Out)]).with_reliability(rel),
            TaskType::new("post", vec![ParamSpec::new("i", Direction::In), ParamSpec::new("o", Direction::Out)]),
        ],
        steps: vec![
            Step { task_type: "prep".into(), args: vec!["a".into()] },
            Step { task_type: "sim".into(), args: vec!["a".into(), "b".into()] },
            Step { task_type: "post".into(), args: vec!["b".into(), "c".into()] },
        ],
    };
    let mut sc = scenario(37.5, &[]);
    sc.faults.inject.push(FaultSpec::hang_ordinal(1));
    let inf = infra(1, 1e6);
    let r = simulate(&wf, &inf, &sc, EngineOptions::default()).map_err(|e| e.to_string())?;
    audit_run(&r, &inf)?;
    let start = r.trace.of_kind(TraceKind::Start).find(|e| e.task_id == Some(TaskId(1))).map(|e| e.t).ok_or("sim never started")?;
    let timeouts = r.trace.of_kind(TraceKind::Timeout).map(|e| e.t).collect();
    Ok((start, timeouts, r))
}

fn ac8_timeout() -> Outcome {
    let (start, to, r) = hang_case(FailurePolicy::Ignore)?;
    ensure!(to == vec![start + 300.0], "IGNORE: timeouts at {to:?}, expected [{}]", start + 300.0);
    ensure!(r.graph.state(TaskId(1)) == Some(TaskState::IgnoredFailed), "IGNORE: task not IGNORED_FAILED");
    ensure!(r.summary.exit_code == 0 && r.graph.state(TaskId(2)) == Some(TaskState::Done), "IGNORE: successor did not run");

    let (start, to, r) = hang_case(FailurePolicy::Fail)?;
    ensure!(to == vec![start + 300.0], "FAIL: timeouts at {to:?}");
    ensure!(r.summary.exit_code == 1 && r.graph.state(TaskId(2)) == Some(TaskState::Cancelled), "FAIL: successor not cancelled");

    let (start, to, r) = hang_case(FailurePolicy::Retry)?;
    let second = r.trace.of_kind(TraceKind::Start).filter(|e| e.task_id == Some(TaskId(1))).nth(1).map(|e| e.t).ok_or("no retry")?;
    ensure!(to == vec![start + 300.0, second + 300.0], "RETRY: timeouts at {to:?}");
    ensure!(r.graph.state(TaskId(1)) == Some(TaskState::Failed), "RETRY: not FAILED after retries");
    Ok(format!("TIMEOUT exactly at start+300 (t={}); IGNORE/FAIL/RETRY handled", start + 300.0))
}

// ---------------------------------------------------------------------------

fn argv(s: &[&str]) -> Vec<String> {
    s.iter().map(|x| x.to_string()).collect()
}

fn slurm_cfg() -> SlurmConfig {
    SlurmConfig {
        main_job_id: "4242".into(),
        qos: "bsc_cs".into(),
        main_nodes: 1,
        worker_launcher: "/apps/elasflow/worker.sh".into(),
        poll_interval: 5.0,
        ready_dir: None,
        templates: None,
    }
}

fn golden() -> Vec<Vec<String>> {
    vec![
        argv(&["sbatch", "--dependency=expand:4242", "--qos=bsc_cs", "-N", "1", "/apps/elasflow/worker.sh"]),
        argv(&["squeue", "-j", "4243", "-h", "-o", "%T %N"]),
        argv(&["squeue", "-j", "4243", "-h", "-o", "%T %N"]),
        argv(&["scontrol", "update", "job", "4242", "NumNodes=2"]),
        argv(&["scancel", "4243"]),
        argv(&["scontrol", "update", "job", "4242", "NumNodes=1"]),
    ]
}

fn scripted() -> ScriptedRunner {
    let r = ScriptedRunner::new();
    r.push("sbatch", CommandOutput::ok("Submitted batch job 4243\n"));
    r.push("squeue", CommandOutput::ok("PENDING \n"));
    r.push("squeue", CommandOutput::ok("RUNNING s01r1b17\n"));
    r
}

fn ac9_slurm_golden() -> Outcome {
    // Protocol level.
    let r = scripted();
    let mut a = SlurmAdapter::new(&slurm_cfg(), CommandTemplates::default(), Box::new(r.clone()));
    let job = a.expand(1).map_err(|e| e.to_string())?;
    a.poll(&job.job_id).map_err(|e| e.to_string())?;
    let (_, nodes) = a.poll(&job.job_id).map_err(|e| e.to_string())?;
    ensure!(nodes == vec!["s01r1b17".to_string()], "hostlist {nodes:?}");
    a.attach(&job.job_id).map_err(|e| e.to_string())?;
    a.shrink(&job.job_id, true).map_err(|e| e.to_string())?;
    ensure!(r.argv_log() == golden(), "adapter argv log {:?}", r.argv_log());

    // Driven by the orchestrator: one elastic node requested, used, drained.
    let r = scripted();
    let mut provider = SlurmProvider::new(&slurm_cfg(), Box::new(r.clone())).map_err(|e| e.to_string())?;
    let mut inf = InfraConfig::homogeneous(1, NodeShape { cpu_units: 1, gpu_units: 0 }, BTreeMap::new());
    inf.elasticity = ElasticityConfig { elastic_max: 1, period: 10.0, rt_prior: 10.0, default_mean_et: 100.0, ..ElasticityConfig::default() };
    let wf = Workflow {
        name: "fan".into(),
        types: vec![TaskType::new("leaf", vec![ParamSpec::new("o", Direction::Out)])],
        steps: (0..4).map(|i| Step { task_type: "leaf".into(), args: vec![format!("o{i}")] }).collect(),
    };
    let mut rt = SimRuntime::new();
    let mut exec = SimExecutor::new(&scenario(100.0, &[]));
    let res = run_workflow(&wf, &inf, &mut rt, &mut exec, &mut provider, EngineOptions::default()).map_err(|e| e.to_string())?;
    ensure!(res.summary.exit_code == 0, "engine run exit {}", res.summary.exit_code);
    audit_run(&res, &inf)?;
    ensure!(res.summary.max_nodes_up == 2, "elastic node never came up");
    ensure!(r.argv_log() == golden(), "engine-driven argv log {:?}", r.argv_log());
    Ok(format!("{} commands token-identical at protocol and orchestrator level", golden().len()))
}

// ---------------------------------------------------------------------------

fn determinism_spec(seed: u64) -> RunSpec {
    let mut inf = InfraConfig::homogeneous(2, shape(), task_env(1, NODE_CPUS, 0, 900.0));
    inf.elasticity = ElasticityConfig {
        elastic_max: 3,
        node: Some(shape()),
        provision_delay: DelayModel { seconds: 45.0, distribution: Distribution::Uniform { lo: 0.5, hi: 1.5 } },
        period: 30.0,
        ..ElasticityConfig::default()
    };
    let mut sc = scenario(20.0, &[]);
    sc.seed = seed;
    sc.dispatch_latency = 0.05;
    sc.durations.default.distribution = Distribution::LogNormal { mu: 0.0, sigma: 0.3 };
    sc.durations.models.insert(TI_TYPE.into(), DurationSpec { distribution: Distribution::Uniform { lo: 0.5, hi: 2.0 }, ..DurationSpec::constant(400.0) });
    sc.faults.inject.push(FaultSpec::fail_ordinal(8));
    sc.faults.inject.push(FaultSpec::hang_ordinal(13));
    RunSpec::new(generate_binding_affinity(6), inf, BackendSpec::Sim { scenario: sc })
}

fn ac10_determinism() -> Outcome {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = execute(base.path(), &determinism_spec(11), None).map_err(|e| e.to_string())?;
    let b = execute(base.path(), &determinism_spec(11), None).map_err(|e| e.to_string())?;
    let c = execute(base.path(), &determinism_spec(12), None).map_err(|e| e.to_string())?;
    let read = |d: &Path| fs::read(d.join(TRACE_FILE)).unwrap();
    let (ta, tb, tc) = (read(&a.dir), read(&b.dir), read(&c.dir));
    ensure!(ta == tb, "traces differ between identical runs");
    ensure!(ta != tc, "a different seed produced the same trace");
    ensure!(a.result.summary.timeouts == 1 && a.result.summary.scale_up_requests > 0, "scenario did not exercise faults and elasticity");
    Ok(format!("trace.jsonl byte-identical ({} bytes, {} events)", ta.len(), a.result.trace.len()))
}

// ---------------------------------------------------------------------------

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

/// Tasks over a small token pool with random directions.
fn arb_registrations() -> impl Strategy<Value = Vec<Vec<(u8, u8)>>> {
    proptest::collection::vec(proptest::collection::vec((0u8..6, 0u8..3), 1..4), 1..25)
}

fn prop_dag(regs: Vec<Vec<(u8, u8)>>, order_seed: u64) -> Result<(), TestCaseError> {
    let mut g = TaskGraph::new();
    let inf = InfraConfig::homogeneous(1, shape(), BTreeMap::new());
    for (i, params) in regs.iter().enumerate() {
        // Distinct tokens per task: one parameter per token.
        let mut seen = BTreeSet::new();
        let params: Vec<_> = params.iter().filter(|(tok, _)| seen.insert(*tok)).collect();
        let specs: Vec<ParamSpec> = params
            .iter()
            .enumerate()
            .map(|(k, (_, d))| ParamSpec::new(&format!("p{k}"), [Direction::In, Direction::Out, Direction::InOut][*d as usize]))
            .collect();
        g.declare_type(TaskType::new(&format!("t{i}"), specs)).unwrap();
        let args: Vec<String> = params.iter().map(|(tok, _)| format!("d{tok}")).collect();
        g.register_task(&format!("t{i}"), &args, &inf).unwrap();
    }
    prop_assert!(g.topological_order().is_some());
    prop_assert!(g.edges().all(|(a, b)| a < b));
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    loop {
        // Readiness oracle: CREATED/READY tasks whose predecessors are all terminal.
        let oracle: BTreeSet<TaskId> = g
            .tasks()
            .filter(|t| matches!(t.state, TaskState::Created | TaskState::Ready))
            .filter(|t| t.predecessors.iter().all(|p| g.state(*p).unwrap().releases_successors()))
            .map(|t| t.id)
            .collect();
        prop_assert_eq!(g.ready_tasks(), oracle.clone());
        if oracle.is_empty() {
            break;
        }
        let pick: Vec<_> = oracle.into_iter().collect();
        let id = pick[rng.gen_range(0..pick.len())];
        g.mark_scheduled(id).unwrap();
        g.mark_running(id).unwrap();
        g.complete_task(id, TaskState::Done).unwrap();
    }
    prop_assert!(g.is_finished());
    Ok(())
}

fn prop_conservation(ops: Vec<(bool, u8, u8, u8)>) -> Result<(), TestCaseError> {
    let mut pool = ResourcePool::new();
    for k in 0..4 {
        pool.add_node(None, &NodeShape { cpu_units: 8, gpu_units: 2 * (k % 2) }, PoolKind::Static, NodeState::Up);
    }
    let mut leases: Vec<u64> = Vec::new();
    for (alloc, nodes, cpu, gpu) in ops {
        if alloc || leases.is_empty() {
            let mut procs = vec![ProcessorSpec { processor_type: ProcessorType::Cpu, computing_units: 1 + cpu as u32 % 8 }];
            if gpu % 3 == 0 {
                procs.push(ProcessorSpec { processor_type: ProcessorType::Gpu, computing_units: 1 + gpu as u32 % 2 });
            }
            let c = TaskConstraints::new(1 + nodes as u32 % 3, procs).unwrap();
            if let Some(a) = pool.fits(&c) {
                leases.push(pool.allocate(&a).unwrap().id);
            }
        } else {
            let l = leases.remove(nodes as usize % leases.len());
            pool.release(l).unwrap();
        }
        prop_assert_eq!(pool.conservation_violation(), None);
        for n in pool.nodes() {
            prop_assert!(n.free_cpu <= n.cpu_units && n.free_gpu <= n.gpu_units);
        }
    }
    for l in leases {
        pool.release(l).unwrap();
    }
    prop_assert!(pool.nodes().all(|n| n.free_cpu == n.cpu_units && n.free_gpu == n.gpu_units && n.lease_count() == 0));
    Ok(())
}

#[derive(Debug, Clone)]
struct EngineCase {
    widths: Vec<u8>,
    cpus: Vec<u8>,
    statics: u32,
    elastic_max: u32,
    seed: u64,
    period: u8,
}

fn arb_engine_case() -> impl Strategy<Value = EngineCase> {
    (
        proptest::collection::vec(1u8..8, 1..5),
        proptest::collection::vec(1u8..5, 4),
        1u32..3,
        1u32..4,
        any::<u64>(),
        5u8..40,
    )
        .prop_map(|(widths, cpus, statics, elastic_max, seed, period)| EngineCase { widths, cpus, statics, elastic_max, seed, period })
}

/// Layers of independent tasks, each layer reading all outputs of the
/// previous one: alternating bursts of work that make the pool grow and shrink.
fn engine_case(c: &EngineCase) -> (Workflow, InfraConfig, Scenario) {
    let mut wf = Workflow { name: "layers".into(), types: vec![], steps: vec![] };
    let mut prev: Vec<String> = Vec::new();
    for (l, w) in c.widths.iter().enumerate() {
        let ty = format!("layer{l}");
        let mut params: Vec<ParamSpec> = (0..prev.len()).map(|k| ParamSpec::new(&format!("i{k}"), Direction::In)).collect();
        params.push(ParamSpec::new("o", Direction::Out));
        let cons = elasflow::resources::ConstraintTemplate {
            computing_nodes: TemplateValue::literal(1),
            processors: vec![elasflow::resources::ProcessorTemplate {
                processor_type: ProcessorType::Cpu,
                computing_units: TemplateValue::literal(c.cpus[l % 4]),
            }],
        };
        wf.types.push(TaskType::new(&ty, params).with_constraints(cons));
        let outs: Vec<String> = (0..*w).map(|k| format!("l{l}/o{k}")).collect();
        for o in &outs {
            let mut args = prev.clone();
            args.push(o.clone());
            wf.steps.push(Step { task_type: ty.clone(), args });
        }
        prev = outs;
    }
    let mut inf = InfraConfig::homogeneous(c.statics, NodeShape { cpu_units: 4, gpu_units: 0 }, BTreeMap::new());
    inf.elasticity = ElasticityConfig {
        elastic_max: c.elastic_max,
        period: c.period as f64,
        rt_prior: 10.0,
        default_mean_et: 60.0,
        provision_delay: DelayModel { seconds: 10.0, distribution: Distribution::Uniform { lo: 0.2, hi: 3.0 } },
        ..ElasticityConfig::default()
    };
    let mut sc = scenario(60.0, &[]);
    sc.seed = c.seed;
    sc.durations.default.distribution = Distribution::Uniform { lo: 0.1, hi: 3.0 };
    (wf, inf, sc)
}

/// Trace replay rejects any SCHEDULE on a draining or released node and any
/// release of a node that still hosts work.
fn prop_drain_safety(c: EngineCase) -> Result<(), TestCaseError> {
    let (wf, inf, sc) = engine_case(&c);
    let r = simulate(&wf, &inf, &sc, EngineOptions::default()).unwrap();
    prop_assert_eq!(r.summary.exit_code, 0);
    prop_assert_eq!(audit_run(&r, &inf), Ok(()));
    Ok(())
}

/// Node counts stay within the static floor and the elastic ceiling, and
/// per-node usage never exceeds capacity.
fn prop_resource_bounds(c: EngineCase) -> Result<(), TestCaseError> {
    let (wf, inf, sc) = engine_case(&c);
    let r = simulate(&wf, &inf, &sc, EngineOptions::default()).unwrap();
    for row in &r.elasticity {
        prop_assert!(row.n_up >= c.statics);
        prop_assert!(row.n_up + row.n_provisioning <= c.statics + c.elastic_max);
    }
    prop_assert!(r.summary.max_nodes_up as u32 <= c.statics + c.elastic_max);
    prop_assert_eq!(audit_run(&r, &inf), Ok(()));
    Ok(())
}

fn ac11_properties() -> Outcome {
    let started = Instant::now();
    run_property("acyclicity and readiness soundness", (arb_registrations(), any::<u64>()), |(r, s)| prop_dag(r, s))?;
    run_property(
        "resource conservation",
        proptest::collection::vec((any::<bool>(), any::<u8>(), any::<u8>(), any::<u8>()), 1..60),
        prop_conservation,
    )?;
    run_property("drain safety", arb_engine_case(), prop_drain_safety)?;
    run_property("resource bounds", arb_engine_case(), prop_resource_bounds)?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "property suites took {secs:.1}s");
    Ok(format!("4 properties x 500 cases in {secs:.1}s"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("AC-1", "estimator fidelity", ac1_estimator_fidelity),
        ("AC-2", "graph shape", ac2_graph_shape),
        ("AC-3", "failure tolerance", ac3_failure_tolerance),
        ("AC-4", "checkpoint/restart idempotence", ac4_restart_idempotence),
        ("AC-5", "malleability curve", ac5_malleability),
        ("AC-6", "strong scaling", ac6_strong_scaling),
        ("AC-7", "weak scaling", ac7_weak_scaling),
        ("AC-8", "timeout semantics", ac8_timeout),
        ("AC-9", "SLURM golden sequence", ac9_slurm_golden),
        ("AC-10", "determinism", ac10_determinism),
        ("AC-11", "property suites", ac11_properties),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| id == p || name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("[PASS] {id} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
