//! Failure policies, timeouts, checkpoint manifests and skip-on-restart.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::resources::TaskConstraints;

/// Process exit status of a run.
pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CHECKPOINTED: i32 = 3;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FailurePolicy {
    Ignore,
    Retry,
    #[default]
    Fail,
}

/// Value given to an output of a task whose failure was ignored.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DefaultValue {
    /// A zero-byte file at the output location.
    #[default]
    EmptyFile,
    /// No file at all; downstream readers see a missing value.
    NoneMarker,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ReliabilityPolicy {
    pub on_failure: FailurePolicy,
    /// Extra attempts allowed under `RETRY`.
    pub max_retries: u32,
    /// Maximum running time in seconds.
    pub time_out: Option<f64>,
    /// Per output parameter; parameters not listed default to an empty file.
    pub default_outputs: BTreeMap<String, DefaultValue>,
}

impl ReliabilityPolicy {
    pub fn default_for(&self, param: &str) -> DefaultValue {
        self.default_outputs.get(param).copied().unwrap_or_default()
    }
}

/// How the orchestrator must treat a failed (or timed out) attempt.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FailureResolution {
    /// Mark IGNORED_FAILED, materialize default outputs, release successors.
    Ignore,
    /// Put the task back to READY for attempt number `next_attempt` (1-based).
    Retry { next_attempt: u32 },
    /// Mark FAILED and cancel all successors.
    Fail,
}

/// `attempts_made` counts attempts including the one that just failed.
pub fn handle_failure(policy: &ReliabilityPolicy, attempts_made: u32) -> FailureResolution {
    match policy.on_failure {
        FailurePolicy::Ignore => FailureResolution::Ignore,
        FailurePolicy::Retry if attempts_made <= policy.max_retries => {
            FailureResolution::Retry { next_attempt: attempts_made + 1 }
        }
        FailurePolicy::Retry | FailurePolicy::Fail => FailureResolution::Fail,
    }
}

/// Instant at which a running attempt must be cancelled, if any.
pub fn timeout_deadline(started_at: f64, policy: &ReliabilityPolicy) -> Option<f64> {
    policy.time_out.map(|limit| started_at + limit)
}

/// True when an attempt started at `started_at` is still running at `now`
/// and has reached its time limit.
pub fn is_timed_out(started_at: f64, now: f64, policy: &ReliabilityPolicy) -> bool {
    timeout_deadline(started_at, policy).is_some_and(|d| now >= d)
}

/// Stable identity of a task invocation across runs.
///
/// `occurrence` disambiguates repeated invocations with identical type,
/// tokens and constraints (0 for the first).
pub fn fingerprint(type_name: &str, tokens: &[&str], constraints: &TaskConstraints, occurrence: u32) -> String {
    let mut h = Sha256::new();
    h.update(type_name.as_bytes());
    h.update([0]);
    for t in tokens {
        h.update(t.as_bytes());
        h.update([0]);
    }
    h.update(constraints.canonical().as_bytes());
    if occurrence > 0 {
        h.update([0]);
        h.update(occurrence.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputArtifact {
    /// Relative to the run's output directory.
    pub path: String,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub task_fingerprint: String,
    pub task_type: String,
    pub outputs: BTreeMap<String, OutputArtifact>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub manifest_version: u32,
    pub records: Vec<CheckpointRecord>,
}

impl Default for CheckpointManifest {
    fn default() -> Self {
        Self { manifest_version: MANIFEST_VERSION, records: Vec::new() }
    }
}

impl CheckpointManifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse { path: path.into(), source })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text + "\n").map_err(|source| ManifestError::Io { path: tmp.clone(), source })?;
        fs::rename(&tmp, path).map_err(|source| ManifestError::Io { path: path.into(), source })
    }

    pub fn find(&self, fingerprint: &str) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.task_fingerprint == fingerprint)
    }

    pub fn by_fingerprint(&self) -> BTreeMap<&str, &CheckpointRecord> {
        self.records.iter().map(|r| (r.task_fingerprint.as_str(), r)).collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RestartDecision {
    Skip,
    Run,
}

/// SKIP iff a record with this fingerprint exists and every recorded output
/// is present under `output_root` with a non-zero size.
pub fn restart_check(fingerprint: &str, manifest: &CheckpointManifest, output_root: &Path) -> RestartDecision {
    restart_check_record(manifest.find(fingerprint), output_root)
}

pub fn restart_check_record(record: Option<&CheckpointRecord>, output_root: &Path) -> RestartDecision {
    let Some(record) = record else {
        return RestartDecision::Run;
    };
    if record.outputs.is_empty() {
        return RestartDecision::Run;
    }
    for artifact in record.outputs.values() {
        let Some(path) = safe_join(output_root, &artifact.path) else {
            return RestartDecision::Run;
        };
        match fs::metadata(&path) {
            Ok(m) if m.is_file() && m.len() > 0 => {}
            _ => return RestartDecision::Run,
        }
    }
    RestartDecision::Skip
}

/// Joins a relative token path under `root`, refusing absolute paths and `..`.
pub fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let p = Path::new(rel);
    if rel.is_empty() || p.is_absolute() {
        return None;
    }
    for c in p.components() {
        if !matches!(c, std::path::Component::Normal(_)) {
            return None;
        }
    }
    Some(root.join(p))
}

/// Maps a named OS signal (e.g. `SIGTERM`) onto the engine's abstract STOP.
pub fn signal_number(name: &str) -> Option<i32> {
    use signal_hook::consts::*;
    let n = name.trim().to_ascii_uppercase();
    let n = n.strip_prefix("SIG").unwrap_or(&n);
    Some(match n {
        "TERM" => SIGTERM,
        "INT" => SIGINT,
        "USR1" => SIGUSR1,
        "USR2" => SIGUSR2,
        "HUP" => SIGHUP,
        "QUIT" => SIGQUIT,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::{ProcessorSpec, ProcessorType};

    fn policy(on_failure: FailurePolicy, max_retries: u32) -> ReliabilityPolicy {
        ReliabilityPolicy { on_failure, max_retries, ..Default::default() }
    }

    #[test]
    fn retry_budget_degrades_to_fail() {
        let p = policy(FailurePolicy::Retry, 2);
        assert_eq!(handle_failure(&p, 1), FailureResolution::Retry { next_attempt: 2 });
        assert_eq!(handle_failure(&p, 2), FailureResolution::Retry { next_attempt: 3 });
        assert_eq!(handle_failure(&p, 3), FailureResolution::Fail);
        assert_eq!(handle_failure(&policy(FailurePolicy::Ignore, 0), 5), FailureResolution::Ignore);
        assert_eq!(handle_failure(&ReliabilityPolicy::default(), 1), FailureResolution::Fail);
    }

    #[test]
    fn timeout_boundaries() {
        let p = ReliabilityPolicy { time_out: Some(100.0), ..Default::default() };
        assert!(!is_timed_out(10.0, 109.0, &p));
        assert!(is_timed_out(10.0, 110.0, &p));
        assert_eq!(timeout_deadline(10.0, &p), Some(110.0));
        assert!(!is_timed_out(0.0, 1e12, &ReliabilityPolicy::default()));
    }

    fn cpus(n: u32) -> TaskConstraints {
        TaskConstraints::new(1, vec![ProcessorSpec { processor_type: ProcessorType::Cpu, computing_units: n }]).unwrap()
    }

    #[test]
    fn fingerprint_is_sensitive_to_every_field() {
        let base = fingerprint("mdrun", &["a", "b"], &cpus(48), 0);
        assert_eq!(base, fingerprint("mdrun", &["a", "b"], &cpus(48), 0));
        let variants = [
            fingerprint("grompp", &["a", "b"], &cpus(48), 0),
            fingerprint("mdrun", &["b", "a"], &cpus(48), 0),
            fingerprint("mdrun", &["a", "b"], &cpus(24), 0),
            fingerprint("mdrun", &["ab"], &cpus(48), 0),
            fingerprint("mdrun", &["a", "b"], &cpus(48), 1),
        ];
        for v in variants {
            assert_ne!(v, base);
        }
    }

    #[test]
    fn restart_check_requires_non_empty_outputs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.out"), b"data").unwrap();
        fs::write(dir.path().join("b.out"), b"").unwrap();
        let rec = |path: &str| CheckpointRecord {
            task_fingerprint: format!("fp-{path}"),
            task_type: "t".into(),
            outputs: [("x".to_string(), OutputArtifact { path: path.into(), size: 4 })].into(),
        };
        let manifest = CheckpointManifest { manifest_version: 1, records: vec![rec("a.out"), rec("b.out"), rec("c.out"), rec("../a.out")] };
        assert_eq!(restart_check("fp-a.out", &manifest, dir.path()), RestartDecision::Skip);
        assert_eq!(restart_check("fp-b.out", &manifest, dir.path()), RestartDecision::Run);
        assert_eq!(restart_check("fp-c.out", &manifest, dir.path()), RestartDecision::Run);
        assert_eq!(restart_check("fp-../a.out", &manifest, dir.path()), RestartDecision::Run);
        assert_eq!(restart_check("unknown", &manifest, dir.path()), RestartDecision::Run);
    }

    #[test]
    fn manifest_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = CheckpointManifest::default();
        m.save(&path).unwrap();
        assert_eq!(CheckpointManifest::load(&path).unwrap(), m);
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(CheckpointManifest::load(&path), Err(ManifestError::Parse { .. })));
    }

    #[test]
    fn signal_names() {
        assert_eq!(signal_number("SIGTERM"), Some(signal_hook::consts::SIGTERM));
        assert_eq!(signal_number("usr1"), Some(signal_hook::consts::SIGUSR1));
        assert_eq!(signal_number("SIGFOO"), None);
    }
}
