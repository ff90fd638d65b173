//! Duration models, fault plans and the scenario file that binds them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taskgraph::TaskId;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("scenario {path}: {message}")]
    Io { path: String, message: String },
}

/// Multiplicative factor applied to a base duration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Constant,
    Uniform {
        lo: f64,
        hi: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
}

impl Distribution {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Distribution::Constant => Ok(()),
            Distribution::Uniform { lo, hi } if lo > 0.0 && hi >= lo && hi.is_finite() => Ok(()),
            Distribution::Uniform { .. } => Err("uniform requires 0 < lo <= hi".into()),
            Distribution::LogNormal { mu, sigma } if mu.is_finite() && sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Distribution::LogNormal { .. } => Err("lognormal requires finite mu and sigma >= 0".into()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Constant => 1.0,
            Distribution::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            Distribution::LogNormal { mu, sigma } => {
                let d = rand_distr::LogNormal::new(mu, sigma).expect("validated parameters");
                rng.sample(d)
            }
        }
    }
}

/// Independent RNG stream for one labelled draw, so results do not depend on
/// the order in which draws happen.
pub fn stream_rng(seed: u64, label: &str, key: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationSpec {
    pub base_seconds: f64,
    #[serde(default)]
    pub distribution: Distribution,
    /// Parallel fraction for Amdahl scaling over allocated CPU units.
    #[serde(default)]
    pub amdahl_p: Option<f64>,
    /// Units at which `base_seconds` was measured.
    #[serde(default = "one")]
    pub reference_units: u32,
}

fn one() -> u32 {
    1
}

impl DurationSpec {
    pub fn constant(base_seconds: f64) -> Self {
        Self { base_seconds, distribution: Distribution::Constant, amdahl_p: None, reference_units: 1 }
    }

    /// Amdahl factor for running on `units` instead of `reference_units`.
    pub fn speedup_factor(&self, units: u32) -> f64 {
        match self.amdahl_p {
            Some(p) => {
                let s = units.max(1) as f64 / self.reference_units.max(1) as f64;
                (1.0 - p) + p / s
            }
            None => 1.0,
        }
    }

    fn validate(&self, name: &str) -> Result<(), ScenarioError> {
        if !(self.base_seconds > 0.0) || !self.base_seconds.is_finite() {
            return Err(ScenarioError::Invalid(format!("durations.{name}.base_seconds must be > 0")));
        }
        if let Some(p) = self.amdahl_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(ScenarioError::Invalid(format!("durations.{name}.amdahl_p must be in [0, 1]")));
            }
        }
        self.distribution.validate().map_err(|m| ScenarioError::Invalid(format!("durations.{name}: {m}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationModel {
    #[serde(default = "default_spec")]
    pub default: DurationSpec,
    #[serde(default)]
    pub models: BTreeMap<String, DurationSpec>,
}

fn default_spec() -> DurationSpec {
    DurationSpec::constant(1.0)
}

impl Default for DurationModel {
    fn default() -> Self {
        Self { default: default_spec(), models: BTreeMap::new() }
    }
}

impl DurationModel {
    pub fn spec(&self, model_id: &str) -> &DurationSpec {
        self.models.get(model_id).unwrap_or(&self.default)
    }

    /// Sampled duration of one attempt; strictly positive.
    pub fn sample(&self, seed: u64, model_id: &str, fingerprint: &str, attempt: u32, units: u32) -> f64 {
        let spec = self.spec(model_id);
        let mut rng = stream_rng(seed, "duration", fingerprint, attempt as u64);
        let d = spec.base_seconds * spec.distribution.sample(&mut rng) * spec.speedup_factor(units);
        d.max(f64::MIN_POSITIVE)
    }

    /// Mean duration implied by the model (used by oracles and priors).
    pub fn expected(&self, model_id: &str, units: u32) -> f64 {
        let spec = self.spec(model_id);
        let m = match spec.distribution {
            Distribution::Constant => 1.0,
            Distribution::Uniform { lo, hi } => (lo + hi) / 2.0,
            Distribution::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        };
        spec.base_seconds * m * spec.speedup_factor(units)
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum FaultKind {
    /// Fails after this fraction of the sampled duration.
    FailAt(f64),
    /// Never completes; only a timeout or a stop ends it.
    Hang,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    Fail,
    Hang,
}

/// One injected fault, addressed by task ordinal or by fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub kind: FaultMode,
    /// Fraction of the duration at which a `fail` fault triggers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
    /// Number of attempts affected; all attempts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<u32>,
}

impl FaultSpec {
    pub fn fail_ordinal(ordinal: u32) -> Self {
        Self { ordinal: Some(ordinal), fingerprint: None, kind: FaultMode::Fail, at: None, attempts: None }
    }

    pub fn hang_ordinal(ordinal: u32) -> Self {
        Self { ordinal: Some(ordinal), fingerprint: None, kind: FaultMode::Hang, at: None, attempts: None }
    }

    fn matches(&self, task: TaskId, fingerprint: &str) -> bool {
        self.ordinal == Some(task.0) || self.fingerprint.as_deref() == Some(fingerprint)
    }

    fn kind(&self) -> FaultKind {
        match self.kind {
            FaultMode::Fail => FaultKind::FailAt(self.at.unwrap_or(0.5)),
            FaultMode::Hang => FaultKind::Hang,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default)]
    pub inject: Vec<FaultSpec>,
    /// Simulated time at which a STOP signal is delivered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<f64>,
}

impl FaultPlan {
    pub fn lookup(&self, task: TaskId, fingerprint: &str, attempt_no: u32) -> Option<FaultKind> {
        self.inject
            .iter()
            .find(|f| f.matches(task, fingerprint) && f.attempts.map_or(true, |n| attempt_no <= n))
            .map(FaultSpec::kind)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (i, f) in self.inject.iter().enumerate() {
            if f.ordinal.is_none() && f.fingerprint.is_none() {
                return Err(ScenarioError::Invalid(format!("faults.inject[{i}] needs `ordinal` or `fingerprint`")));
            }
            if let Some(at) = f.at {
                if !(0.0..=1.0).contains(&at) {
                    return Err(ScenarioError::Invalid(format!("faults.inject[{i}].at must be in [0, 1]")));
                }
            }
        }
        if let Some(t) = self.stop_at {
            if !(t >= 0.0) {
                return Err(ScenarioError::Invalid("faults.stop_at must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let plan: FaultPlan = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Everything the simulator needs besides the workflow and infrastructure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    /// Serialized master cost per task dispatch, in seconds.
    #[serde(default)]
    pub dispatch_latency: f64,
    #[serde(default)]
    pub durations: DurationModel,
    #[serde(default)]
    pub faults: FaultPlan,
}

impl Default for Scenario {
    fn default() -> Self {
        Self { seed: 0, dispatch_latency: 0.0, durations: DurationModel::default(), faults: FaultPlan::default() }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.dispatch_latency >= 0.0) || !self.dispatch_latency.is_finite() {
            return Err(ScenarioError::Invalid("dispatch_latency must be >= 0".into()));
        }
        self.durations.default.validate("default")?;
        for (name, spec) in &self.durations.models {
            spec.validate(name)?;
        }
        self.faults.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let de = toml::Deserializer::new(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml_str(&text).map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}
