//! Run configuration: the JSON schema, dotted-key overrides and resolution
//! into per-node parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EngineError;
use crate::losses::{LossKind, LossSpec, ShardPolicy, DEFAULT_RIDGE};
use crate::topology::{GraphKind, DEFAULT_MAX_RETRIES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    PaME,
    DPSGD,
}

/// A scalar applied to every node, or one value per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode<T> {
    Scalar(T),
    Nodes(Vec<T>),
}

impl<T: Copy> PerNode<T> {
    pub fn resolve(&self, m: usize, name: &str) -> Result<Vec<T>, EngineError> {
        match self {
            PerNode::Scalar(v) => Ok(vec![*v; m]),
            PerNode::Nodes(vs) if vs.len() == m => Ok(vs.clone()),
            PerNode::Nodes(vs) => Err(EngineError::InvalidConfig(format!(
                "{name} lists {} values for {m} nodes",
                vs.len()
            ))),
        }
    }
}

/// Communication periods: one value for all nodes, a range sampled per node,
/// or explicit per-node values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Fixed(u64),
    Range {
        range: [u64; 2],
    },
    Nodes {
        per_node: Vec<u64>,
    },
}

fn default_max_retries() -> usize {
    DEFAULT_MAX_RETRIES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<GraphKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    /// Graph JSON document, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

fn default_noise() -> f64 {
    0.5
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_node: Option<usize>,
    /// Fraction of nonzero truth entries; 0.01 for least squares and 0.5 for
    /// logistic loss when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub heterogeneous: bool,
    #[serde(default = "default_shard")]
    pub shard: ShardPolicy,
    /// Load shards from a manifest (relative to the config file) instead of
    /// generating them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

fn default_shard() -> ShardPolicy {
    ShardPolicy::Iid
}

impl DataConfig {
    pub fn loss_spec(&self) -> LossSpec {
        match self.loss {
            LossKind::LinearRegression => LossSpec::linear(),
            LossKind::Logistic => LossSpec::logistic(self.ridge),
        }
    }
}

fn default_nu() -> PerNode<f64> {
    PerNode::Scalar(0.2)
}
fn default_gamma() -> f64 {
    1.005
}
fn default_sigma0() -> f64 {
    1.0
}
fn default_kappa() -> KappaSpec {
    KappaSpec::Range { range: [3, 7] }
}
fn default_delta() -> f64 {
    1.0
}
fn default_max_iters() -> usize {
    5000
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.05
}
fn default_stop_tol() -> f64 {
    1e-3
}
fn default_eps_trials() -> usize {
    200
}

/// Algorithm parameters. Defaults are the linear/logistic regression values
/// used in the reference experiments (participation 0.2, transmission rate
/// 0.2, gamma 1.005, sigma0 1.0, periods drawn from [3, 7]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_nu")]
    pub nu: PerNode<f64>,
    /// Transmitted coordinates per message; exclusive with `s_ratio`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<PerNode<usize>>,
    /// Transmission rate `s/n`; 0.2 when neither `s` nor `s_ratio` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_ratio: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_kappa")]
    pub kappa: KappaSpec,
    /// Common period used by the setup check; the lcm of all periods when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<u64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_one")]
    pub batch_fraction: f64,
    #[serde(default = "default_lr")]
    pub dpsgd_lr: f64,
    /// Stop once the population std of the last three objectives drops below
    /// this; 0 disables the rule.
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
    /// Trials for the sampled gradient-discrepancy estimate.
    #[serde(default = "default_eps_trials")]
    pub epsilon_trials: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all engine fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    pub graph: GraphConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        Self::from_json_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides addressed by dotted paths
    /// (`engine.gamma`, `mode`, ...) and checks the result.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self, EngineError> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| {
            EngineError::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), EngineError> {
        let e = &self.engine;
        let bad = |msg: String| Err(EngineError::InvalidConfig(msg));
        if !(e.gamma > 1.0 && e.gamma.is_finite()) {
            return bad(format!("engine.gamma must exceed 1, got {}", e.gamma));
        }
        if !(e.sigma0 > 0.0 && e.sigma0.is_finite()) {
            return bad(format!("engine.sigma0 must be positive, got {}", e.sigma0));
        }
        if !(e.delta > 0.0 && e.delta.is_finite()) {
            return bad(format!("engine.delta must be positive, got {}", e.delta));
        }
        if !(e.batch_fraction > 0.0 && e.batch_fraction <= 1.0) {
            return bad(format!("engine.batch_fraction must lie in (0, 1], got {}", e.batch_fraction));
        }
        if !(e.dpsgd_lr > 0.0 && e.dpsgd_lr.is_finite()) && self.mode == Mode::DPSGD {
            return bad(format!("engine.dpsgd_lr must be positive, got {}", e.dpsgd_lr));
        }
        if !(e.stop_tol >= 0.0) {
            return bad(format!("engine.stop_tol must be >= 0, got {}", e.stop_tol));
        }
        if e.s.is_some() && e.s_ratio.is_some() {
            return bad("set at most one of engine.s and engine.s_ratio".into());
        }
        if let Some(r) = e.s_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("engine.s_ratio must lie in (0, 1], got {r}"));
            }
        }
        let nus = match &e.nu {
            PerNode::Scalar(v) => vec![*v],
            PerNode::Nodes(vs) => vs.clone(),
        };
        if nus.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return bad("engine.nu values must lie in (0, 1]".into());
        }
        match &e.kappa {
            KappaSpec::Fixed(0) => return bad("engine.kappa must be >= 1".into()),
            KappaSpec::Range { range: [lo, hi] } if *lo == 0 || lo > hi => {
                return bad(format!("engine.kappa range [{lo}, {hi}] is invalid"));
            }
            KappaSpec::Nodes { per_node } if per_node.contains(&0) => {
                return bad("engine.kappa values must be >= 1".into());
            }
            _ => {}
        }
        if e.k0 == Some(0) {
            return bad("engine.k0 must be >= 1".into());
        }
        let g = &self.graph;
        if g.file.is_some() && (g.kind.is_some() || g.m.is_some()) {
            return bad("graph.file excludes graph.kind and graph.m".into());
        }
        if g.file.is_none() && (g.kind.is_none() || g.m.is_none()) {
            return bad("graph needs either file or kind and m".into());
        }
        let d = &self.data;
        if d.manifest.is_none() && (d.n.is_none() || d.samples_per_node.is_none()) {
            return bad("data needs either manifest or n and samples_per_node".into());
        }
        Ok(())
    }

    /// Number of nodes, when it is known without reading files.
    pub fn node_count(&self) -> Option<usize> {
        self.graph.m
    }
}

/// Applies one `a.b.c=value` override to a JSON document. The value is
/// parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), EngineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| EngineError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(EngineError::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            _ => {
                return Err(EngineError::Config(format!(
                    "override {key}: {} is not an object",
                    parts[..depth].join(".")
                )))
            }
        };
        if depth + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

/// Resolves a relative path against the directory holding the config.
pub fn resolve_path(base: &Path, rel: &str) -> std::path::PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
