//! Per-node parameters resolved from a [`RunConfig`].

use rand::Rng;
use serde::Serialize;

use super::config::{KappaSpec, Mode, RunConfig};
use super::EngineError;
use crate::losses::Dataset;
use crate::rng::{self, Purpose};
use crate::topology::Graph;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeParams {
    pub nu: f64,
    /// Coordinates this node transmits per message.
    pub s: usize,
    pub kappa: u64,
    /// Neighbors polled per communication round.
    pub t: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub mode: Mode,
    pub dim: usize,
    pub gamma: f64,
    pub sigma0: f64,
    pub delta: f64,
    pub k0: u64,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub dpsgd_lr: f64,
    pub epsilon_trials: usize,
    pub nodes: Vec<NodeParams>,
}

/// `max(1, floor(nu * degree))`, capped at the degree.
pub fn participation_count(nu: f64, degree: usize) -> usize {
    ((nu * degree as f64 + 1e-9).floor() as usize).clamp(1, degree.max(1))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm_all(values: &[u64]) -> Option<u64> {
    values.iter().try_fold(1u64, |acc, &v| (acc / gcd(acc, v)).checked_mul(v))
}

impl Plan {
    pub fn from_config(cfg: &RunConfig, graph: &Graph, datasets: &[Dataset]) -> Result<Self, EngineError> {
        let m = graph.node_count();
        if m < 2 || graph.degree() == 0 {
            return Err(EngineError::InvalidTopology(format!(
                "{m} node(s) with degree {}: every node needs at least one neighbor",
                graph.degree()
            )));
        }
        if datasets.len() != m {
            return Err(EngineError::InvalidConfig(format!("{} datasets for {m} nodes", datasets.len())));
        }
        let n = datasets[0].dim();
        if let Some(ds) = datasets.iter().find(|d| d.dim() != n) {
            return Err(EngineError::InvalidConfig(format!(
                "node {} has dimension {}, expected {n}",
                ds.node_id(),
                ds.dim()
            )));
        }
        let e = &cfg.engine;
        let nus = e.nu.resolve(m, "engine.nu")?;
        let ss = match (&e.s, e.s_ratio) {
            (Some(s), _) => s.resolve(m, "engine.s")?,
            (None, ratio) => {
                let r = ratio.unwrap_or(0.2);
                vec![((r * n as f64).round() as usize).clamp(1, n); m]
            }
        };
        if let Some(bad) = ss.iter().find(|&&s| s == 0 || s > n) {
            return Err(EngineError::InvalidConfig(format!("engine.s = {bad} outside 1..={n}")));
        }
        let kappas: Vec<u64> = match &e.kappa {
            KappaSpec::Fixed(k) => vec![*k; m],
            KappaSpec::Range { range: [lo, hi] } => (0..m)
                .map(|i| rng::stream(cfg.seed, Purpose::Period, &[i as u64]).gen_range(*lo..=*hi))
                .collect(),
            KappaSpec::Nodes { per_node } if per_node.len() == m => per_node.clone(),
            KappaSpec::Nodes { per_node } => {
                return Err(EngineError::InvalidConfig(format!(
                    "engine.kappa lists {} periods for {m} nodes",
                    per_node.len()
                )))
            }
        };
        let k0 = match e.k0 {
            Some(k0) => k0,
            None => lcm_all(&kappas)
                .ok_or_else(|| EngineError::InvalidConfig("lcm of periods overflows; set engine.k0".into()))?,
        };
        let nodes = (0..m)
            .map(|i| {
                let rows = datasets[i].rows();
                NodeParams {
                    nu: nus[i],
                    s: ss[i],
                    kappa: kappas[i],
                    t: participation_count(nus[i], graph.neighbors(i).len()),
                    batch_size: ((e.batch_fraction * rows as f64 - 1e-9).ceil() as usize).clamp(1, rows),
                }
            })
            .collect();
        Ok(Plan {
            mode: cfg.mode,
            dim: n,
            gamma: e.gamma,
            sigma0: e.sigma0,
            delta: e.delta,
            k0,
            max_iters: e.max_iters,
            stop_tol: e.stop_tol,
            dpsgd_lr: e.dpsgd_lr,
            epsilon_trials: e.epsilon_trials,
            nodes,
        })
    }

    pub fn t_min(&self) -> usize {
        self.nodes.iter().map(|p| p.t).min().unwrap_or(0)
    }
}
