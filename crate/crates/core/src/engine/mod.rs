//! Simulation of PaME and the D-PSGD baseline over a fixed graph.
//!
//! All nodes advance one global iteration together. Each step reads the
//! iteration-`k` snapshot of every node and produces the next snapshot, so
//! the per-node work runs in parallel without affecting results.

pub mod config;
pub mod output;
pub mod plan;
pub mod setup;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::losses::{
    self, gen_linear_regression, gen_logistic, read_datasets, Dataset, GroundTruth, LinearDataOptions,
    LogisticDataOptions, LossError, LossKind, LossSpec,
};
use crate::pme::{self, PmeError, SparseMessage};
use crate::rng::{self, Purpose};
use crate::topology::{
    build_graph_with_retries, communication_matrix, CommMatrix, Graph, GraphKind, TopologyError,
};

pub use config::{Mode, RunConfig};
pub use plan::{NodeParams, Plan};
pub use setup::{validate_setup, SetupReport};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pme(#[from] PmeError),
    #[error("non-finite value at node {node}, iteration {iter}")]
    NonFiniteValue { node: usize, iter: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Graph, mixing matrix and local data of one simulated network.
#[derive(Clone, Debug)]
pub struct Problem {
    pub graph: Graph,
    pub comm: CommMatrix,
    pub spec: LossSpec,
    pub datasets: Vec<Dataset>,
    pub truth: Option<GroundTruth>,
}

fn default_degree(kind: GraphKind, m: usize) -> Option<usize> {
    match kind {
        GraphKind::OddRing => Some(2),
        GraphKind::Torus2D => Some(4),
        GraphKind::Complete => Some(m.saturating_sub(1)),
        GraphKind::KRegularRandom => None,
    }
}

impl Problem {
    /// Builds or loads the graph and data described by `cfg`. Relative paths
    /// are resolved against `base_dir`.
    pub fn from_config(cfg: &RunConfig, base_dir: &Path) -> Result<Self, EngineError> {
        let g = &cfg.graph;
        let graph = match (&g.file, g.kind, g.m) {
            (Some(file), _, _) => Graph::from_json(&fs::read_to_string(config::resolve_path(base_dir, file))?)?,
            (None, Some(kind), Some(m)) => {
                let degree = match g.degree.or(default_degree(kind, m)) {
                    Some(d) => d,
                    None => return Err(EngineError::InvalidConfig("graph.degree is required for KRegularRandom".into())),
                };
                build_graph_with_retries(kind, m, degree, cfg.seed, g.max_retries)?
            }
            _ => return Err(EngineError::InvalidConfig("graph needs either file or kind and m".into())),
        };
        let m = graph.node_count();
        if m < 2 || graph.degree() == 0 {
            return Err(EngineError::InvalidTopology(format!("{m} node(s) without neighbors")));
        }
        let comm = communication_matrix(&graph)?;
        let d = &cfg.data;
        let spec = d.loss_spec();
        let (truth, datasets) = match &d.manifest {
            Some(path) => {
                let (manifest, datasets) = read_datasets(&config::resolve_path(base_dir, path))?;
                if manifest.loss.kind != spec.kind {
                    return Err(EngineError::InvalidConfig(format!(
                        "manifest holds {:?} data, config asks for {:?}",
                        manifest.loss.kind, spec.kind
                    )));
                }
                (manifest.ground_truth, datasets)
            }
            None => {
                let n = d.n.expect("checked by RunConfig::check");
                let spn = d.samples_per_node.expect("checked by RunConfig::check");
                let (truth, datasets) = match d.loss {
                    LossKind::LinearRegression => {
                        let mut o = LinearDataOptions::new(n, spn, m, cfg.seed);
                        o.sparsity = d.sparsity.unwrap_or(o.sparsity);
                        o.noise_scale = d.noise_scale;
                        o.heterogeneous = d.heterogeneous;
                        gen_linear_regression(&o)?
                    }
                    LossKind::Logistic => {
                        let mut o = LogisticDataOptions::new(n, spn, m, cfg.seed);
                        o.sparsity = d.sparsity.unwrap_or(o.sparsity);
                        o.shard = d.shard;
                        gen_logistic(&o)?
                    }
                };
                (Some(truth), datasets)
            }
        };
        if datasets.len() != m {
            return Err(EngineError::InvalidConfig(format!("{} datasets for {m} nodes", datasets.len())));
        }
        Ok(Problem { graph, comm, spec, datasets, truth })
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn dim(&self) -> usize {
        self.datasets.first().map_or(0, Dataset::dim)
    }

    /// `f(w) = sum_i f_i(w)`.
    pub fn global_objective(&self, w: &[f64]) -> Result<f64, EngineError> {
        let parts: Vec<f64> = self
            .datasets
            .par_iter()
            .map(|ds| losses::loss_value(&self.spec, ds, w))
            .collect::<Result<_, _>>()?;
        Ok(parts.iter().sum())
    }

    pub fn alpha_max(&self) -> f64 {
        let alphas: Vec<f64> = self.datasets.par_iter().map(|ds| losses::lipschitz_bound(&self.spec, ds)).collect();
        alphas.into_iter().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeState {
    pub w: Vec<f64>,
    pub sigma: f64,
    /// Aggregate formed in the most recent step (`w` itself before the
    /// first step).
    pub vbar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// `f(mean_i w_i)` at iteration `iter`.
    pub objective: f64,
    /// `||W - Pi||_F^2`.
    pub consensus_error: f64,
    /// `sum_i f_i(w_i) + sigma_i t_i / 2 ||w_i - vbar_i||^2`; plain
    /// `sum_i f_i(w_i)` for D-PSGD.
    pub merit: f64,
    pub bits: u64,
    pub comm_round: bool,
    pub wallclock: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub status: RunStatus,
    pub records: Vec<MetricsRecord>,
    /// States after the last step.
    pub states: Vec<NodeState>,
}

impl RunOutput {
    pub fn total_bits(&self) -> u64 {
        bits_ledger(&self.records).0
    }

    pub fn average_w(&self) -> Vec<f64> {
        average(&self.states)
    }
}

/// Total bits and the bit count of every communicating iteration.
pub fn bits_ledger(records: &[MetricsRecord]) -> (u64, Vec<u64>) {
    let per_round: Vec<u64> = records.iter().filter(|r| r.comm_round).map(|r| r.bits).collect();
    (per_round.iter().sum(), per_round)
}

pub fn initial_states(plan: &Plan) -> Vec<NodeState> {
    plan.nodes
        .iter()
        .map(|_| NodeState { w: vec![0.0; plan.dim], sigma: plan.sigma0, vbar: vec![0.0; plan.dim] })
        .collect()
}

/// Network average `(1/m) sum_i w_i`, summed in node order.
pub fn average(states: &[NodeState]) -> Vec<f64> {
    let n = states.first().map_or(0, |s| s.w.len());
    let mut avg = vec![0.0; n];
    for st in states {
        for (a, v) in avg.iter_mut().zip(&st.w) {
            *a += v;
        }
    }
    let m = states.len() as f64;
    avg.iter_mut().for_each(|a| *a /= m);
    avg
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn draw_batch(seed: u64, node: usize, k: usize, rows: usize, size: usize) -> Vec<usize> {
    if size >= rows {
        return (0..rows).collect();
    }
    let mut rng = rng::stream(seed, Purpose::Batch, &[node as u64, k as u64]);
    pme::sample_coordinates(rows, size, &mut rng).expect("1 <= size < rows")
}

struct NodeUpdate {
    state: NodeState,
    bits: u64,
    communicated: bool,
    merit: f64,
}

fn collect_record(
    problem: &Problem,
    states: &[NodeState],
    updates: Vec<NodeUpdate>,
    k: usize,
    started: Instant,
) -> Result<(Vec<NodeState>, MetricsRecord), EngineError> {
    let avg = average(states);
    let objective = problem.global_objective(&avg)?;
    if !objective.is_finite() {
        return Err(EngineError::NonFiniteValue { node: 0, iter: k });
    }
    let consensus_error = states.iter().map(|s| sq_dist(&s.w, &avg)).sum();
    let mut merit = 0.0;
    let mut bits = 0;
    let mut comm_round = false;
    let mut next = Vec::with_capacity(updates.len());
    for u in updates {
        merit += u.merit;
        bits += u.bits;
        comm_round |= u.communicated;
        next.push(u.state);
    }
    let record = MetricsRecord {
        iter: k,
        objective,
        consensus_error,
        merit,
        bits,
        comm_round,
        wallclock: started.elapsed().as_secs_f64(),
    };
    Ok((next, record))
}

/// The messages node `i` pulls at iteration `k`, in ascending sender order,
/// or `None` when `k` is not a multiple of its period.
pub fn pame_messages(
    problem: &Problem,
    plan: &Plan,
    seed: u64,
    states: &[NodeState],
    i: usize,
    k: usize,
) -> Result<Option<Vec<SparseMessage>>, EngineError> {
    let p = &plan.nodes[i];
    if !(k as u64).is_multiple_of(p.kappa) {
        return Ok(None);
    }
    let nbrs = problem.graph.neighbors(i);
    let mut rng = rng::stream(seed, Purpose::Neighbors, &[i as u64, k as u64]);
    let picked = pme::sample_coordinates(nbrs.len(), p.t, &mut rng)?;
    let msgs = picked
        .into_iter()
        .map(|slot| {
            let j = nbrs[slot];
            let mut rng = rng::stream(seed, Purpose::Coordinates, &[j as u64, i as u64, k as u64]);
            pme::make_sparse_message(j, &states[j].w, plan.nodes[j].s, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(msgs))
}

/// One PaME iteration from the snapshot `states` at iteration `k`.
pub fn pame_step(
    problem: &Problem,
    plan: &Plan,
    seed: u64,
    states: &[NodeState],
    k: usize,
) -> Result<(Vec<NodeState>, MetricsRecord), EngineError> {
    let started = Instant::now();
    let updates = (0..states.len())
        .into_par_iter()
        .map(|i| -> Result<NodeUpdate, EngineError> {
            let st = &states[i];
            let p = &plan.nodes[i];
            let ds = &problem.datasets[i];
            let (vbar, bits, communicated) = match pame_messages(problem, plan, seed, states, i, k)? {
                Some(msgs) => {
                    let bits = msgs.iter().map(pme::bit_cost).sum();
                    (pme::aggregate(&st.w, &msgs)?.vbar, bits, true)
                }
                None => (st.w.clone(), 0, false),
            };
            let batch = draw_batch(seed, i, k, ds.rows(), p.batch_size);
            let grad = losses::gradient(&problem.spec, ds, &vbar, &batch)?;
            let step = 1.0 / (st.sigma * p.t as f64);
            let w: Vec<f64> = vbar.iter().zip(&grad).map(|(v, g)| v - g * step).collect();
            let merit = losses::loss_value(&problem.spec, ds, &st.w)?
                + 0.5 * st.sigma * p.t as f64 * sq_dist(&st.w, &vbar);
            if !all_finite(&w) || !merit.is_finite() {
                return Err(EngineError::NonFiniteValue { node: i, iter: k });
            }
            Ok(NodeUpdate { state: NodeState { w, sigma: st.sigma * plan.gamma, vbar }, bits, communicated, merit })
        })
        .collect::<Result<Vec<_>, _>>()?;
    collect_record(problem, states, updates, k, started)
}

/// One D-PSGD iteration: `w_i <- sum_j B_ij w_j - lr grad f_i(w_i)`, every
/// node exchanging full vectors with all neighbors.
pub fn dpsgd_step(
    problem: &Problem,
    plan: &Plan,
    seed: u64,
    states: &[NodeState],
    k: usize,
) -> Result<(Vec<NodeState>, MetricsRecord), EngineError> {
    let started = Instant::now();
    let n = plan.dim;
    let updates = (0..states.len())
        .into_par_iter()
        .map(|i| -> Result<NodeUpdate, EngineError> {
            let st = &states[i];
            let ds = &problem.datasets[i];
            let nbrs = problem.graph.neighbors(i);
            let mut mix = vec![0.0; n];
            for &j in nbrs {
                let b = problem.comm.get(i, j);
                for (m, v) in mix.iter_mut().zip(&states[j].w) {
                    *m += b * v;
                }
            }
            let batch = draw_batch(seed, i, k, ds.rows(), plan.nodes[i].batch_size);
            let grad = losses::gradient(&problem.spec, ds, &st.w, &batch)?;
            let w: Vec<f64> = mix.iter().zip(&grad).map(|(v, g)| v - plan.dpsgd_lr * g).collect();
            let merit = losses::loss_value(&problem.spec, ds, &st.w)?;
            if !all_finite(&w) || !merit.is_finite() {
                return Err(EngineError::NonFiniteValue { node: i, iter: k });
            }
            Ok(NodeUpdate {
                state: NodeState { w, sigma: st.sigma, vbar: mix },
                bits: nbrs.len() as u64 * pme::dense_bit_cost(n),
                communicated: true,
                merit,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    collect_record(problem, states, updates, k, started)
}

/// Population standard deviation of the last three objectives is below
/// `tol`.
pub fn should_stop(records: &[MetricsRecord], tol: f64) -> bool {
    if records.len() < 3 {
        return false;
    }
    let last: Vec<f64> = records[records.len() - 3..].iter().map(|r| r.objective).collect();
    let mean = last.iter().sum::<f64>() / 3.0;
    let var = last.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
    var.sqrt() < tol
}

/// A problem, its resolved plan and the run seed.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub problem: Problem,
    pub plan: Plan,
    pub seed: u64,
}

impl Simulation {
    pub fn from_config(cfg: &RunConfig, base_dir: &Path) -> Result<Self, EngineError> {
        let problem = Problem::from_config(cfg, base_dir)?;
        let plan = Plan::from_config(cfg, &problem.graph, &problem.datasets)?;
        Ok(Simulation { problem, plan, seed: cfg.seed })
    }

    pub fn initial_states(&self) -> Vec<NodeState> {
        initial_states(&self.plan)
    }

    pub fn step(&self, states: &[NodeState], k: usize) -> Result<(Vec<NodeState>, MetricsRecord), EngineError> {
        match self.plan.mode {
            Mode::PaME => pame_step(&self.problem, &self.plan, self.seed, states, k),
            Mode::DPSGD => dpsgd_step(&self.problem, &self.plan, self.seed, states, k),
        }
    }

    pub fn run(&self) -> Result<RunOutput, EngineError> {
        self.run_with_observer(|_, _, _| {})
    }

    /// Runs to the stopping rule or `max_iters`, calling `observe` after
    /// every step with the pre-step states and the step's record.
    pub fn run_with_observer<F>(&self, mut observe: F) -> Result<RunOutput, EngineError>
    where
        F: FnMut(&[NodeState], &[NodeState], &MetricsRecord),
    {
        let mut states = self.initial_states();
        let mut records = Vec::new();
        let mut status = RunStatus::MaxIters;
        for k in 0..self.plan.max_iters {
            let (next, record) = self.step(&states, k)?;
            observe(&states, &next, &record);
            records.push(record);
            states = next;
            if should_stop(&records, self.plan.stop_tol) {
                status = RunStatus::Converged;
                break;
            }
        }
        Ok(RunOutput { status, records, states })
    }

    pub fn epsilon_hat(&self) -> Result<f64, EngineError> {
        Ok(losses::epsilon_estimate(
            &self.problem.spec,
            &self.problem.datasets,
            self.plan.delta,
            self.plan.epsilon_trials,
            self.seed,
        )?)
    }

    pub fn setup_report(&self) -> Result<SetupReport, EngineError> {
        let eps = self.epsilon_hat()?;
        Ok(validate_setup(&self.plan, &self.problem.graph, self.problem.comm.zeta(), self.problem.alpha_max(), eps))
    }
}
