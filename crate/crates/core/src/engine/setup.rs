//! Sufficient-condition checks on the algorithm parameters.
//!
//! The checks are advisory. A configuration that fails them still runs; the
//! report only says whether the convergence guarantees formally apply.

use serde::Serialize;

use super::plan::Plan;
use crate::topology::{Graph, ZETA_MARGIN};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeCondition {
    pub node: usize,
    pub t: usize,
    /// `(1-p)^t_i (1+zeta)^2 + 2p sum_{j in N_i} nu_j`
    pub lhs: f64,
    /// `(gamma^{-k0/2} - zeta)^2`
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SetupReport {
    pub zeta: f64,
    pub zeta_ok: bool,
    pub k0: u64,
    /// Transmission rate `min_i s_i / n`.
    pub p: f64,
    pub p_in_unit_interval: bool,
    pub gamma: f64,
    /// Upper end of the admissible open interval `(1, zeta^{-2/k0})`;
    /// `None` when unbounded (`zeta = 0`).
    pub gamma_upper: Option<f64>,
    pub gamma_in_interval: bool,
    pub nodes: Vec<NodeCondition>,
    pub condition_pass: bool,
    pub alpha_max: f64,
    pub epsilon_hat: f64,
    pub delta: f64,
    pub t_min: usize,
    pub sigma_required: f64,
    pub sigma0: f64,
    pub sigma_ok: bool,
    pub pass: bool,
    pub warnings: Vec<String>,
}

/// Upper end of the admissible `gamma` interval.
pub fn gamma_upper_bound(zeta: f64, k0: u64) -> Option<f64> {
    if zeta <= 0.0 {
        None
    } else {
        Some(zeta.powf(-2.0 / k0 as f64))
    }
}

/// `max{4 alpha_max, eps gamma / ((gamma - 1) delta t_min)}`
pub fn sigma_required(alpha_max: f64, epsilon_hat: f64, gamma: f64, delta: f64, t_min: usize) -> f64 {
    (4.0 * alpha_max).max(epsilon_hat * gamma / ((gamma - 1.0) * delta * t_min as f64))
}

pub fn validate_setup(plan: &Plan, graph: &Graph, zeta: f64, alpha_max: f64, epsilon_hat: f64) -> SetupReport {
    let n = plan.dim;
    let s_min = plan.nodes.iter().map(|p| p.s).min().unwrap_or(0);
    let p = s_min as f64 / n as f64;
    let gamma = plan.gamma;
    let k0 = plan.k0;
    let contraction = gamma.powf(-(k0 as f64) / 2.0) - zeta;
    let rhs = contraction * contraction;
    let nodes: Vec<NodeCondition> = plan
        .nodes
        .iter()
        .enumerate()
        .map(|(i, np)| {
            let nu_sum: f64 = graph.neighbors(i).iter().map(|&j| plan.nodes[j].nu).sum();
            let lhs = (1.0 - p).powi(np.t as i32) * (1.0 + zeta) * (1.0 + zeta) + 2.0 * p * nu_sum;
            NodeCondition { node: i, t: np.t, lhs, rhs, margin: rhs - lhs, pass: lhs < rhs && contraction > 0.0 }
        })
        .collect();
    let condition_pass = nodes.iter().all(|c| c.pass);
    let gamma_upper = gamma_upper_bound(zeta, k0);
    let gamma_in_interval = gamma > 1.0 && gamma_upper.is_none_or(|u| gamma < u);
    let zeta_ok = zeta < 1.0 - ZETA_MARGIN;
    let p_in_unit_interval = p > 0.0 && p < 1.0;
    let t_min = plan.nodes.iter().map(|p| p.t).min().unwrap_or(0);
    let sigma_req = sigma_required(alpha_max, epsilon_hat, gamma, plan.delta, t_min);
    let sigma_ok = plan.sigma0 >= sigma_req;

    let mut warnings = Vec::new();
    if !zeta_ok {
        warnings.push(format!("spectral gap zeta = {zeta} does not contract (graph bipartite or disconnected)"));
    }
    if !gamma_in_interval {
        let upper = gamma_upper.map_or("inf".to_string(), |u| format!("{u:.6}"));
        warnings.push(format!("gamma = {gamma} outside admissible interval (1, {upper})"));
    }
    if !p_in_unit_interval {
        warnings.push(format!("transmission rate p = {p} outside (0, 1)"));
    }
    let failing = nodes.iter().filter(|c| !c.pass).count();
    if failing > 0 {
        let worst = nodes.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
        warnings.push(format!("participation/transmission condition fails at {failing} node(s); worst margin {worst:.6e}"));
    }
    if !sigma_ok {
        warnings.push(format!("sigma0 = {} below required {sigma_req:.6e}", plan.sigma0));
    }
    SetupReport {
        zeta,
        zeta_ok,
        k0,
        p,
        p_in_unit_interval,
        gamma,
        gamma_upper,
        gamma_in_interval,
        pass: warnings.is_empty(),
        nodes,
        condition_pass,
        alpha_max,
        epsilon_hat,
        delta: plan.delta,
        t_min,
        sigma_required: sigma_req,
        sigma0: plan.sigma0,
        sigma_ok,
        warnings,
    }
}

/// `C = 4 m n eps^2 gamma / ((gamma - 1) sigma0 t_min)`, the constant of the
/// descent surrogate `H_k + C gamma^{-k}`.
pub fn surrogate_constant(m: usize, n: usize, epsilon_hat: f64, gamma: f64, sigma0: f64, t_min: usize) -> f64 {
    4.0 * m as f64 * n as f64 * epsilon_hat * epsilon_hat * gamma / ((gamma - 1.0) * sigma0 * t_min as f64)
}
