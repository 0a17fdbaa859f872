//! Offline diagnostics: Monte-Carlo checks of the PME estimator, rate fits,
//! consensus error and parameter sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_rational::BigRational;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::config::{KappaSpec, PerNode, RunConfig};
use crate::engine::output::Summary;
use crate::engine::{EngineError, RunStatus, Simulation};
use crate::losses::{self, Dataset, LossKind, LossSpec};
use crate::pme::sample_coordinates;
use crate::rng::{self, Purpose};

/// Values at or below this are treated as exact zeros by [`fit_linear_rate`].
pub const RATE_FLOOR: f64 = 1e-14;
pub const MIN_RATE_POINTS: usize = 10;
/// Standard errors allowed between an empirical mean and its target.
pub const STDERR_MULTIPLIER: f64 = 4.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("{found} usable points, need at least {needed}")]
    TooFewPoints { found: usize, needed: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanCheck {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub target: Vec<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasednessReport {
    pub q: usize,
    pub n: usize,
    pub s: usize,
    pub trials: usize,
    /// Mean of `vbar_l` over trials with `lambda_l > 0`, against `wbar`.
    pub conditional: MeanCheck,
    /// Trials that contributed to each coordinate of `conditional`.
    pub conditional_counts: Vec<usize>,
    /// Mean of `(1/q) sum_j [l in T_j] w_jl` over all trials, against
    /// `(s/n) wbar`.
    pub naive_scaled: MeanCheck,
    /// The same naive mean against `wbar`; expected to fail when `s < n`.
    pub naive_unscaled: MeanCheck,
}

impl UnbiasednessReport {
    /// Conditional mean hits `wbar` and the naive mean hits `(s/n) wbar`.
    pub fn pass(&self) -> bool {
        self.conditional.pass && self.naive_scaled.pass
    }
}

#[derive(Default)]
struct Moments {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_stderr(&self) -> (f64, f64) {
        if self.count == 0 {
            return (f64::NAN, f64::NAN);
        }
        let c = self.count as f64;
        let mean = self.sum / c;
        if self.count == 1 {
            return (mean, 0.0);
        }
        let var = ((self.sum_sq - c * mean * mean) / (c - 1.0)).max(0.0);
        (mean, (var / c).sqrt())
    }
}

fn mean_check(moments: &[Moments], target: Vec<f64>) -> MeanCheck {
    let (mean, stderr): (Vec<f64>, Vec<f64>) = moments.iter().map(Moments::mean_stderr).unzip();
    let pass = mean.iter().zip(&stderr).zip(&target).all(|((m, se), t)| {
        let slack = 1e-12 * t.abs().max(1.0);
        (m - t).abs() <= STDERR_MULTIPLIER * se + slack
    });
    MeanCheck { mean, stderr, target, pass }
}

/// Simulates `trials` rounds in which each of the `q` vectors sends `s`
/// uniformly chosen coordinates, and compares the λ-count average and the
/// naive `1/q` average with their expected values.
pub fn unbiasedness_test(
    vectors: &[Vec<f64>],
    s: usize,
    trials: usize,
    seed: u64,
) -> Result<UnbiasednessReport, AnalysisError> {
    let q = vectors.len();
    let n = vectors.first().map_or(0, Vec::len);
    if q == 0 || n == 0 || vectors.iter().any(|v| v.len() != n) {
        return Err(AnalysisError::InvalidSize("need q >= 1 vectors of one common length n >= 1".into()));
    }
    if s == 0 || s > n {
        return Err(AnalysisError::InvalidSize(format!("s = {s} outside 1..={n}")));
    }
    if trials < 1000 {
        return Err(AnalysisError::InvalidSize(format!("need at least 1000 trials, got {trials}")));
    }
    let wbar: Vec<f64> = (0..n).map(|l| vectors.iter().map(|v| v[l]).sum::<f64>() / q as f64).collect();
    let mut rng = rng::stream(seed, Purpose::Oracle, &[q as u64, n as u64, s as u64]);
    let mut cond: Vec<Moments> = (0..n).map(|_| Moments::default()).collect();
    let mut naive: Vec<Moments> = (0..n).map(|_| Moments::default()).collect();
    let mut sums = vec![0.0; n];
    let mut lambda = vec![0usize; n];
    for _ in 0..trials {
        sums.iter_mut().for_each(|v| *v = 0.0);
        lambda.iter_mut().for_each(|v| *v = 0);
        for v in vectors {
            for l in sample_coordinates(n, s, &mut rng).expect("1 <= s <= n") {
                sums[l] += v[l];
                lambda[l] += 1;
            }
        }
        for l in 0..n {
            if lambda[l] > 0 {
                cond[l].push(sums[l] / lambda[l] as f64);
            }
            naive[l].push(sums[l] / q as f64);
        }
    }
    let ratio = s as f64 / n as f64;
    Ok(UnbiasednessReport {
        q,
        n,
        s,
        trials,
        conditional_counts: cond.iter().map(|m| m.count).collect(),
        conditional: mean_check(&cond, wbar.clone()),
        naive_scaled: mean_check(&naive, wbar.iter().map(|v| ratio * v).collect()),
        naive_unscaled: mean_check(&naive, wbar),
    })
}

/// Exhaustive `Var(x_hat)` and `E[x_hat^2]` over all `r`-subsets of `x`.
pub fn srswor_enumeration(x: &[i64], r: usize) -> Result<(BigRational, BigRational), AnalysisError> {
    let q = x.len();
    if q == 0 || r == 0 || r > q || q > 20 {
        return Err(AnalysisError::InvalidSize(format!("need 1 <= r <= q <= 20, got q={q}, r={r}")));
    }
    let int = |v: i64| BigRational::from_integer(v.into());
    let mut count = 0i64;
    let mut sum = int(0);
    let mut sum_sq = int(0);
    for mask in 0u32..(1 << q) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let total: i64 = (0..q).filter(|j| mask & (1 << j) != 0).map(|j| x[j]).sum();
        let mean = BigRational::new(total.into(), (r as i64).into());
        sum_sq += &mean * &mean;
        sum += mean;
        count += 1;
    }
    let second = sum_sq / int(count);
    let mean = sum / int(count);
    Ok((&second - &mean * &mean, second))
}

/// Which slice of a trajectory a rate fit uses.
#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum WindowPolicy {
    /// Iterations between 25% and 75% of the trajectory.
    #[default]
    MiddleHalf,
    /// Fractions `[start, end)` of the trajectory length.
    Fraction(f64, f64),
    /// Explicit iteration range `[start, end)`.
    Range(usize, usize),
}


impl WindowPolicy {
    pub fn bounds(&self, len: usize) -> (usize, usize) {
        let frac = |a: f64, b: f64| {
            let start = (a * len as f64).floor() as usize;
            let end = (b * len as f64).ceil() as usize;
            (start.min(len), end.min(len))
        };
        match *self {
            WindowPolicy::MiddleHalf => frac(0.25, 0.75),
            WindowPolicy::Fraction(a, b) => frac(a, b),
            WindowPolicy::Range(a, b) => (a.min(len), b.min(len)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    /// Change of `ln y` per iteration.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub window: (usize, usize),
    pub points: usize,
    /// The log-values are constant, so `r2` is reported as 0.
    pub degenerate: bool,
}

/// Least-squares fit of `ln y_k` against `k` over the window, skipping values
/// at or below [`RATE_FLOOR`].
pub fn fit_linear_rate(values: &[f64], policy: WindowPolicy) -> Result<RateFit, AnalysisError> {
    let window = policy.bounds(values.len());
    let pts: Vec<(f64, f64)> = (window.0..window.1)
        .filter(|&k| values[k].is_finite() && values[k] > RATE_FLOOR)
        .map(|k| (k as f64, values[k].ln()))
        .collect();
    if pts.len() < MIN_RATE_POINTS {
        return Err(AnalysisError::TooFewPoints { found: pts.len(), needed: MIN_RATE_POINTS });
    }
    let c = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / c;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / c;
    let spread = pts.iter().map(|p| (p.1 - my).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * my.abs().max(1.0) {
        return Ok(RateFit { slope: 0.0, intercept: my, r2: 0.0, window, points: pts.len(), degenerate: true });
    }
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = (1.0 - ss_res / syy).clamp(0.0, 1.0);
    Ok(RateFit { slope, intercept, r2, window, points: pts.len(), degenerate: false })
}

/// `||W - Pi||_F^2` for one snapshot, rows being node vectors.
pub fn consensus_error(w: &[Vec<f64>]) -> f64 {
    let m = w.len();
    let n = w.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; n];
    for row in w {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    w.iter().map(|row| row.iter().zip(&mean).map(|(v, a)| (v - a) * (v - a)).sum::<f64>()).sum()
}

pub fn consensus_trajectory(history: &[Vec<Vec<f64>>]) -> Vec<f64> {
    history.iter().map(|w| consensus_error(w)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: LossKind,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Central-difference check of the full-batch gradient on random problems
/// with `n <= 20`. The error of a coordinate is
/// `|g - fd| / max(1, |g|, |fd|)`.
pub fn gradcheck(spec: &LossSpec, trials: usize, seed: u64) -> Result<GradcheckReport, AnalysisError> {
    let mut worst = 0.0_f64;
    for t in 0..trials {
        let mut rng = rng::stream(seed, Purpose::Oracle, &[t as u64]);
        let n = rng.gen_range(1..=20);
        let rows = rng.gen_range(1..=30);
        let features: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
        let targets: Vec<f64> = (0..rows)
            .map(|_| match spec.kind {
                LossKind::LinearRegression => rng.sample(StandardNormal),
                LossKind::Logistic => f64::from(u8::from(rng.gen::<bool>())),
            })
            .collect();
        let ds = Dataset::new(0, n, features, targets)?;
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let g = losses::full_gradient(spec, &ds, &w)?;
        for l in 0..n {
            let orig = w[l];
            w[l] = orig + GRADCHECK_STEP;
            let up = losses::loss_value(spec, &ds, &w)?;
            w[l] = orig - GRADCHECK_STEP;
            let down = losses::loss_value(spec, &ds, &w)?;
            w[l] = orig;
            let fd = (up - down) / (2.0 * GRADCHECK_STEP);
            worst = worst.max((g[l] - fd).abs() / g[l].abs().max(fd.abs()).max(1.0));
        }
    }
    Ok(GradcheckReport { kind: spec.kind, trials, max_rel_err: worst, tolerance: GRADCHECK_TOL, pass: worst < GRADCHECK_TOL })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TransmissionRate,
    ParticipationRate,
    CommPeriod,
    Degree,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::TransmissionRate => "transmission_rate",
            SweepAxis::ParticipationRate => "participation_rate",
            SweepAxis::CommPeriod => "comm_period",
            SweepAxis::Degree => "degree",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [SweepAxis::TransmissionRate, SweepAxis::ParticipationRate, SweepAxis::CommPeriod, SweepAxis::Degree]
            .into_iter()
            .find(|a| a.name() == name)
    }

    /// `template` with this axis set to `value` and the seed replaced.
    pub fn apply(&self, template: &RunConfig, value: f64, seed: u64) -> Result<RunConfig, EngineError> {
        let mut cfg = template.clone();
        cfg.seed = seed;
        let as_count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(EngineError::InvalidConfig(format!("{} needs positive integers, got {v}", self.name())))
            }
        };
        match self {
            SweepAxis::TransmissionRate => {
                cfg.engine.s = None;
                cfg.engine.s_ratio = Some(value);
            }
            SweepAxis::ParticipationRate => cfg.engine.nu = PerNode::Scalar(value),
            SweepAxis::CommPeriod => {
                cfg.engine.kappa = KappaSpec::Fixed(as_count(value)?);
                cfg.engine.k0 = None;
            }
            SweepAxis::Degree => cfg.graph.degree = Some(as_count(value)? as usize),
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub axis_value: f64,
    pub seed: u64,
    pub final_objective: Option<f64>,
    /// `||avg_K - w*||^2 / n` when the ground truth is known.
    pub mse_to_truth: Option<f64>,
    pub iters: Option<usize>,
    pub total_bits: Option<u64>,
    /// `converged`, `max_iters` or `error`.
    pub status: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Value-major: cell `(v, s)` sits at `v * seeds.len() + s`.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    fn per_value<T>(&self, f: impl Fn(&SweepCell) -> T) -> Vec<Vec<T>> {
        self.cells.chunks(self.seeds.len()).map(|row| row.iter().map(&f).collect()).collect()
    }

    pub fn final_objectives(&self) -> Vec<Vec<Option<f64>>> {
        self.per_value(|c| c.final_objective)
    }

    pub fn iters_to_converge(&self) -> Vec<Vec<Option<usize>>> {
        self.per_value(|c| if c.status == "converged" { c.iters } else { None })
    }

    pub fn total_bits(&self) -> Vec<Vec<Option<u64>>> {
        self.per_value(|c| c.total_bits)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "axis_value,seed,final_objective,iters,total_bits,mse_to_truth,status")?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.axis_value,
                c.seed,
                opt(c.final_objective.map(|v| format!("{v:e}"))),
                opt(c.iters.map(|v| v.to_string())),
                opt(c.total_bits.map(|v| v.to_string())),
                opt(c.mse_to_truth.map(|v| format!("{v:e}"))),
                c.status
            )?;
        }
        Ok(())
    }

    /// Writes `sweep_<axis>.csv` and `sweep_<axis>.json` into `dir`.
    pub fn write(&self, dir: &Path, template: &RunConfig) -> Result<(PathBuf, PathBuf), AnalysisError> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("sweep_{}.csv", self.axis.name()));
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(&csv_path, buf)?;
        let manifest = serde_json::json!({
            "axis": self.axis.name(),
            "values": self.values,
            "seeds": self.seeds,
            "csv": csv_path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "template": template,
            "cells": self.cells,
        });
        let json_path = dir.join(format!("sweep_{}.json", self.axis.name()));
        fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok((csv_path, json_path))
    }
}

fn run_cell(template: &RunConfig, base_dir: &Path, axis: SweepAxis, value: f64, seed: u64) -> SweepCell {
    let outcome = (|| -> Result<SweepCell, EngineError> {
        let cfg = axis.apply(template, value, seed)?;
        let sim = Simulation::from_config(&cfg, base_dir)?;
        let out = sim.run()?;
        let summary = Summary::from_output(&out);
        let avg = out.average_w();
        let mse = sim.problem.truth.as_ref().map(|t| {
            t.w_star.iter().zip(&avg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / avg.len() as f64
        });
        Ok(SweepCell {
            axis_value: value,
            seed,
            final_objective: Some(summary.final_objective),
            mse_to_truth: mse,
            iters: Some(summary.iters),
            total_bits: Some(summary.total_bits),
            status: match out.status {
                RunStatus::Converged => "converged".into(),
                RunStatus::MaxIters => "max_iters".into(),
            },
            error: None,
        })
    })();
    outcome.unwrap_or_else(|e| SweepCell {
        axis_value: value,
        seed,
        final_objective: None,
        mse_to_truth: None,
        iters: None,
        total_bits: None,
        status: "error".into(),
        error: Some(e.to_string()),
    })
}

/// Runs the engine once per `(value, seed)` pair. Failing cells are recorded
/// with status `error` and do not stop the sweep.
pub fn sweep(
    template: &RunConfig,
    base_dir: &Path,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepResult, AnalysisError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(AnalysisError::InvalidSize("sweep needs at least one value and one seed".into()));
    }
    let pairs: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let cells = pairs.par_iter().map(|&(v, s)| run_cell(template, base_dir, axis, v, s)).collect();
    Ok(SweepResult { axis, values: values.to_vec(), seeds: seeds.to_vec(), cells })
}
