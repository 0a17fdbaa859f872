//! Local objectives, synthetic data and sharding.
//!
//! Two objectives are supported: least squares `(1/2m_i) sum (<a,w> - b)^2`
//! and ridge-regularised logistic loss
//! `(1/m_i) sum (ln(1 + e^<a,w>) - b<a,w>) + (lambda/2)||w||^2`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::pme::sample_coordinates;
use crate::rng::{self, Purpose};

/// Ridge weight used by the logistic objective unless configured otherwise.
pub const DEFAULT_RIDGE: f64 = 0.001;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch index {index} out of range for {rows} rows")]
    BatchIndexOutOfRange { index: usize, rows: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    LinearRegression,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Ridge weight; ignored for least squares.
    #[serde(default)]
    pub ridge: f64,
}

impl LossSpec {
    pub fn linear() -> Self {
        LossSpec { kind: LossKind::LinearRegression, ridge: 0.0 }
    }

    pub fn logistic(ridge: f64) -> Self {
        LossSpec { kind: LossKind::Logistic, ridge }
    }

    fn ridge(&self) -> f64 {
        match self.kind {
            LossKind::LinearRegression => 0.0,
            LossKind::Logistic => self.ridge,
        }
    }
}

/// One node's private samples, features stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    node_id: usize,
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(node_id: usize, dim: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self, LossError> {
        if dim == 0 {
            return Err(LossError::InvalidSize("feature dimension must be positive".into()));
        }
        if targets.is_empty() {
            return Err(LossError::InvalidSize(format!("node {node_id} has no samples")));
        }
        if features.len() != dim * targets.len() {
            return Err(LossError::DimensionMismatch { expected: dim * targets.len(), found: features.len() });
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(LossError::InvalidData(format!("node {node_id} has non-finite entries")));
        }
        Ok(Dataset { node_id, dim, features, targets })
    }

    pub fn node_id(&self) -> usize {
        self.node_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn check_labels(&self) -> Result<(), LossError> {
        if self.targets.iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(LossError::InvalidData(format!("node {} has labels outside {{0,1}}", self.node_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w_star: Vec<f64>,
    pub sparsity: f64,
    pub noise_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    Iid,
    /// Each node holds samples of at most this many label values.
    LabelSkew(usize),
}

#[derive(Clone, Debug)]
pub struct LinearDataOptions {
    pub n: usize,
    pub samples_per_node: usize,
    pub m: usize,
    pub sparsity: f64,
    pub noise_scale: f64,
    /// Scale node `i`'s features by `1 + 0.5 i/m`.
    pub heterogeneous: bool,
    pub seed: u64,
}

impl LinearDataOptions {
    pub fn new(n: usize, samples_per_node: usize, m: usize, seed: u64) -> Self {
        LinearDataOptions { n, samples_per_node, m, sparsity: 0.01, noise_scale: 0.5, heterogeneous: false, seed }
    }
}

#[derive(Clone, Debug)]
pub struct LogisticDataOptions {
    pub n: usize,
    pub samples_per_node: usize,
    pub m: usize,
    pub sparsity: f64,
    pub shard: ShardPolicy,
    pub seed: u64,
}

impl LogisticDataOptions {
    pub fn new(n: usize, samples_per_node: usize, m: usize, seed: u64) -> Self {
        LogisticDataOptions { n, samples_per_node, m, sparsity: 0.5, shard: ShardPolicy::Iid, seed }
    }
}

fn check_sizes(n: usize, samples_per_node: usize, m: usize, sparsity: f64) -> Result<(), LossError> {
    if n == 0 || samples_per_node == 0 || m == 0 {
        return Err(LossError::InvalidSize(format!(
            "need n, samples_per_node, m >= 1 (got {n}, {samples_per_node}, {m})"
        )));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(LossError::InvalidSize(format!("sparsity must lie in (0, 1], got {sparsity}")));
    }
    Ok(())
}

/// Sparse truth with `ceil(sparsity n)` entries drawn from `[0.5, 2]` with a
/// random sign on a uniformly random support.
fn sparse_truth(n: usize, sparsity: f64, seed: u64) -> Vec<f64> {
    let k = ((sparsity * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut rng = rng::stream(seed, Purpose::Data, &[0]);
    let support = sample_coordinates(n, k, &mut rng).expect("1 <= k <= n");
    let mut w = vec![0.0; n];
    for i in support {
        let mag: f64 = rng.gen_range(0.5..=2.0);
        w[i] = if rng.gen::<bool>() { mag } else { -mag };
    }
    w
}

fn gaussian_rows<R: Rng>(rng: &mut R, rows: usize, n: usize) -> Vec<f64> {
    (0..rows * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn gen_linear_regression(opts: &LinearDataOptions) -> Result<(GroundTruth, Vec<Dataset>), LossError> {
    check_sizes(opts.n, opts.samples_per_node, opts.m, opts.sparsity)?;
    if !(opts.noise_scale >= 0.0 && opts.noise_scale.is_finite()) {
        return Err(LossError::InvalidSize(format!("noise scale must be >= 0, got {}", opts.noise_scale)));
    }
    let n = opts.n;
    let w_star = sparse_truth(n, opts.sparsity, opts.seed);
    let datasets = (0..opts.m)
        .map(|node| {
            let mut rng = rng::stream(opts.seed, Purpose::Data, &[1, node as u64]);
            let mut features = gaussian_rows(&mut rng, opts.samples_per_node, n);
            if opts.heterogeneous {
                let scale = 1.0 + 0.5 * node as f64 / opts.m as f64;
                features.iter_mut().for_each(|v| *v *= scale);
            }
            let targets = features
                .chunks_exact(n)
                .map(|a| {
                    let e: f64 = rng.sample(StandardNormal);
                    linalg::dot(a, &w_star) + opts.noise_scale * e
                })
                .collect();
            Dataset::new(node, n, features, targets)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let truth = GroundTruth { w_star, sparsity: opts.sparsity, noise_scale: opts.noise_scale };
    Ok((truth, datasets))
}

pub fn gen_logistic(opts: &LogisticDataOptions) -> Result<(GroundTruth, Vec<Dataset>), LossError> {
    check_sizes(opts.n, opts.samples_per_node, opts.m, opts.sparsity)?;
    let n = opts.n;
    let w_star = sparse_truth(n, opts.sparsity, opts.seed);
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(opts.m * opts.samples_per_node);
    for node in 0..opts.m {
        let mut rng = rng::stream(opts.seed, Purpose::Data, &[2, node as u64]);
        let features = gaussian_rows(&mut rng, opts.samples_per_node, n);
        for a in features.chunks_exact(n) {
            let p = sigmoid(linalg::dot(a, &w_star));
            let b = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
            rows.push((a.to_vec(), b));
        }
    }
    let shards = match opts.shard {
        ShardPolicy::Iid => rows.chunks(opts.samples_per_node).map(<[_]>::to_vec).collect(),
        ShardPolicy::LabelSkew(c) => label_skew(rows, opts.m, c)?,
    };
    let datasets = shards
        .into_iter()
        .enumerate()
        .map(|(node, shard)| {
            let mut features = Vec::with_capacity(shard.len() * n);
            let mut targets = Vec::with_capacity(shard.len());
            for (a, b) in shard {
                features.extend_from_slice(&a);
                targets.push(b);
            }
            Dataset::new(node, n, features, targets)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let truth = GroundTruth { w_star, sparsity: opts.sparsity, noise_scale: 0.0 };
    Ok((truth, datasets))
}

type Sample = (Vec<f64>, f64);

/// Sorts samples by label and deals contiguous blocks. Node `i` is assigned
/// the label values `(i*c + t) mod L` for `t < c`; the samples of each label
/// are split evenly and in order among the nodes holding it.
fn label_skew(mut rows: Vec<Sample>, m: usize, c: usize) -> Result<Vec<Vec<Sample>>, LossError> {
    if c == 0 {
        return Err(LossError::InvalidSize("label skew needs at least one label per node".into()));
    }
    rows.sort_by(|x, y| x.1.total_cmp(&y.1));
    let mut labels: Vec<f64> = rows.iter().map(|r| r.1).collect();
    labels.dedup();
    let l = labels.len();
    let held: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let mut ls: Vec<usize> = (0..c.min(l)).map(|t| (i * c + t) % l).collect();
            ls.sort_unstable();
            ls.dedup();
            ls
        })
        .collect();
    let mut shards: Vec<Vec<(Vec<f64>, f64)>> = vec![Vec::new(); m];
    let mut start = 0;
    for (li, &label) in labels.iter().enumerate() {
        let end = start + rows[start..].iter().take_while(|r| r.1 == label).count();
        let holders: Vec<usize> = (0..m).filter(|i| held[*i].contains(&li)).collect();
        if holders.is_empty() {
            start = end;
            continue;
        }
        let count = end - start;
        for (h, &node) in holders.iter().enumerate() {
            let lo = start + count * h / holders.len();
            let hi = start + count * (h + 1) / holders.len();
            shards[node].extend(rows[lo..hi].iter().cloned());
        }
        start = end;
    }
    if let Some(empty) = shards.iter().position(Vec::is_empty) {
        return Err(LossError::InvalidSize(format!("label skew leaves node {empty} without samples")));
    }
    Ok(shards)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_dim(ds: &Dataset, w: &[f64]) -> Result<(), LossError> {
    if w.len() != ds.dim {
        return Err(LossError::DimensionMismatch { expected: ds.dim, found: w.len() });
    }
    Ok(())
}

fn check_batch(ds: &Dataset, batch: &[usize]) -> Result<(), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(&index) = batch.iter().find(|&&i| i >= ds.rows()) {
        return Err(LossError::BatchIndexOutOfRange { index, rows: ds.rows() });
    }
    Ok(())
}

fn sample_loss(kind: LossKind, margin: f64, b: f64) -> f64 {
    match kind {
        LossKind::LinearRegression => 0.5 * (margin - b) * (margin - b),
        LossKind::Logistic => softplus(margin) - b * margin,
    }
}

fn sample_residual(kind: LossKind, margin: f64, b: f64) -> f64 {
    match kind {
        LossKind::LinearRegression => margin - b,
        LossKind::Logistic => sigmoid(margin) - b,
    }
}

/// Local objective over the whole shard.
pub fn loss_value(spec: &LossSpec, ds: &Dataset, w: &[f64]) -> Result<f64, LossError> {
    check_dim(ds, w)?;
    let data: f64 = (0..ds.rows())
        .map(|i| sample_loss(spec.kind, linalg::dot(ds.row(i), w), ds.target(i)))
        .sum();
    Ok(data / ds.rows() as f64 + 0.5 * spec.ridge() * linalg::dot(w, w))
}

/// Objective restricted to `batch`, normalised by the batch size.
pub fn batch_loss(spec: &LossSpec, ds: &Dataset, w: &[f64], batch: &[usize]) -> Result<f64, LossError> {
    check_dim(ds, w)?;
    check_batch(ds, batch)?;
    let data: f64 = batch
        .iter()
        .map(|&i| sample_loss(spec.kind, linalg::dot(ds.row(i), w), ds.target(i)))
        .sum();
    Ok(data / batch.len() as f64 + 0.5 * spec.ridge() * linalg::dot(w, w))
}

/// Gradient of [`batch_loss`].
pub fn gradient(spec: &LossSpec, ds: &Dataset, w: &[f64], batch: &[usize]) -> Result<Vec<f64>, LossError> {
    check_dim(ds, w)?;
    check_batch(ds, batch)?;
    let mut g = vec![0.0; ds.dim];
    for &i in batch {
        let a = ds.row(i);
        let r = sample_residual(spec.kind, linalg::dot(a, w), ds.target(i));
        for (gj, aj) in g.iter_mut().zip(a) {
            *gj += r * aj;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let ridge = spec.ridge();
    for (gj, wj) in g.iter_mut().zip(w) {
        *gj = *gj * inv + ridge * wj;
    }
    Ok(g)
}

pub fn full_gradient(spec: &LossSpec, ds: &Dataset, w: &[f64]) -> Result<Vec<f64>, LossError> {
    let all: Vec<usize> = (0..ds.rows()).collect();
    gradient(spec, ds, w, &all)
}

/// Lipschitz constant of the local gradient: the top eigenvalue of
/// `(1/m_i) A^T A` for least squares, a quarter of it plus the ridge weight
/// for logistic loss.
pub fn lipschitz_bound(spec: &LossSpec, ds: &Dataset) -> f64 {
    let n = ds.dim;
    let rows = ds.rows() as f64;
    let apply = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..ds.rows() {
            let a = ds.row(i);
            let t = linalg::dot(a, x) / rows;
            for (yj, aj) in y.iter_mut().zip(a) {
                *yj += t * aj;
            }
        }
    };
    let top = linalg::lanczos_max(apply, n, 300, 1e-12);
    match spec.kind {
        LossKind::LinearRegression => top,
        LossKind::Logistic => 0.25 * top + spec.ridge,
    }
}

/// Sampled estimate of the largest `inf`-norm gap between gradients on two
/// batches of the same shard, over `w` in the box `||w||_inf <= 2 delta`.
///
/// Each trial picks a node, a point (a uniformly random corner of the box
/// with probability 1/2, otherwise a uniform interior point) and two
/// nonempty batches of uniformly random size. Trial `t` draws from its own
/// stream, so the estimate never decreases as `trials` grows.
pub fn epsilon_estimate(
    spec: &LossSpec,
    datasets: &[Dataset],
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<f64, LossError> {
    Ok(epsilon_trace(spec, datasets, delta, trials, seed)?.last().copied().unwrap_or(0.0))
}

/// Running maximum after each trial of [`epsilon_estimate`].
pub fn epsilon_trace(
    spec: &LossSpec,
    datasets: &[Dataset],
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>, LossError> {
    if datasets.is_empty() {
        return Err(LossError::InvalidSize("no datasets".into()));
    }
    if !(delta > 0.0) {
        return Err(LossError::InvalidSize(format!("delta must be positive, got {delta}")));
    }
    let mut best = 0.0_f64;
    let mut trace = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = rng::stream(seed, Purpose::Epsilon, &[t as u64]);
        let ds = &datasets[rng.gen_range(0..datasets.len())];
        let radius = 2.0 * delta;
        let corner = rng.gen::<bool>();
        let w: Vec<f64> = (0..ds.dim)
            .map(|_| {
                if corner {
                    if rng.gen::<bool>() {
                        radius
                    } else {
                        -radius
                    }
                } else {
                    rng.gen_range(-radius..=radius)
                }
            })
            .collect();
        let rows = ds.rows();
        let draw_batch = |rng: &mut rng::Stream| {
            let size = rng.gen_range(1..=rows);
            sample_coordinates(rows, size, rng).expect("1 <= size <= rows")
        };
        let b1 = draw_batch(&mut rng);
        let b2 = draw_batch(&mut rng);
        let g1 = gradient(spec, ds, &w, &b1)?;
        let g2 = gradient(spec, ds, &w, &b2)?;
        let gap = g1.iter().zip(&g2).fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
        best = best.max(gap);
        trace.push(best);
    }
    Ok(trace)
}

/// Manifest describing a directory of per-node CSV shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub loss: LossSpec,
    pub n: usize,
    pub nodes: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub node_id: usize,
    pub file: String,
    pub rows: usize,
}

impl DataManifest {
    pub fn from_json(text: &str) -> Result<Self, LossError> {
        let manifest: DataManifest = serde_json::from_str(text)?;
        if manifest.n == 0 || manifest.nodes.is_empty() {
            return Err(LossError::InvalidSize("manifest needs n >= 1 and at least one node".into()));
        }
        for (i, entry) in manifest.nodes.iter().enumerate() {
            if entry.node_id != i {
                return Err(LossError::InvalidData(format!("manifest entry {i} has node_id {}", entry.node_id)));
            }
            let p = Path::new(&entry.file);
            if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
                return Err(LossError::InvalidData(format!("manifest file {:?} must be a plain relative name", entry.file)));
            }
        }
        Ok(manifest)
    }
}

/// Writes `feature_0..feature_{n-1},target` rows.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), LossError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..ds.dim).map(|j| format!("feature_{j}")).collect();
    header.push("target".into());
    w.write_record(&header)?;
    for i in 0..ds.rows() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", ds.target(i)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_dataset_csv<R: Read>(input: R, node_id: usize) -> Result<Dataset, LossError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let cols = header.len();
    if cols < 2 {
        return Err(LossError::InvalidData("need at least one feature column and a target".into()));
    }
    for (j, name) in header.iter().take(cols - 1).enumerate() {
        if name != format!("feature_{j}") {
            return Err(LossError::InvalidData(format!("column {j} is {name:?}, expected feature_{j}")));
        }
    }
    if &header[cols - 1] != "target" {
        return Err(LossError::InvalidData("last column must be target".into()));
    }
    let dim = cols - 1;
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                LossError::InvalidData(format!("row {}: column {j} is not a number: {field:?}", line + 1))
            })?;
            if j == dim {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    Dataset::new(node_id, dim, features, targets)
}

/// Writes one CSV per node plus `manifest.json` into `dir`.
pub fn write_datasets(
    dir: &Path,
    spec: &LossSpec,
    datasets: &[Dataset],
    truth: Option<&GroundTruth>,
) -> Result<PathBuf, LossError> {
    fs::create_dir_all(dir)?;
    let n = datasets.first().map_or(0, Dataset::dim);
    let mut nodes = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let file = format!("node_{:04}.csv", ds.node_id);
        write_dataset_csv(ds, fs::File::create(dir.join(&file))?)?;
        nodes.push(ManifestEntry { node_id: ds.node_id, file, rows: ds.rows() });
    }
    let manifest = DataManifest { loss: *spec, n, nodes, ground_truth: truth.cloned() };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_datasets(manifest_path: &Path) -> Result<(DataManifest, Vec<Dataset>), LossError> {
    let manifest = DataManifest::from_json(&fs::read_to_string(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut datasets = Vec::with_capacity(manifest.nodes.len());
    for entry in &manifest.nodes {
        let ds = parse_dataset_csv(fs::File::open(base.join(&entry.file))?, entry.node_id)?;
        if ds.dim() != manifest.n {
            return Err(LossError::DimensionMismatch { expected: manifest.n, found: ds.dim() });
        }
        if ds.rows() != entry.rows {
            return Err(LossError::InvalidData(format!(
                "{} has {} rows, manifest says {}",
                entry.file,
                ds.rows(),
                entry.rows
            )));
        }
        if manifest.loss.kind == LossKind::Logistic {
            ds.check_labels()?;
        }
        datasets.push(ds);
    }
    Ok((manifest, datasets))
}
