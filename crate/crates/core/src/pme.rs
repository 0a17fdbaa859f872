//! Partial message exchange.
//!
//! A sender transmits `s` uniformly chosen coordinates of its parameter
//! vector. The receiver averages each coordinate over the senders that
//! actually transmitted it and keeps its own value where nobody did.
//!
//! Transmission is accounted as a dense vector in which every unselected
//! coordinate costs one bit and every selected coordinate a full binary64.
//! A selected coordinate whose value happens to be zero is still a
//! transmitted coordinate: it counts towards the per-coordinate sender count
//! and is charged a short 8-bit mark instead of 64 bits.

use num_rational::BigRational;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bits charged for an unselected coordinate.
pub const SKIP_BITS: u64 = 1;
/// Bits charged for a selected coordinate carrying a nonzero value.
pub const VALUE_BITS: u64 = 64;
/// Bits charged for a selected coordinate whose value is zero.
pub const ZERO_MARK_BITS: u64 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PmeError {
    #[error("invalid size: s = {s} must satisfy 1 <= s <= n = {n}")]
    InvalidSize { n: usize, s: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("sender {0} appears more than once")]
    DuplicateSender(usize),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

/// Draws a uniform `s`-subset of `0..n` (partial Fisher-Yates), returned in
/// ascending order.
pub fn sample_coordinates<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> Result<Vec<usize>, PmeError> {
    if s == 0 || s > n {
        return Err(PmeError::InvalidSize { n, s });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..s {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(s);
    pool.sort_unstable();
    Ok(pool)
}

/// Sparse wire object: a sorted set of coordinates and their values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparseMessage {
    sender: usize,
    #[serde(skip)]
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMessage {
    pub fn new(sender: usize, dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self, PmeError> {
        if indices.is_empty() || indices.len() > dim {
            return Err(PmeError::InvalidSize { n: dim, s: indices.len() });
        }
        if indices.len() != values.len() {
            return Err(PmeError::InvalidMessage(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PmeError::InvalidMessage("indices must be strictly increasing".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(PmeError::InvalidMessage(format!("index {last} out of range for dim {dim}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PmeError::InvalidMessage("values must be finite".into()));
        }
        Ok(SparseMessage { sender, dim, indices, values })
    }

    /// Message carrying `w` restricted to the given coordinates.
    pub fn from_selection(sender: usize, w: &[f64], indices: Vec<usize>) -> Result<Self, PmeError> {
        let values = indices
            .iter()
            .map(|&i| w.get(i).copied().ok_or(PmeError::InvalidMessage(format!("index {i} out of range"))))
            .collect::<Result<Vec<_>, _>>()?;
        SparseMessage::new(sender, w.len(), indices, values)
    }

    pub fn sender(&self) -> usize {
        self.sender
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of selected coordinates.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Selected coordinates whose value is zero.
    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 0.0).count()
    }

    /// Dense form: unselected coordinates are zero.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Samples `s` coordinates of `w` and packages them as a message from
/// `sender`.
pub fn make_sparse_message<R: Rng + ?Sized>(
    sender: usize,
    w: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<SparseMessage, PmeError> {
    let indices = sample_coordinates(w.len(), s, rng)?;
    SparseMessage::from_selection(sender, w, indices)
}

/// Transmitted bits: one per unselected coordinate, 64 per nonzero selected
/// value and an 8-bit mark per zero selected value. Without zeros this is
/// `63 s + n`.
pub fn bit_cost(msg: &SparseMessage) -> u64 {
    let z = msg.zero_count() as u64;
    let s = msg.len() as u64;
    SKIP_BITS * (msg.dim as u64 - s) + VALUE_BITS * (s - z) + ZERO_MARK_BITS * z
}

/// Bits for sending a full binary64 vector of length `n`.
pub fn dense_bit_cost(n: usize) -> u64 {
    VALUE_BITS * n as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub vbar: Vec<f64>,
    /// Number of senders that transmitted each coordinate.
    pub lambda: Vec<u32>,
    /// True where no sender transmitted the coordinate and the receiver's own
    /// value was kept.
    pub fallback_mask: Vec<bool>,
}

/// Coordinate-wise average of received messages, falling back to `own_w`
/// where no message carries the coordinate.
///
/// Sums run in ascending sender order regardless of the order of `messages`.
pub fn aggregate(own_w: &[f64], messages: &[SparseMessage]) -> Result<AggregationResult, PmeError> {
    let n = own_w.len();
    let mut order: Vec<&SparseMessage> = messages.iter().collect();
    order.sort_by_key(|m| m.sender);
    for pair in order.windows(2) {
        if pair[0].sender == pair[1].sender {
            return Err(PmeError::DuplicateSender(pair[0].sender));
        }
    }
    if let Some(bad) = order.iter().find(|m| m.dim != n) {
        return Err(PmeError::DimensionMismatch { expected: n, found: bad.dim });
    }

    let mut sums = vec![0.0; n];
    let mut lambda = vec![0u32; n];
    for msg in order {
        for (&i, &v) in msg.indices.iter().zip(&msg.values) {
            sums[i] += v;
            lambda[i] += 1;
        }
    }
    let vbar = sums
        .iter()
        .zip(&lambda)
        .zip(own_w)
        .map(|((&sum, &count), &own)| if count > 0 { sum / count as f64 } else { own })
        .collect();
    let fallback_mask = lambda.iter().map(|&c| c == 0).collect();
    Ok(AggregationResult { vbar, lambda, fallback_mask })
}

/// Moments of the mean of a simple random sample of size `r` drawn without
/// replacement from `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrsworMoments {
    pub population_mean: f64,
    /// `Var(x_hat | r) = (q - r) / (r q (q - 1)) * sum (x_j - mean)^2`.
    pub variance: f64,
    /// `E[x_hat^2 | r] = mean^2 + variance`.
    pub second_moment: f64,
    /// `(1/q) sum x_j^2`.
    pub second_moment_bound: f64,
    pub bound_holds: bool,
}

fn check_srswor_size(q: usize, r: usize) -> Result<(), PmeError> {
    if q == 0 || r == 0 || r > q {
        return Err(PmeError::InvalidSize { n: q, s: r });
    }
    Ok(())
}

pub fn srswor_moments(x: &[f64], r: usize) -> Result<SrsworMoments, PmeError> {
    let q = x.len();
    check_srswor_size(q, r)?;
    let qf = q as f64;
    let mean = x.iter().sum::<f64>() / qf;
    let variance = if q == 1 || r == q {
        0.0
    } else {
        let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
        (q - r) as f64 / (r as f64 * qf * (qf - 1.0)) * ss
    };
    let second_moment = mean * mean + variance;
    let second_moment_bound = x.iter().map(|v| v * v).sum::<f64>() / qf;
    let slack = 1e-12 * second_moment_bound.abs().max(f64::MIN_POSITIVE);
    Ok(SrsworMoments {
        population_mean: mean,
        variance,
        second_moment,
        second_moment_bound,
        bound_holds: second_moment <= second_moment_bound + slack,
    })
}

/// Exact rational subset-mean variance for integer data.
pub fn srswor_variance_exact(x: &[i64], r: usize) -> Result<BigRational, PmeError> {
    let q = x.len();
    check_srswor_size(q, r)?;
    let zero = BigRational::from_integer(0.into());
    if q == 1 || r == q {
        return Ok(zero);
    }
    let q_int = BigRational::from_integer((q as i64).into());
    let mean = x.iter().fold(zero.clone(), |acc, &v| acc + BigRational::from_integer(v.into())) / &q_int;
    let ss = x.iter().fold(zero, |acc, &v| {
        let d = BigRational::from_integer(v.into()) - &mean;
        acc + &d * &d
    });
    let factor = BigRational::new(((q - r) as i64).into(), ((r * q * (q - 1)) as i64).into());
    Ok(factor * ss)
}

/// Exact rational `E[x_hat^2 | r]` for integer data.
pub fn srswor_second_moment_exact(x: &[i64], r: usize) -> Result<BigRational, PmeError> {
    let variance = srswor_variance_exact(x, r)?;
    let q = BigRational::from_integer((x.len() as i64).into());
    let mean = x
        .iter()
        .fold(BigRational::from_integer(0.into()), |acc, &v| acc + BigRational::from_integer(v.into()))
        / q;
    Ok(&mean * &mean + variance)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageDoc {
    sender: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMessage {
    /// Debug form `{"sender": int, "indices": [int], "values": [float]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_json(text: &str, dim: usize) -> Result<Self, PmeError> {
        let doc: MessageDoc =
            serde_json::from_str(text).map_err(|e| PmeError::InvalidMessage(format!("json: {e}")))?;
        SparseMessage::new(doc.sender, dim, doc.indices, doc.values)
    }
}
