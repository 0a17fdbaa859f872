//! Communication graphs and the mixing matrix built from them.
//!
//! Only regular, connected graphs are produced here. With `B[j][i] = 1/|N_i|`
//! for `j in N_i`, regularity is exactly what makes `B` doubly stochastic, and
//! non-bipartiteness is what keeps the spectral gap `zeta` below one.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::{self, Purpose};

/// Restarts allowed for the random regular generator.
pub const DEFAULT_MAX_RETRIES: usize = 1000;

/// `zeta` at or above `1 - ZETA_MARGIN` is treated as no contraction.
pub const ZETA_MARGIN: f64 = 1e-10;

const STOCHASTIC_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 100_000;
const JACOBI_MAX_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("no connected non-bipartite graph found after {0} attempts")]
    NotConnected(usize),
    #[error("mixing matrix does not contract (zeta = {zeta}); graph is bipartite or disconnected")]
    BipartiteOrDisconnected { zeta: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not doubly stochastic (max row/column deviation {0:e})")]
    NotStochastic(f64),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphKind {
    OddRing,
    Torus2D,
    KRegularRandom,
    Complete,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GraphKind::OddRing => "OddRing",
            GraphKind::Torus2D => "Torus2D",
            GraphKind::KRegularRandom => "KRegularRandom",
            GraphKind::Complete => "Complete",
        };
        f.write_str(name)
    }
}

/// Undirected, regular, connected graph stored as sorted neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    kind: GraphKind,
    neighbors: Vec<Vec<usize>>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    m: usize,
    kind: GraphKind,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Wraps explicit neighbor lists after checking every graph invariant.
    pub fn from_neighbors(kind: GraphKind, neighbors: Vec<Vec<usize>>) -> Result<Self, TopologyError> {
        let g = Graph { kind, neighbors, seed: 0 };
        g.check()?;
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Common degree of every node.
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_sets(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn is_connected(&self) -> bool {
        is_connected(&self.neighbors)
    }

    pub fn is_bipartite(&self) -> bool {
        is_bipartite(&self.neighbors)
    }

    fn check(&self) -> Result<(), TopologyError> {
        let m = self.neighbors.len();
        if m == 0 {
            return Err(TopologyError::InvalidGraph("graph has no nodes".into()));
        }
        let degree = self.neighbors[0].len();
        for (i, ns) in self.neighbors.iter().enumerate() {
            if ns.len() != degree {
                return Err(TopologyError::InvalidGraph(format!(
                    "node {i} has degree {} but node 0 has degree {degree}; graph must be regular",
                    ns.len()
                )));
            }
            for w in ns.windows(2) {
                if w[0] >= w[1] {
                    return Err(TopologyError::InvalidGraph(format!(
                        "neighbors of node {i} are not strictly increasing"
                    )));
                }
            }
            for &j in ns {
                if j >= m {
                    return Err(TopologyError::InvalidGraph(format!("node {i} lists out-of-range neighbor {j}")));
                }
                if j == i {
                    return Err(TopologyError::InvalidGraph(format!("node {i} has a self-loop")));
                }
                if self.neighbors[j].binary_search(&i).is_err() {
                    return Err(TopologyError::InvalidGraph(format!("edge {i}->{j} has no reverse edge")));
                }
            }
        }
        if !is_connected(&self.neighbors) {
            return Err(TopologyError::InvalidGraph("graph is not connected".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc { m: self.node_count(), kind: self.kind, neighbors: self.neighbors.clone() };
        serde_json::to_string(&doc).expect("graph document serializes")
    }

    /// Parses `{"m": int, "kind": string, "neighbors": [[int]]}` and checks
    /// every invariant.
    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        if doc.neighbors.len() != doc.m {
            return Err(TopologyError::InvalidGraph(format!(
                "m = {} but {} neighbor lists given",
                doc.m,
                doc.neighbors.len()
            )));
        }
        Graph::from_neighbors(doc.kind, doc.neighbors)
    }
}

/// Builds a graph of the requested family.
///
/// `degree` is only consulted for [`GraphKind::KRegularRandom`]; the other
/// families fix their own degree (2 for rings, 4 for tori, `m - 1` for
/// complete graphs).
pub fn build_graph(kind: GraphKind, m: usize, degree: usize, seed: u64) -> Result<Graph, TopologyError> {
    build_graph_with_retries(kind, m, degree, seed, DEFAULT_MAX_RETRIES)
}

pub fn build_graph_with_retries(
    kind: GraphKind,
    m: usize,
    degree: usize,
    seed: u64,
    max_retries: usize,
) -> Result<Graph, TopologyError> {
    if m < 3 {
        return Err(TopologyError::InvalidDimension(format!("need m >= 3, got {m}")));
    }
    let neighbors = match kind {
        GraphKind::OddRing => {
            if m.is_multiple_of(2) {
                return Err(TopologyError::InvalidDimension(format!(
                    "ring size must be odd (even rings are bipartite), got {m}"
                )));
            }
            (0..m).map(|i| sorted(vec![(i + m - 1) % m, (i + 1) % m])).collect()
        }
        GraphKind::Torus2D => {
            let side = (m as f64).sqrt().round() as usize;
            if side * side != m || side.is_multiple_of(2) {
                return Err(TopologyError::InvalidDimension(format!(
                    "torus needs m = L^2 with odd L, got {m}"
                )));
            }
            (0..m)
                .map(|id| {
                    let (r, c) = (id / side, id % side);
                    sorted(vec![
                        ((r + side - 1) % side) * side + c,
                        ((r + 1) % side) * side + c,
                        r * side + (c + side - 1) % side,
                        r * side + (c + 1) % side,
                    ])
                })
                .collect()
        }
        GraphKind::Complete => (0..m).map(|i| (0..m).filter(|&j| j != i).collect()).collect(),
        GraphKind::KRegularRandom => {
            if degree == 0 || degree >= m || !(degree * m).is_multiple_of(2) {
                return Err(TopologyError::InvalidDimension(format!(
                    "random regular graph needs 0 < degree < m and degree*m even, got m={m}, degree={degree}"
                )));
            }
            random_regular(m, degree, seed, max_retries)?
        }
    };
    let g = Graph { kind, neighbors, seed };
    debug_assert!(g.check().is_ok());
    Ok(g)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Pairing model: stubs are matched one random pair at a time, rejecting
/// pairs that would form a self-loop or a repeated edge. A matching that gets
/// stuck, or a finished graph that is disconnected or bipartite, costs one
/// attempt.
fn random_regular(m: usize, degree: usize, seed: u64, max_retries: usize) -> Result<Vec<Vec<usize>>, TopologyError> {
    for attempt in 0..max_retries {
        let mut rng = rng::stream(seed, Purpose::Graph, &[m as u64, degree as u64, attempt as u64]);
        let mut stubs: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, degree)).collect();
        let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(degree); m];
        let mut stuck = false;
        while !stubs.is_empty() {
            let len = stubs.len();
            let mut chosen = None;
            for _ in 0..(50 * len) {
                let a = rng.gen_range(0..len);
                let b = rng.gen_range(0..len);
                if a != b && pair_ok(&adj, stubs[a], stubs[b]) {
                    chosen = Some((a, b));
                    break;
                }
            }
            if chosen.is_none() {
                chosen = (0..len)
                    .flat_map(|a| ((a + 1)..len).map(move |b| (a, b)))
                    .find(|&(a, b)| pair_ok(&adj, stubs[a], stubs[b]));
            }
            let Some((a, b)) = chosen else {
                stuck = true;
                break;
            };
            let (u, v) = (stubs[a], stubs[b]);
            adj[u].push(v);
            adj[v].push(u);
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            stubs.swap_remove(hi);
            stubs.swap_remove(lo);
        }
        if stuck {
            continue;
        }
        adj.iter_mut().for_each(|ns| ns.sort_unstable());
        if is_connected(&adj) && !is_bipartite(&adj) {
            return Ok(adj);
        }
    }
    Err(TopologyError::NotConnected(max_retries))
}

fn pair_ok(adj: &[Vec<usize>], u: usize, v: usize) -> bool {
    u != v && !adj[u].contains(&v)
}

pub fn is_connected(neighbors: &[Vec<usize>]) -> bool {
    let m = neighbors.len();
    if m == 0 {
        return true;
    }
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &neighbors[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == m
}

pub fn is_bipartite(neighbors: &[Vec<usize>]) -> bool {
    let m = neighbors.len();
    let mut color = vec![u8::MAX; m];
    for start in 0..m {
        if color[start] != u8::MAX {
            continue;
        }
        color[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if color[v] == u8::MAX {
                    color[v] = 1 - color[u];
                    queue.push_back(v);
                } else if color[v] == color[u] {
                    return false;
                }
            }
        }
    }
    true
}

/// Mixing matrix `B` with `B[j][i] = 1/|N_i|` for `j in N_i`, plus its
/// spectral gap.
#[derive(Clone, Debug)]
pub struct CommMatrix {
    m: usize,
    entries: Vec<f64>,
    degree: usize,
    zeta: f64,
}

impl CommMatrix {
    /// Builds `B` without rejecting non-contracting graphs.
    pub fn from_graph(g: &Graph) -> Result<Self, TopologyError> {
        let m = g.node_count();
        let degree = g.degree();
        let mut entries = vec![0.0; m * m];
        if degree > 0 {
            let w = 1.0 / degree as f64;
            for i in 0..m {
                for &j in g.neighbors(i) {
                    entries[j * m + i] = w;
                }
            }
        }
        let zeta = if degree == 0 { 1.0 } else { spectral_gap(&entries, m)? };
        Ok(CommMatrix { m, entries, degree, zeta })
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.m + col]
    }
}

/// Mixing matrix for `g`, rejecting graphs whose matrix does not contract.
pub fn communication_matrix(g: &Graph) -> Result<CommMatrix, TopologyError> {
    let b = CommMatrix::from_graph(g)?;
    if b.zeta >= 1.0 - ZETA_MARGIN {
        return Err(TopologyError::BipartiteOrDisconnected { zeta: b.zeta });
    }
    Ok(b)
}

/// Spectral norm of `B - 11^T/m` for a symmetric doubly stochastic `B`
/// (row-major, `m * m`).
///
/// Power iteration with the consensus direction deflated; Jacobi is used when
/// the iteration does not settle and the matrix is small enough.
pub fn spectral_gap(b: &[f64], m: usize) -> Result<f64, TopologyError> {
    if m == 0 || b.len() != m * m {
        return Err(TopologyError::InvalidDimension(format!(
            "expected {m}x{m} matrix, got {} entries",
            b.len()
        )));
    }
    let mut asym = 0.0_f64;
    for i in 0..m {
        for j in (i + 1)..m {
            asym = asym.max((b[i * m + j] - b[j * m + i]).abs());
        }
    }
    if asym > STOCHASTIC_TOL {
        return Err(TopologyError::NotSymmetric(asym));
    }
    let mut dev = 0.0_f64;
    for i in 0..m {
        let row: f64 = b[i * m..(i + 1) * m].iter().sum();
        let col: f64 = (0..m).map(|r| b[r * m + i]).sum();
        dev = dev.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    if dev > STOCHASTIC_TOL {
        return Err(TopologyError::NotStochastic(dev));
    }

    let apply = |x: &[f64], y: &mut [f64]| {
        let mean = x.iter().sum::<f64>() / m as f64;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = linalg::dot(&b[i * m..(i + 1) * m], x) - mean;
        }
    };
    let res = linalg::power_norm(apply, m, POWER_TOL, POWER_MAX_ITER);
    if res.converged || m > JACOBI_MAX_DIM {
        return Ok(res.value);
    }
    let inv = 1.0 / m as f64;
    let deflated: Vec<f64> = b.iter().map(|v| v - inv).collect();
    let eig = linalg::jacobi_eigenvalues(&deflated, m);
    Ok(eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn odd_ring_five() {
        let g = build_graph(GraphKind::OddRing, 5, 2, 0).unwrap();
        let expect: Vec<Vec<usize>> = vec![vec![1, 4], vec![0, 2], vec![1, 3], vec![2, 4], vec![0, 3]];
        assert_eq!(g.neighbor_sets(), expect.as_slice());
    }

    #[test]
    fn complete_four() {
        let g = build_graph(GraphKind::Complete, 4, 0, 0).unwrap();
        for i in 0..4 {
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(g.neighbors(i), expect.as_slice());
        }
        assert_eq!(g.degree(), 3);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(build_graph(GraphKind::OddRing, 4, 2, 0), Err(TopologyError::InvalidDimension(_))));
        assert!(matches!(build_graph(GraphKind::OddRing, 2, 2, 0), Err(TopologyError::InvalidDimension(_))));
        assert!(matches!(build_graph(GraphKind::Torus2D, 16, 4, 0), Err(TopologyError::InvalidDimension(_))));
        assert!(matches!(build_graph(GraphKind::Torus2D, 10, 4, 0), Err(TopologyError::InvalidDimension(_))));
        assert!(matches!(
            build_graph(GraphKind::KRegularRandom, 7, 3, 0),
            Err(TopologyError::InvalidDimension(_))
        ));
        assert!(matches!(
            build_graph(GraphKind::KRegularRandom, 6, 6, 0),
            Err(TopologyError::InvalidDimension(_))
        ));
    }

    #[test]
    fn torus_nine_is_four_regular() {
        let g = build_graph(GraphKind::Torus2D, 9, 0, 0).unwrap();
        assert_eq!(g.degree(), 4);
        assert_eq!(g.neighbors(0), &[1, 2, 3, 6]);
        assert!(!g.is_bipartite());
    }

    #[test]
    fn random_regular_is_reproducible() {
        let a = build_graph(GraphKind::KRegularRandom, 20, 4, 9).unwrap();
        let b = build_graph(GraphKind::KRegularRandom, 20, 4, 9).unwrap();
        let c = build_graph(GraphKind::KRegularRandom, 20, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ring_five_matrix() {
        let g = build_graph(GraphKind::OddRing, 5, 2, 0).unwrap();
        let b = communication_matrix(&g).unwrap();
        assert_eq!(b.get(0, 1), 0.5);
        assert_eq!(b.get(0, 4), 0.5);
        assert_eq!(b.get(0, 2), 0.0);
        assert_eq!(b.get(0, 0), 0.0);
        assert!((b.zeta() - (4.0 * PI / 5.0).cos().abs()).abs() < 1e-9);
    }

    #[test]
    fn complete_four_zeta_third() {
        let g = build_graph(GraphKind::Complete, 4, 0, 0).unwrap();
        let b = communication_matrix(&g).unwrap();
        assert!((b.zeta() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn even_ring_rejected() {
        let ns = (0..4).map(|i| sorted(vec![(i + 3) % 4, (i + 1) % 4])).collect();
        let g = Graph::from_neighbors(GraphKind::OddRing, ns).unwrap();
        assert!(g.is_bipartite());
        assert!(matches!(communication_matrix(&g), Err(TopologyError::BipartiteOrDisconnected { .. })));
    }

    #[test]
    fn gap_of_identity_and_averaging() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!((spectral_gap(&id, 3).unwrap() - 1.0).abs() < 1e-12);
        let j = [1.0 / 3.0; 9];
        assert_eq!(spectral_gap(&j, 3).unwrap(), 0.0);
    }

    #[test]
    fn gap_rejects_bad_matrices() {
        let asym = [0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5];
        assert!(matches!(spectral_gap(&asym, 3), Err(TopologyError::NotSymmetric(_))));
        let sub = [0.5, 0.0, 0.0, 0.5];
        assert!(matches!(spectral_gap(&sub, 2), Err(TopologyError::NotStochastic(_))));
    }

    #[test]
    fn ring_seven_gap() {
        let g = build_graph(GraphKind::OddRing, 7, 2, 0).unwrap();
        let b = CommMatrix::from_graph(&g).unwrap();
        assert!((b.zeta() - (6.0 * PI / 7.0).cos().abs()).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let g = build_graph(GraphKind::Torus2D, 25, 0, 0).unwrap();
        let back = Graph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.neighbor_sets(), g.neighbor_sets());
        assert_eq!(back.kind(), GraphKind::Torus2D);

        let bad = [
            r#"{"m":3,"kind":"Complete","neighbors":[[1,2],[0,2],[0,1]],"extra":1}"#,
            r#"{"m":3,"kind":"Complete","neighbors":[[1,2],[0,2]]}"#,
            r#"{"m":3,"kind":"Complete","neighbors":[[1,2],[0,2],[0,0]]}"#,
            r#"{"m":3,"kind":"Complete","neighbors":[[1,2],[0,2],[0,7]]}"#,
            r#"{"m":3,"kind":"OddRing","neighbors":[[1],[0],[]]}"#,
            r#"{"m":4,"kind":"OddRing","neighbors":[[1],[0],[3],[2]]}"#,
            r#"{"m":3,"kind":"Ring","neighbors":[[1,2],[0,2],[0,1]]}"#,
        ];
        for text in bad {
            assert!(Graph::from_json(text).is_err(), "{text}");
        }
    }
}
