//! Orderings, conditioning sets and nearest-neighbor search.
//!
//! Training conditioning sets are ordered nearest neighbors: point `i` may
//! only condition on points that precede it in a random ordering. Test-time
//! sets are unconstrained nearest neighbors among the training points.
//! Both can be computed exactly by brute force or approximately through an
//! inverted file index (IVF) with a k-means coarse quantizer.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{sq_dist, Matrix};

/// Lloyd iterations used by [`IvfIndex::build`] unless told otherwise.
pub const DEFAULT_KMEANS_ITERS: usize = 25;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NeighborError {
    #[error("n_list = {n_list} must be in 1..={n}")]
    ListCount { n_list: usize, n: usize },
    #[error("n_probe = {n_probe} must be in 1..={n_list}")]
    ProbeCount { n_probe: usize, n_list: usize },
    #[error("query dimension {found} does not match index dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("conditioning sets must allow at least one neighbor (m = 0)")]
    ZeroSetSize,
    #[error("invalid conditioning-set table: {0}")]
    InvalidTable(String),
}

/// A permutation of `0..n` with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    perm: Vec<usize>,
    position: Vec<usize>,
    seed: u64,
}

impl Ordering {
    /// Uniformly random permutation, reproducible from `seed`.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_perm(perm, seed).expect("shuffle yields a permutation")
    }

    /// Identity ordering.
    pub fn natural(n: usize) -> Self {
        Self::from_perm((0..n).collect(), 0).expect("identity permutation")
    }

    pub fn from_perm(perm: Vec<usize>, seed: u64) -> Result<Self, NeighborError> {
        let n = perm.len();
        let mut position = vec![usize::MAX; n];
        for (p, &i) in perm.iter().enumerate() {
            if i >= n || position[i] != usize::MAX {
                return Err(NeighborError::InvalidTable(format!(
                    "ordering entry {i} at position {p} is out of range or repeated"
                )));
            }
            position[i] = p;
        }
        Ok(Self { perm, position, seed })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Data index at each position.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Position of data index `i`.
    #[inline]
    pub fn position(&self, i: usize) -> usize {
        self.position[i]
    }
}

/// Convenience wrapper matching the free-function style of the other
/// operations.
pub fn random_ordering(n: usize, seed: u64) -> Ordering {
    Ordering::random(n, seed)
}

/// Which search structure supplies conditioning sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NeighborBackend {
    Exact,
    Ivf { n_list: usize, n_probe: usize },
}

impl NeighborBackend {
    pub fn validate(&self, n: usize) -> Result<(), NeighborError> {
        match *self {
            NeighborBackend::Exact => Ok(()),
            NeighborBackend::Ivf { n_list, n_probe } => {
                if n_list == 0 || n_list > n {
                    return Err(NeighborError::ListCount { n_list, n });
                }
                if n_probe == 0 || n_probe > n_list {
                    return Err(NeighborError::ProbeCount { n_probe, n_list });
                }
                Ok(())
            }
        }
    }
}

/// Per-point neighbor lists, in original index space, sorted by ascending
/// distance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningSets {
    pub m: usize,
    pub sets: Vec<Vec<usize>>,
}

impl ConditioningSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    /// Dense `n × m` table with `-1` padding, the on-disk layout.
    pub fn to_table(&self) -> Matrix {
        let mut t = Matrix::new(self.sets.len(), self.m, vec![-1.0; self.sets.len() * self.m])
            .expect("table shape");
        for (i, s) in self.sets.iter().enumerate() {
            for (j, &v) in s.iter().enumerate() {
                t[(i, j)] = v as f64;
            }
        }
        t
    }

    pub fn from_table(t: &Matrix) -> Result<Self, NeighborError> {
        let n = t.rows();
        let mut sets = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = Vec::new();
            let mut padded = false;
            for &v in t.row(i) {
                if v == -1.0 {
                    padded = true;
                    continue;
                }
                if padded || v < 0.0 || v.fract() != 0.0 || v >= n as f64 {
                    return Err(NeighborError::InvalidTable(format!(
                        "row {i} holds entry {v} (padding must trail, entries must be indices below {n})"
                    )));
                }
                s.push(v as usize);
            }
            sets.push(s);
        }
        Ok(Self { m: t.cols(), sets })
    }

    /// Checks the ordered-neighbor invariants against `ord`: every neighbor
    /// precedes its point, set sizes are `min(m, position)`, no duplicates or
    /// self references. Returns the first violation.
    pub fn check_predecessor_invariant(&self, ord: &Ordering) -> Result<(), String> {
        for (i, s) in self.sets.iter().enumerate() {
            let pos = ord.position(i);
            if s.len() != self.m.min(pos) {
                return Err(format!("point {i} has {} neighbors, expected {}", s.len(), self.m.min(pos)));
            }
            let mut seen = std::collections::HashSet::new();
            for &j in s {
                if j == i || !seen.insert(j) || ord.position(j) >= pos {
                    return Err(format!("point {i} has invalid neighbor {j}"));
                }
            }
        }
        Ok(())
    }
}

/// Keeps the `k` smallest `(distance², index)` pairs, ties broken by index,
/// returned in ascending order.
fn smallest_k(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(cmp);
    cands
}

/// Exact `m` nearest rows of `data` to `q` as `(index, distance)` pairs,
/// ascending. Ties are broken by the smaller index.
pub fn knn_exact(data: &Matrix, q: &[f64], m: usize) -> Vec<(usize, f64)> {
    let cands = data
        .row_iter()
        .enumerate()
        .map(|(j, r)| (sq_dist(q, r), j))
        .collect();
    smallest_k(cands, m)
        .into_iter()
        .map(|(d2, j)| (j, d2.sqrt()))
        .collect()
}

/// Ordered exact nearest neighbors: for each point, the `m` closest points
/// preceding it in `ord`, found by brute force.
pub fn ordered_knn_exact(e: &Matrix, ord: &Ordering, m: usize) -> Result<ConditioningSets, NeighborError> {
    if m == 0 {
        return Err(NeighborError::ZeroSetSize);
    }
    let perm = ord.perm();
    let sets = (0..e.rows())
        .into_par_iter()
        .map(|i| {
            let pos = ord.position(i);
            let xi = e.row(i);
            let cands = perm[..pos]
                .iter()
                .map(|&j| (sq_dist(xi, e.row(j)), j))
                .collect();
            smallest_k(cands, m).into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(ConditioningSets { m, sets })
}

/// Inverted file index over a shared data matrix.
#[derive(Clone, Debug)]
pub struct IvfIndex {
    data: Arc<Matrix>,
    centroids: Matrix,
    lists: Vec<Vec<usize>>,
    seed: u64,
}

impl IvfIndex {
    /// k-means++ seeding followed by `kmeans_iters` Lloyd iterations, then one
    /// final assignment pass that defines the inverted lists.
    pub fn build(data: Arc<Matrix>, n_list: usize, seed: u64, kmeans_iters: usize) -> Result<Self, NeighborError> {
        let n = data.rows();
        if n_list == 0 || n_list > n {
            return Err(NeighborError::ListCount { n_list, n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = kmeans_plus_plus(&data, n_list, &mut rng);
        let mut assign = assign_all(&data, &centroids);
        for _ in 0..kmeans_iters {
            let d = data.cols();
            let mut sums = Matrix::zeros(n_list, d);
            let mut counts = vec![0usize; n_list];
            for (i, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, v) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                    *s += v;
                }
            }
            for c in 0..n_list {
                // an emptied cluster keeps its previous centroid
                if counts[c] > 0 {
                    let inv = 1.0 / counts[c] as f64;
                    for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                        *dst = s * inv;
                    }
                }
            }
            let next = assign_all(&data, &centroids);
            let converged = next == assign;
            assign = next;
            if converged {
                break;
            }
        }
        let mut lists = vec![Vec::new(); n_list];
        for (i, &c) in assign.iter().enumerate() {
            lists[c].push(i);
        }
        Ok(Self {
            data,
            centroids,
            lists,
            seed,
        })
    }

    /// Reassembles an index from stored centroids; lists are recomputed by
    /// nearest-centroid assignment, which is what `build` stores.
    pub fn from_centroids(data: Arc<Matrix>, centroids: Matrix, seed: u64) -> Result<Self, NeighborError> {
        if centroids.cols() != data.cols() {
            return Err(NeighborError::Dimension {
                expected: data.cols(),
                found: centroids.cols(),
            });
        }
        if centroids.rows() == 0 || centroids.rows() > data.rows() {
            return Err(NeighborError::ListCount {
                n_list: centroids.rows(),
                n: data.rows(),
            });
        }
        let assign = assign_all(&data, &centroids);
        let mut lists = vec![Vec::new(); centroids.rows()];
        for (i, &c) in assign.iter().enumerate() {
            lists[c].push(i);
        }
        Ok(Self {
            data,
            centroids,
            lists,
            seed,
        })
    }

    pub fn n_list(&self) -> usize {
        self.centroids.rows()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Exact k-NN restricted to the members of the `n_probe` lists whose
    /// centroids are nearest to `q`. With a predecessor filter only points
    /// positioned before `position` in the ordering are eligible. May return
    /// fewer than `m` neighbors.
    pub fn query(
        &self,
        q: &[f64],
        m: usize,
        n_probe: usize,
        predecessor_filter: Option<(&Ordering, usize)>,
    ) -> Result<Vec<(usize, f64)>, NeighborError> {
        if n_probe == 0 || n_probe > self.n_list() {
            return Err(NeighborError::ProbeCount {
                n_probe,
                n_list: self.n_list(),
            });
        }
        if q.len() != self.data.cols() {
            return Err(NeighborError::Dimension {
                expected: self.data.cols(),
                found: q.len(),
            });
        }
        let centroid_d: Vec<(f64, usize)> = self
            .centroids
            .row_iter()
            .enumerate()
            .map(|(c, r)| (sq_dist(q, r), c))
            .collect();
        let probes = smallest_k(centroid_d, n_probe);
        let mut cands = Vec::new();
        for (_, c) in probes {
            for &j in &self.lists[c] {
                if let Some((ord, pos)) = predecessor_filter {
                    if ord.position(j) >= pos {
                        continue;
                    }
                }
                cands.push((sq_dist(q, self.data.row(j)), j));
            }
        }
        Ok(smallest_k(cands, m)
            .into_iter()
            .map(|(d2, j)| (j, d2.sqrt()))
            .collect())
    }

    /// Ordered conditioning sets for the indexed data, each point searching
    /// only among its predecessors in the probed lists.
    pub fn ordered_sets(&self, ord: &Ordering, m: usize, n_probe: usize) -> Result<ConditioningSets, NeighborError> {
        if m == 0 {
            return Err(NeighborError::ZeroSetSize);
        }
        let sets = (0..self.data.rows())
            .into_par_iter()
            .map(|i| {
                self.query(self.data.row(i), m, n_probe, Some((ord, ord.position(i))))
                    .map(|nn| nn.into_iter().map(|(j, _)| j).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ConditioningSets { m, sets })
    }
}

fn assign_all(data: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..data.rows())
        .into_par_iter()
        .map(|i| nearest_centroid(data.row(i), centroids))
        .collect()
}

fn nearest_centroid(x: &[f64], centroids: &Matrix) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, r) in centroids.row_iter().enumerate() {
        let d = sq_dist(x, r);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn kmeans_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // every remaining point coincides with a centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

/// Fraction of exact neighbors recovered by an approximate list, averaged
/// over queries.
pub fn recall(exact: &[Vec<usize>], approx: &[Vec<usize>]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let total: f64 = exact
        .iter()
        .zip(approx)
        .map(|(e, a)| {
            if e.is_empty() {
                return 1.0;
            }
            let hits = a.iter().filter(|j| e.contains(j)).count();
            hits as f64 / e.len() as f64
        })
        .sum();
    total / exact.len() as f64
}
