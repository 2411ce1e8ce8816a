//! Maximum-inner-product search over keys.
//!
//! Keys are lifted to `d + 1` dimensions so that all of them share the same
//! norm; queries get a trailing zero. Inner products are unchanged, so top-k
//! by inner product coincides with nearest neighbours on the lifted keys.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedKeys {
    keys: Matrix,
    m_norm: f64,
}

impl AugmentedKeys {
    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    /// Common squared norm of every lifted key.
    pub fn m_norm(&self) -> f64 {
        self.m_norm
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    /// Dimension of the lifted space (`d + 1`).
    pub fn dim(&self) -> usize {
        self.keys.cols()
    }
}

pub fn augment_keys(k: &Matrix) -> Result<AugmentedKeys> {
    if !k.is_finite() {
        return Err(Error::NonFinite("K"));
    }
    let (n, d) = k.shape();
    let norms: Vec<f64> = (0..n).map(|j| dot(k.row(j), k.row(j))).collect();
    let m_norm = norms.iter().copied().fold(0.0, f64::max);
    let mut keys = Matrix::zeros(n, d + 1);
    for (j, &norm) in norms.iter().enumerate() {
        let row = keys.row_mut(j);
        row[..d].copy_from_slice(k.row(j));
        row[d] = (m_norm - norm).max(0.0).sqrt();
    }
    Ok(AugmentedKeys { keys, m_norm })
}

pub fn augment_query(q: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.len() + 1);
    out.extend_from_slice(q);
    out.push(0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LshParams {
    pub num_tables: usize,
    pub hash_bits: usize,
    pub seed: u64,
}

impl LshParams {
    pub fn new(num_tables: usize, hash_bits: usize, seed: u64) -> Result<Self> {
        if num_tables == 0 || hash_bits == 0 || hash_bits > 64 {
            return Err(Error::InvalidParameter(format!(
                "LSH needs num_tables >= 1 and 1 <= hash_bits <= 64 (got {num_tables}, {hash_bits})"
            )));
        }
        Ok(Self { num_tables, hash_bits, seed })
    }

    /// Buckets holding about `k / num_tables` keys each, so the exact-hash
    /// buckets of all tables together hold about `k`; queries probe further
    /// buckets until they have `2k` candidates.
    pub fn for_size(n: usize, k: usize, num_tables: usize, seed: u64) -> Result<Self> {
        let ratio = (num_tables.max(1) as f64 * n as f64 / k.max(1) as f64).max(2.0);
        let bits = (ratio.log2().ceil() as usize).clamp(1, 64);
        Self::new(num_tables, bits, seed)
    }
}

#[derive(Debug, Clone)]
struct HyperplaneTable {
    /// `hash_bits` normals of dimension `d + 1`, row-major.
    normals: Matrix,
    buckets: HashMap<u64, Vec<usize>>,
}

impl HyperplaneTable {
    /// Sign pattern of `x - centre` against the normals.
    fn hash(&self, x: &[f64], centre: &[f64]) -> u64 {
        (0..self.normals.rows()).fold(0u64, |h, b| {
            let side: f64 = self.normals.row(b).iter().zip(x).zip(centre).map(|((w, xi), c)| w * (xi - c)).sum();
            (h << 1) | u64::from(side >= 0.0)
        })
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Exact,
    /// Hyperplanes pass through the mean augmented key. Every augmented key
    /// shares a large padding coordinate, so hyperplanes through the origin
    /// would put most keys in a handful of buckets.
    Lsh { params: LshParams, tables: Vec<HyperplaneTable>, centre: Vec<f64> },
}

/// Immutable top-k inner-product index.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    keys: AugmentedKeys,
    backend: Backend,
}

pub fn build_exact_index(aug: AugmentedKeys) -> KnnIndex {
    KnnIndex { keys: aug, backend: Backend::Exact }
}

pub fn build_lsh_index(aug: AugmentedKeys, params: LshParams) -> KnnIndex {
    let mut rng = RngStream::new(params.seed, 0x15A);
    let dim = aug.dim();
    let mut centre = vec![0.0; dim];
    for j in 0..aug.len() {
        centre.iter_mut().zip(aug.keys.row(j)).for_each(|(c, x)| *c += x);
    }
    centre.iter_mut().for_each(|c| *c /= aug.len().max(1) as f64);
    let tables = (0..params.num_tables)
        .map(|_| {
            let normals =
                Matrix::from_fn(params.hash_bits, dim, |_, _| StandardNormal.sample(&mut rng));
            let mut table = HyperplaneTable { normals, buckets: HashMap::new() };
            for j in 0..aug.len() {
                let h = table.hash(aug.keys.row(j), &centre);
                table.buckets.entry(h).or_default().push(j);
            }
            table
        })
        .collect();
    KnnIndex { keys: aug, backend: Backend::Lsh { params, tables, centre } }
}

/// A retrieved key with its inner product against the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
}

#[inline]
fn rank(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

impl KnnIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &AugmentedKeys {
        &self.keys
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.backend, Backend::Exact)
    }

    pub fn lsh_params(&self) -> Option<LshParams> {
        match &self.backend {
            Backend::Lsh { params, .. } => Some(*params),
            Backend::Exact => None,
        }
    }

    /// Top `k` keys by inner product, descending, lower index first on ties.
    pub fn query_topk(&self, q_aug: &[f64], k: usize) -> Vec<usize> {
        self.query_scored(q_aug, k, self.len()).into_iter().map(|s| s.index).collect()
    }

    /// As [`query_topk`](Self::query_topk) but restricted to keys
    /// `0..universe` and returning scores.
    pub fn query_scored(&self, q_aug: &[f64], k: usize, universe: usize) -> Vec<Scored> {
        assert_eq!(q_aug.len(), self.keys.dim(), "query dimension");
        let universe = universe.min(self.len());
        let want = k.min(universe);
        if want == 0 {
            return Vec::new();
        }
        match &self.backend {
            Backend::Exact => self.scan(q_aug, want, 0..universe),
            Backend::Lsh { tables, centre, .. } => {
                // Rescaling the query to the key norm leaves the ranking
                // unchanged and puts it on the same sphere as the keys.
                let norm = dot(q_aug, q_aug).sqrt();
                let scale = if norm > 0.0 { self.keys.m_norm().sqrt() / norm } else { 0.0 };
                let probe: Vec<f64> = q_aug.iter().map(|x| x * scale).collect();
                let hashes: Vec<u64> = tables.iter().map(|t| t.hash(&probe, centre)).collect();
                let bits = tables.first().map_or(0, |t| t.normals.rows());
                // Exact buckets first, then one-bit flips, until twice `want`
                // keys (before dedup) are in hand.
                let flips = std::iter::once(0u64).chain((0..bits).map(|b| 1u64 << b));
                let mut candidates: Vec<usize> = Vec::new();
                for flip in flips {
                    for (table, &h) in tables.iter().zip(&hashes) {
                        if let Some(bucket) = table.buckets.get(&(h ^ flip)) {
                            let end = bucket.partition_point(|&j| j < universe);
                            candidates.extend_from_slice(&bucket[..end]);
                        }
                    }
                    if candidates.len() >= 2 * want {
                        break;
                    }
                }
                candidates.sort_unstable();
                candidates.dedup();
                if candidates.len() < want {
                    self.scan(q_aug, want, 0..universe)
                } else {
                    self.scan(q_aug, want, candidates.into_iter())
                }
            }
        }
    }

    fn scan(&self, q_aug: &[f64], want: usize, candidates: impl Iterator<Item = usize>) -> Vec<Scored> {
        let keys = self.keys.keys();
        let mut scored: Vec<Scored> =
            candidates.map(|j| Scored { index: j, score: dot(q_aug, keys.row(j)) }).collect();
        if want < scored.len() {
            scored.select_nth_unstable_by(want - 1, rank);
            scored.truncate(want);
        }
        scored.sort_unstable_by(rank);
        scored
    }
}
