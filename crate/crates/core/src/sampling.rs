//! Sampling from softmax rows without touching every key, plus the
//! prefix-sum samplers used by the key-gradient estimator.

use crate::dist::{
    binomial_sample, gumbel_tail, gumbel_sample_conditional_above, sample_k_distinct_excluding, standard_gumbel,
};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::mips::{augment_query, KnnIndex, Scored};
use crate::rng::RngStream;

/// The `k` highest-scoring keys for one query row.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSet {
    row: usize,
    /// Descending by score.
    indices: Vec<usize>,
    scores: Vec<f64>,
    /// Same indices, ascending, for exclusion lookups.
    sorted: Vec<usize>,
    s_min: f64,
}

impl TopKSet {
    pub fn from_scored(row: usize, scored: &[Scored]) -> Self {
        let indices: Vec<usize> = scored.iter().map(|s| s.index).collect();
        let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        let s_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        Self { row, indices, scores, sorted, s_min }
    }

    /// Queries `index` with row `row` of `q`, restricted to keys `0..universe`.
    pub fn retrieve(index: &KnnIndex, q: &Matrix, row: usize, k: usize, universe: usize) -> Self {
        let scored = index.query_scored(&augment_query(q.row(row)), k, universe);
        Self::from_scored(row, &scored)
    }

    pub fn row(&self) -> usize {
        self.row
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn sorted_indices(&self) -> &[usize] {
        &self.sorted
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws exact samples from `D_i(j) ∝ exp(<q_i, k_j>)` over `j < universe`.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxRowSampler<'a> {
    pub query: &'a [f64],
    pub keys: &'a Matrix,
    pub topk: &'a TopKSet,
    pub universe: usize,
    /// Lowers the Gumbel cutoff to tolerate an approximate top-k set.
    pub cutoff_slack: f64,
}

/// One lazy-Gumbel draw and the number of outside keys it had to inspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LazyDraw {
    pub index: usize,
    pub spill: usize,
}

impl<'a> SoftmaxRowSampler<'a> {
    pub fn new(query: &'a [f64], keys: &'a Matrix, topk: &'a TopKSet, universe: usize) -> Self {
        Self { query, keys, topk, universe, cutoff_slack: 0.0 }
    }

    pub fn with_slack(mut self, cutoff_slack: f64) -> Self {
        assert!(cutoff_slack >= 0.0, "cutoff slack must be nonnegative");
        self.cutoff_slack = cutoff_slack;
        self
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        self.sample_traced(rng).index
    }

    pub fn sample_traced(&self, rng: &mut RngStream) -> LazyDraw {
        let top = self.topk;
        debug_assert!(!top.is_empty(), "empty top-k set");
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (&j, &z) in top.indices.iter().zip(&top.scores) {
            best = better(best, (z + standard_gumbel(rng), j));
        }
        let outside = self.universe.saturating_sub(top.len());
        if outside == 0 {
            return LazyDraw { index: best.1, spill: 0 };
        }
        let cutoff = best.0 - top.s_min - self.cutoff_slack;
        let m = binomial_sample(rng, outside as u64, gumbel_tail(cutoff)).expect("tail probability in [0, 1]")
            as usize;
        if m > 0 {
            let spill = sample_k_distinct_excluding(rng, self.universe, &top.sorted, m)
                .expect("spill count bounded by the complement size");
            for t in spill {
                let z = dot(self.query, self.keys.row(t));
                best = better(best, (z + gumbel_sample_conditional_above(rng, cutoff), t));
            }
        }
        LazyDraw { index: best.1, spill: m }
    }
}

#[inline]
fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }
}

pub fn lazy_gumbel_sample(s: &SoftmaxRowSampler<'_>, rng: &mut RngStream) -> usize {
    s.sample(rng)
}

/// Score generators for spill-count experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreDistribution {
    Uniform { low: f64, high: f64 },
    Normal { std_dev: f64 },
    /// One score at `height`, the rest zero.
    Spike { height: f64 },
    Constant,
}

impl ScoreDistribution {
    pub fn fill(&self, rng: &mut RngStream, out: &mut [f64]) {
        use rand_distr::{Distribution, StandardNormal};
        match *self {
            ScoreDistribution::Uniform { low, high } => {
                out.iter_mut().for_each(|s| *s = low + (high - low) * rng.open01());
            }
            ScoreDistribution::Normal { std_dev } => {
                out.iter_mut().for_each(|s| {
                    let z: f64 = StandardNormal.sample(rng);
                    *s = std_dev * z;
                });
            }
            ScoreDistribution::Spike { height } => {
                out.iter_mut().for_each(|s| *s = 0.0);
                if !out.is_empty() {
                    let at = rng.below(out.len());
                    out[at] = height;
                }
            }
            ScoreDistribution::Constant => out.iter_mut().for_each(|s| *s = 0.0),
        }
    }
}

/// Monte-Carlo mean of the lazy-Gumbel spill count `m` over `trials` fresh
/// score vectors of length `n` with exact top-`k` sets.
pub fn expected_spill_count(
    n: usize,
    k: usize,
    trials: usize,
    scores: ScoreDistribution,
    rng: &mut RngStream,
) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("need 1 <= k <= n (k = {k}, n = {n})")));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("zero trials".into()));
    }
    if k == n {
        return Ok(0.0);
    }
    let mut z = vec![0.0; n];
    let mut total = 0u64;
    for _ in 0..trials {
        scores.fill(rng, &mut z);
        let mut scored: Vec<Scored> = z.iter().enumerate().map(|(index, &score)| Scored { index, score }).collect();
        scored.select_nth_unstable_by(k - 1, |a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        let top = &scored[..k];
        let s_min = top.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
        let best = top.iter().map(|s| s.score + standard_gumbel(rng)).fold(f64::NEG_INFINITY, f64::max);
        total += binomial_sample(rng, (n - k) as u64, gumbel_tail(best - s_min))?;
    }
    Ok(total as f64 / trials as f64)
}

/// Prefix-sum sampler over nonnegative weights.
#[derive(Debug, Clone)]
pub struct CdfSampler {
    prefix: Vec<f64>,
}

impl CdfSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let mut prefix = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!("weight {w}")));
            }
            acc += w;
            prefix.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::DegenerateWeights { total: acc });
        }
        Ok(Self { prefix })
    }

    pub fn total(&self) -> f64 {
        *self.prefix.last().expect("non-empty")
    }

    /// Smallest `i` with `x <= prefix_i` for `x` uniform on `(0, total)`.
    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let x = rng.open01() * self.total();
        self.prefix.partition_point(|&s| s < x).min(self.prefix.len() - 1)
    }
}

pub fn cdf_sample(weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    Ok(CdfSampler::new(weights)?.sample(rng))
}

/// For each column `j`, the running sums `sum_{s <= l} Q[s][j] * dO[s, :]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTables {
    n: usize,
    d: usize,
    /// `prefix[(j * n + l) * d + t]` holds component `t` of the sum over the
    /// first `l + 1` rows.
    prefix: Vec<f64>,
}

pub fn build_cdf_tables(q: &Matrix, d_o: &Matrix) -> Result<CdfTables> {
    if q.shape() != d_o.shape() {
        return Err(Error::Shape(format!("Q {:?} vs dO {:?}", q.shape(), d_o.shape())));
    }
    let (n, d) = q.shape();
    let mut prefix = vec![0.0; d * n * d];
    for j in 0..d {
        let mut acc = vec![0.0; d];
        for l in 0..n {
            let w = q[(l, j)];
            for (a, g) in acc.iter_mut().zip(d_o.row(l)) {
                *a += w * g;
            }
            let base = (j * n + l) * d;
            prefix[base..base + d].copy_from_slice(&acc);
        }
    }
    Ok(CdfTables { n, d, prefix })
}

impl CdfTables {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Sum over the first `count` rows (`count` in `1..=n`).
    pub fn prefix(&self, j: usize, count: usize) -> &[f64] {
        assert!(count >= 1 && count <= self.n && j < self.d, "prefix ({j}, {count}) out of range");
        let base = (j * self.n + count - 1) * self.d;
        &self.prefix[base..base + self.d]
    }

    /// `E_j`, the sum over all rows.
    pub fn column_sum(&self, j: usize) -> &[f64] {
        self.prefix(j, self.n)
    }

    /// `n * M + <v_row, E_j>`, the total shifted weight.
    pub fn normalizer(&self, v_row: &[f64], j: usize, shift: ShiftBound) -> f64 {
        self.n as f64 * shift.0 + dot(v_row, self.column_sum(j))
    }

    /// Unnormalised cumulative weight of the first `count` entries of
    /// `Y_{:, j} + M` for the given value row, in O(d).
    #[inline]
    pub fn shifted_prefix(&self, v_row: &[f64], j: usize, shift: ShiftBound, count: usize) -> f64 {
        if count == 0 {
            0.0
        } else {
            count as f64 * shift.0 + dot(v_row, self.prefix(j, count))
        }
    }
}

/// Upper bound `M` on the negativity of every `Y[k][j] = Q[k][j] <dO_k, v>`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ShiftBound(f64);

impl ShiftBound {
    pub fn new(m: f64) -> Result<Self> {
        if !(m >= 0.0) || !m.is_finite() {
            return Err(Error::InvalidParameter(format!("shift bound {m}")));
        }
        Ok(Self(m))
    }

    pub fn zero() -> Self {
        Self(0.0)
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Valid bound in O(nd):
    /// `|Y[k][j]| <= |Q[k][j]| * sum_t |dO[k][t]| * max_i |V[i][t]|`.
    pub fn bound_for_y(q: &Matrix, d_o: &Matrix, v: &Matrix) -> Self {
        let d = v.cols();
        let mut v_max = vec![0.0f64; d];
        for i in 0..v.rows() {
            for (m, x) in v_max.iter_mut().zip(v.row(i)) {
                *m = m.max(x.abs());
            }
        }
        let mut m = 0.0f64;
        for k in 0..q.rows() {
            let reach: f64 = d_o.row(k).iter().zip(&v_max).map(|(g, vm)| g.abs() * vm).sum();
            let q_max = q.row(k).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            m = m.max(q_max * reach);
        }
        Self(m)
    }

    /// Exact `max(0, -min Y)` over every value row, O(n^2 d).
    pub fn exact_for_y(q: &Matrix, d_o: &Matrix, v: &Matrix) -> Self {
        let mut lowest = 0.0f64;
        for i in 0..v.rows() {
            for k in 0..q.rows() {
                let g = dot(d_o.row(k), v.row(i));
                for j in 0..q.cols() {
                    lowest = lowest.min(q[(k, j)] * g);
                }
            }
        }
        Self(-lowest)
    }
}

/// Draws `k` with probability proportional to `Y[k][j] + M` where
/// `Y[k][j] = Q[k][j] <dO_k, v_row>`, in O(d log n).
pub fn sample_shifted_y(
    tables: &CdfTables,
    v_row: &[f64],
    j: usize,
    shift: ShiftBound,
    rng: &mut RngStream,
) -> Result<usize> {
    let total = tables.normalizer(v_row, j, shift);
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights { total });
    }
    let x = rng.open01() * total;
    // Smallest count in 1..=n whose prefix reaches x.
    let (mut lo, mut hi) = (1usize, tables.n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if tables.shifted_prefix(v_row, j, shift, mid) < x {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(lo - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mips::{augment_keys, build_exact_index};

    #[test]
    fn cdf_point_mass() {
        let mut rng = RngStream::new(0, 0);
        for _ in 0..1000 {
            assert_eq!(cdf_sample(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
            assert_eq!(cdf_sample(&[0.0, 0.0, 2.0], &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn cdf_rejects_degenerate() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(cdf_sample(&[0.0, 0.0], &mut rng).unwrap_err(), Error::DegenerateWeights { total: 0.0 });
        assert!(cdf_sample(&[], &mut rng).is_err());
        assert!(cdf_sample(&[1.0, -0.5], &mut rng).is_err());
    }

    #[test]
    fn cdf_skips_zero_weights() {
        let mut rng = RngStream::new(4, 0);
        let w = [0.0, 1.0, 0.0, 0.0, 2.0, 0.0];
        for _ in 0..10_000 {
            let i = cdf_sample(&w, &mut rng).unwrap();
            assert!(w[i] > 0.0);
        }
    }

    #[test]
    fn spill_is_zero_when_topk_covers_everything() {
        let mut rng = RngStream::new(0, 0);
        let m = expected_spill_count(16, 16, 10, ScoreDistribution::Normal { std_dev: 1.0 }, &mut rng).unwrap();
        assert_eq!(m, 0.0);
        assert!(expected_spill_count(4, 5, 10, ScoreDistribution::Constant, &mut rng).is_err());
    }

    #[test]
    fn full_topk_sampler_never_spills() {
        let k = Matrix::from_fn(8, 2, |i, j| (i as f64 - 3.0) * (j as f64 + 0.5));
        let q = Matrix::from_fn(1, 2, |_, j| 0.3 - j as f64);
        let idx = build_exact_index(augment_keys(&k).unwrap());
        let top = TopKSet::retrieve(&idx, &q, 0, 8, 8);
        let s = SoftmaxRowSampler::new(q.row(0), &k, &top, 8);
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            assert_eq!(s.sample_traced(&mut rng).spill, 0);
        }
    }

    #[test]
    fn tables_for_zero_upstream_are_zero() {
        let q = Matrix::from_fn(5, 3, |i, j| (i + j) as f64);
        let t = build_cdf_tables(&q, &Matrix::zeros(5, 3)).unwrap();
        for j in 0..3 {
            for l in 1..=5 {
                assert!(t.prefix(j, l).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn tables_single_row() {
        let q = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let d_o = Matrix::from_rows(&[vec![0.5, 3.0]]).unwrap();
        let t = build_cdf_tables(&q, &d_o).unwrap();
        assert_eq!(t.prefix(0, 1), &[1.0, 6.0]);
        assert_eq!(t.column_sum(1), &[-0.5, -3.0]);
        assert!(build_cdf_tables(&q, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn shifted_sampler_rejects_nonpositive_normalizer() {
        let q = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let d_o = Matrix::from_rows(&[vec![-1.0], vec![-1.0]]).unwrap();
        let t = build_cdf_tables(&q, &d_o).unwrap();
        let mut rng = RngStream::new(0, 0);
        let err = sample_shifted_y(&t, &[1.0], 0, ShiftBound::zero(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { .. }));
        assert!(sample_shifted_y(&t, &[1.0], 0, ShiftBound::new(1.0).unwrap(), &mut rng).is_err());
        assert!(sample_shifted_y(&t, &[1.0], 0, ShiftBound::new(1.5).unwrap(), &mut rng).is_ok());
    }

    #[test]
    fn shift_bound_covers_exact_shift() {
        let q = Matrix::from_fn(6, 2, |i, j| ((i * 3 + j) as f64).sin());
        let d_o = Matrix::from_fn(6, 2, |i, j| ((i + 5 * j) as f64).cos());
        let v = Matrix::from_fn(6, 2, |i, j| (i as f64 - 2.5) * (1.0 - j as f64));
        let loose = ShiftBound::bound_for_y(&q, &d_o, &v);
        let exact = ShiftBound::exact_for_y(&q, &d_o, &v);
        assert!(exact.value() > 0.0);
        assert!(loose >= exact);
        assert!(ShiftBound::new(-1.0).is_err());
    }
}
