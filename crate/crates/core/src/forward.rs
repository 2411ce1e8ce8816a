//! Approximate attention outputs from top-k retrieval plus sampling.

use std::time::{Duration, Instant};

use crate::dist::sample_k_distinct_excluding;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::mips::{augment_keys, build_exact_index, build_lsh_index, KnnIndex, LshParams};
use crate::mom::{median_of_means_vec, MoMConfig};
use crate::oracle::AttentionProblem;
use crate::rng::RngStream;
use crate::sampling::{SoftmaxRowSampler, TopKSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Median of means over lazy-Gumbel draws, one run per output entry.
    MedianOfMeans,
    /// Top-k plus an upweighted uniform sample of the remaining keys.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexBackend {
    Exact,
    Lsh(LshParams),
}

impl IndexBackend {
    pub fn build(&self, keys: &Matrix) -> Result<KnnIndex> {
        let aug = augment_keys(keys)?;
        Ok(match *self {
            IndexBackend::Exact => build_exact_index(aug),
            IndexBackend::Lsh(params) => build_lsh_index(aug, params),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub k: usize,
    /// Size of the uniform spill sample (weighted estimator only).
    pub l: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub estimator: Estimator,
    pub index: IndexBackend,
    /// Gumbel cutoff slack for approximate indices (median-of-means only).
    pub cutoff_slack: f64,
    pub seed: u64,
}

impl ForwardConfig {
    pub fn weighted(k: usize, l: usize, seed: u64) -> Self {
        Self {
            k,
            l,
            epsilon: 0.1,
            delta: 0.1,
            estimator: Estimator::Weighted,
            index: IndexBackend::Exact,
            cutoff_slack: 0.0,
            seed,
        }
    }

    pub fn median_of_means(k: usize, epsilon: f64, delta: f64, seed: u64) -> Self {
        Self {
            k,
            l: 0,
            epsilon,
            delta,
            estimator: Estimator::MedianOfMeans,
            index: IndexBackend::Exact,
            cutoff_slack: 0.0,
            seed,
        }
    }

    pub fn with_index(mut self, index: IndexBackend) -> Self {
        self.index = index;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(Error::InvalidParameter(format!("k = {} outside 1..={n}", self.k)));
        }
        if self.estimator == Estimator::Weighted && self.l > n - self.k {
            return Err(Error::InvalidParameter(format!("l = {} exceeds n - k = {}", self.l, n - self.k)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {}", self.delta)));
        }
        if !(self.cutoff_slack >= 0.0) {
            return Err(Error::InvalidParameter(format!("cutoff slack {}", self.cutoff_slack)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Value rows touched per query row.
    pub samples_per_row: Vec<usize>,
    /// Keys inspected outside the top-k set per query row.
    pub spill_per_row: Vec<usize>,
    pub wall_time: Duration,
    /// Inputs violate the assumption behind the accuracy guarantee.
    pub guarantee_void: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxOutput {
    pub output: Matrix,
    pub diagnostics: Diagnostics,
}

pub fn approximate_attention(p: &AttentionProblem, cfg: &ForwardConfig) -> Result<ApproxOutput> {
    match cfg.estimator {
        Estimator::MedianOfMeans => knn_attention_mom(p, cfg),
        Estimator::Weighted => knn_attention_weighted(p, cfg),
    }
}

/// Estimates every `O[i][j] = E_{s ~ D_i}[V[s][j]]` with median of means
/// over exact lazy-Gumbel samples from `D_i`.
///
/// Sample counts assume `||V||_inf <= ln n`, which bounds the relative
/// variance of a single draw by `ln n`; the failure probability is split
/// evenly across all `n * d` entries.
pub fn knn_attention_mom(p: &AttentionProblem, cfg: &ForwardConfig) -> Result<ApproxOutput> {
    if cfg.estimator != Estimator::MedianOfMeans {
        return Err(Error::InvalidParameter("configuration is not median-of-means".into()));
    }
    let (n, d) = p.q.shape();
    cfg.validate(n)?;
    let start = Instant::now();
    let index = cfg.index.build(&p.k)?;
    let log_n = (n as f64).ln();
    let per_entry_delta = cfg.delta / (n * d) as f64;
    let plan = MoMConfig::multiplicative(cfg.epsilon, per_entry_delta, log_n.max(1.0), 1.0)?.plan();
    let guarantee_void = p.v.max_abs() > log_n.max(1.0);

    let root = RngStream::new(cfg.seed, 0);
    let mut output = Matrix::zeros(n, d);
    let mut samples_per_row = Vec::with_capacity(n);
    let mut spill_per_row = Vec::with_capacity(n);
    let mut entry = [0.0];
    for i in 0..n {
        let universe = p.visible(i);
        let top = TopKSet::retrieve(&index, &p.q, i, cfg.k.min(universe), universe);
        let sampler = SoftmaxRowSampler::new(p.q.row(i), &p.k, &top, universe).with_slack(cfg.cutoff_slack);
        let row_rng = root.substream(i as u64);
        let mut spill = 0usize;
        for j in 0..d {
            let mut rng = row_rng.substream(j as u64);
            median_of_means_vec(
                1,
                |r, buf| {
                    let draw = sampler.sample_traced(r);
                    spill += draw.spill;
                    buf[0] = p.v[(draw.index, j)];
                },
                plan,
                &mut rng,
                &mut entry,
            );
            output[(i, j)] = entry[0];
        }
        samples_per_row.push(plan.total() * d);
        spill_per_row.push(spill);
    }
    Ok(ApproxOutput {
        output,
        diagnostics: Diagnostics { samples_per_row, spill_per_row, wall_time: start.elapsed(), guarantee_void },
    })
}

/// Ratio estimator over the top-k set `S` and a uniform sample `T` of
/// `l` other visible keys, the latter upweighted by `(n_i - k) / l`:
///
/// `O[i] = (sum_S e^z v + w sum_T e^z v) / (sum_S e^z + w sum_T e^z)`.
///
/// One `(S, T)` pair serves all `d` columns of a row. With `l = 0` the
/// outside mass is dropped and this is plain top-k attention.
pub fn knn_attention_weighted(p: &AttentionProblem, cfg: &ForwardConfig) -> Result<ApproxOutput> {
    if cfg.estimator != Estimator::Weighted {
        return Err(Error::InvalidParameter("configuration is not weighted".into()));
    }
    let (n, d) = p.q.shape();
    cfg.validate(n)?;
    let start = Instant::now();
    let index = cfg.index.build(&p.k)?;
    let root = RngStream::new(cfg.seed, 1);

    let mut output = Matrix::zeros(n, d);
    let mut samples_per_row = Vec::with_capacity(n);
    let mut spill_per_row = Vec::with_capacity(n);
    let mut scores: Vec<(usize, f64, f64)> = Vec::with_capacity(cfg.k + cfg.l);
    for i in 0..n {
        let universe = p.visible(i);
        let top = TopKSet::retrieve(&index, &p.q, i, cfg.k.min(universe), universe);
        let outside = universe - top.len();
        let l = cfg.l.min(outside);

        scores.clear();
        scores.extend(top.indices().iter().zip(top.scores()).map(|(&j, &z)| (j, z, 1.0)));
        if l > 0 {
            let mut rng = root.substream(i as u64);
            let spill = sample_k_distinct_excluding(&mut rng, universe, top.sorted_indices(), l)?;
            let weight = outside as f64 / l as f64;
            let q = p.q.row(i);
            scores.extend(spill.into_iter().map(|j| (j, dot(q, p.k.row(j)), weight)));
        }

        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        // Accumulate deviations from the best key's value row so that equal
        // value rows come back bit-exact.
        let anchor = p.v.row(top.indices()[0]);
        let mut denom = 0.0;
        let o = output.row_mut(i);
        for &(j, z, w) in &scores {
            let e = w * (z - max).exp();
            denom += e;
            for ((o_t, v), a) in o.iter_mut().zip(p.v.row(j)).zip(anchor) {
                *o_t += e * (v - a);
            }
        }
        for (x, a) in o.iter_mut().zip(anchor) {
            *x = a + *x / denom;
        }
        samples_per_row.push(scores.len());
        spill_per_row.push(l);
    }
    Ok(ApproxOutput {
        output,
        diagnostics: Diagnostics { samples_per_row, spill_per_row, wall_time: start.elapsed(), guarantee_void: false },
    })
}

/// Whether `(k, l)` meets both sample-size conditions of the weighted
/// estimator: `k^2 l >= 8 n^2 eps^-2 ln(4/delta)` and
/// `k l >= 2 n eps^-2 ln(2/delta)`.
pub fn weighted_conditions_hold(n: usize, k: usize, l: usize, epsilon: f64, delta: f64) -> bool {
    let (n, k, l) = (n as f64, k as f64, l as f64);
    let e2 = epsilon * epsilon;
    k * k * l >= 8.0 * n * n / e2 * (4.0 / delta).ln() && k * l >= 2.0 * n / e2 * (2.0 / delta).ln()
}

/// Smallest `k = l` meeting [`weighted_conditions_hold`]. When `k + l`
/// would not fit in `n` the exact setting `(n, 0)` is returned.
pub fn choose_parameters(n: usize, epsilon: f64, delta: f64) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::InvalidParameter("n = 0".into()));
    }
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon}, delta {delta}")));
    }
    let nf = n as f64;
    let e2 = epsilon * epsilon;
    let cubic = (8.0 * nf * nf / e2 * (4.0 / delta).ln()).cbrt();
    let square = (2.0 * nf / e2 * (2.0 / delta).ln()).sqrt();
    let mut k = (cubic.max(square).ceil() as usize).saturating_sub(1).max(1);
    while !weighted_conditions_hold(n, k, k, epsilon, delta) {
        k += 1;
        if 2 * k > n {
            break;
        }
    }
    if 2 * k > n {
        Ok((n, 0))
    } else {
        Ok((k, k))
    }
}
