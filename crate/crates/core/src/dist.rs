//! Random variates used by the samplers: Gumbel noise (plain and
//! tail-conditioned), exact binomial counts and uniform subsets.

use std::collections::HashSet;

use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelParams {
    mu: f64,
    beta: f64,
}

impl GumbelParams {
    pub fn new(mu: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("Gumbel(mu={mu}, beta={beta})")));
        }
        Ok(Self { mu, beta })
    }

    pub fn standard() -> Self {
        Self { mu: 0.0, beta: 1.0 }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.mu + self.beta * EULER_GAMMA
    }
}

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Inverse CDF of Gumbel(mu, beta) at `u` in (0, 1).
#[inline]
pub fn gumbel_from_uniform(u: f64, params: GumbelParams) -> f64 {
    params.mu - params.beta * (-u.ln()).ln()
}

#[inline]
pub fn gumbel_sample(rng: &mut RngStream, params: GumbelParams) -> f64 {
    gumbel_from_uniform(rng.open01(), params)
}

#[inline]
pub(crate) fn standard_gumbel(rng: &mut RngStream) -> f64 {
    -(-rng.open01().ln()).ln()
}

/// CDF of the standard Gumbel distribution.
#[inline]
pub fn gumbel_cdf(x: f64) -> f64 {
    (-(-x).exp()).exp()
}

/// Probability that a standard Gumbel variate exceeds `cutoff`, computed
/// without cancellation for large cutoffs.
#[inline]
pub fn gumbel_tail(cutoff: f64) -> f64 {
    -(-(-cutoff).exp()).exp_m1()
}

/// Standard Gumbel variate conditioned on exceeding `cutoff`, given `v`
/// uniform on (0, 1).
///
/// This is the inverse CDF on `(F(cutoff), 1)`, written in terms of
/// `E = exp(-G)`, which is Exp(1) truncated to `(0, exp(-cutoff))`, so that
/// tails far above the mode keep full precision. `cutoff = -inf` gives the
/// unconditional distribution.
#[inline]
pub fn conditional_gumbel_from_uniform(v: f64, cutoff: f64) -> f64 {
    let tail_mass = gumbel_tail(cutoff);
    let x = v * tail_mass;
    let g = if x > 1e-12 {
        -(-(-x).ln_1p()).ln()
    } else {
        // E = x (1 + x/2 + ...); stay in log space so tiny x cannot underflow.
        let ln_tail = if tail_mass > 1e-12 { tail_mass.ln() } else { -cutoff - 0.5 * (-cutoff).exp() };
        -(v.ln() + ln_tail + 0.5 * x)
    };
    // Rounding can land a hair below the cutoff when the tail is tiny.
    if g > cutoff { g } else { cutoff.next_up() }
}

#[inline]
pub fn gumbel_sample_conditional_above(rng: &mut RngStream, cutoff: f64) -> f64 {
    conditional_gumbel_from_uniform(rng.open01(), cutoff)
}

/// Exact Bin(trials, p) draw (inversion for small means, BTPE otherwise).
pub fn binomial_sample(rng: &mut RngStream, trials: u64, p: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("binomial probability {p}")));
    }
    if trials == 0 || p == 0.0 {
        return Ok(0);
    }
    if p == 1.0 {
        return Ok(trials);
    }
    let dist = Binomial::new(trials, p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// `m` distinct indices drawn uniformly from `0..universe_size` minus
/// `excluded`. Entries of `excluded` at or beyond `universe_size` are ignored.
pub fn sample_k_distinct_excluding(
    rng: &mut RngStream,
    universe_size: usize,
    excluded: &[usize],
    m: usize,
) -> Result<Vec<usize>> {
    let mut sorted_owned;
    let mut excluded = excluded;
    if !excluded.windows(2).all(|w| w[0] < w[1]) {
        sorted_owned = excluded.to_vec();
        sorted_owned.sort_unstable();
        sorted_owned.dedup();
        excluded = &sorted_owned;
    }
    let in_range = excluded.partition_point(|&e| e < universe_size);
    let excluded = &excluded[..in_range];
    let available = universe_size - excluded.len();
    if m > available {
        return Err(Error::InsufficientPopulation { requested: m, available });
    }
    if m == 0 {
        return Ok(Vec::new());
    }

    if 2 * (excluded.len() + m) <= universe_size {
        // Sparse regime: rejection keeps the cost at O(m) expected draws.
        let mut picked = Vec::with_capacity(m);
        let mut seen: Option<HashSet<usize>> = (m > 32).then(|| HashSet::with_capacity(m));
        while picked.len() < m {
            let c = rng.below(universe_size);
            if excluded.binary_search(&c).is_ok() {
                continue;
            }
            let fresh = match seen.as_mut() {
                Some(set) => set.insert(c),
                None => !picked.contains(&c),
            };
            if fresh {
                picked.push(c);
            }
        }
        return Ok(picked);
    }

    let mut pool: Vec<usize> = Vec::with_capacity(available);
    let mut ex = excluded.iter().peekable();
    for c in 0..universe_size {
        if ex.peek() == Some(&&c) {
            ex.next();
        } else {
            pool.push(c);
        }
    }
    for t in 0..m {
        let s = t + rng.below(pool.len() - t);
        pool.swap(t, s);
    }
    pool.truncate(m);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_inverse_cdf_fixed_points() {
        let std = GumbelParams::standard();
        assert!((gumbel_from_uniform((-1.0f64).exp(), std) - 0.0).abs() < 1e-15);
        let u = (-(-2.0f64).exp()).exp();
        assert!((gumbel_from_uniform(u, std) - 2.0).abs() < 1e-12);
        let shifted = GumbelParams::new(1.5, 2.0).unwrap();
        assert!((gumbel_from_uniform((-1.0f64).exp(), shifted) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn gumbel_params_reject_bad_scale() {
        assert!(GumbelParams::new(0.0, 0.0).is_err());
        assert!(GumbelParams::new(0.0, -1.0).is_err());
        assert!(GumbelParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn conditional_respects_cutoff() {
        let mut rng = RngStream::new(3, 0);
        for cutoff in [-2.0, 0.0, 3.0, 20.0, 60.0] {
            for _ in 0..2000 {
                assert!(gumbel_sample_conditional_above(&mut rng, cutoff) > cutoff);
            }
        }
    }

    #[test]
    fn conditional_without_cutoff_is_plain_inverse_cdf() {
        for v in [0.01, 0.3, 0.5, 0.9, 0.999] {
            let a = conditional_gumbel_from_uniform(v, f64::NEG_INFINITY);
            // E = -ln(1 - v) so G = -ln(-ln(1 - v)), the inverse CDF at 1 - v.
            let b = gumbel_from_uniform(1.0 - v, GumbelParams::standard());
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conditional_matches_inverse_cdf_on_upper_interval() {
        let cutoff = 0.7;
        let f_b = gumbel_cdf(cutoff);
        for v in [0.1, 0.5, 0.9] {
            // u on (F(B), 1) mapped through the plain inverse CDF.
            let u = 1.0 - v * (1.0 - f_b);
            let expected = gumbel_from_uniform(u, GumbelParams::standard());
            let got = conditional_gumbel_from_uniform(v, cutoff);
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn binomial_edges() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(binomial_sample(&mut rng, 100, 0.0).unwrap(), 0);
        assert_eq!(binomial_sample(&mut rng, 100, 1.0).unwrap(), 100);
        assert_eq!(binomial_sample(&mut rng, 0, 0.5).unwrap(), 0);
        assert!(binomial_sample(&mut rng, 10, 1.5).is_err());
    }

    #[test]
    fn distinct_excluding_single_candidate() {
        let mut rng = RngStream::new(0, 0);
        for _ in 0..20 {
            assert_eq!(sample_k_distinct_excluding(&mut rng, 5, &[1, 2, 3, 4], 1).unwrap(), vec![0]);
            assert_eq!(sample_k_distinct_excluding(&mut rng, 5, &[4, 0, 2, 1], 1).unwrap(), vec![3]);
        }
    }

    #[test]
    fn distinct_excluding_exhaustive_is_permutation() {
        let mut rng = RngStream::new(1, 0);
        let mut got = sample_k_distinct_excluding(&mut rng, 4, &[], 4).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn distinct_excluding_rejects_overdraw() {
        let mut rng = RngStream::new(1, 0);
        let err = sample_k_distinct_excluding(&mut rng, 5, &[0, 1], 4).unwrap_err();
        assert_eq!(err, Error::InsufficientPopulation { requested: 4, available: 3 });
    }

    #[test]
    fn distinct_excluding_never_repeats_or_hits_excluded() {
        let mut rng = RngStream::new(9, 0);
        let excluded: Vec<usize> = (0..10).map(|i| i * 7).collect();
        for m in [1, 5, 40, 63, 90] {
            let got = sample_k_distinct_excluding(&mut rng, 100, &excluded, m).unwrap();
            assert_eq!(got.len(), m);
            let set: HashSet<_> = got.iter().copied().collect();
            assert_eq!(set.len(), m);
            assert!(got.iter().all(|g| *g < 100 && !excluded.contains(g)));
        }
    }
}
