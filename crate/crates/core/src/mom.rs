//! Median-of-means boosting of unbiased estimators.
//!
//! The total budget follows `K = (C / eps^2) * R * ln(2 / delta)` where `R` is
//! `Var / E^2` in multiplicative mode and `Var` in additive mode. The samples
//! are split into `ceil(G * ln(2 / delta))` groups; the estimate is the median
//! of the group means.

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const DEFAULT_MOM_CONSTANT: f64 = 4.0;
pub const DEFAULT_GROUP_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoMConfig {
    epsilon: f64,
    delta: f64,
    variance_bound: f64,
    mean_lower_bound: Option<f64>,
    constant: f64,
    group_factor: f64,
}

impl MoMConfig {
    /// `|estimate - mean| <= epsilon` with probability `1 - delta`.
    pub fn additive(epsilon: f64, delta: f64, variance_bound: f64) -> Result<Self> {
        Self::build(epsilon, delta, variance_bound, None)
    }

    /// `|estimate - mean| <= epsilon * mean` with probability `1 - delta`,
    /// given `mean >= mean_lower_bound > 0`.
    pub fn multiplicative(
        epsilon: f64,
        delta: f64,
        variance_bound: f64,
        mean_lower_bound: f64,
    ) -> Result<Self> {
        if !(mean_lower_bound > 0.0) || !mean_lower_bound.is_finite() {
            return Err(Error::InvalidParameter(format!("mean lower bound {mean_lower_bound}")));
        }
        Self::build(epsilon, delta, variance_bound, Some(mean_lower_bound))
    }

    fn build(epsilon: f64, delta: f64, variance_bound: f64, mean_lower_bound: Option<f64>) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {delta}")));
        }
        if !(variance_bound >= 0.0) || !variance_bound.is_finite() {
            return Err(Error::InvalidParameter(format!("variance bound {variance_bound}")));
        }
        Ok(Self {
            epsilon,
            delta,
            variance_bound,
            mean_lower_bound,
            constant: DEFAULT_MOM_CONSTANT,
            group_factor: DEFAULT_GROUP_FACTOR,
        })
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        assert!(constant > 0.0, "median-of-means constant must be positive");
        self.constant = constant;
        self
    }

    pub fn with_group_factor(mut self, group_factor: f64) -> Self {
        assert!(group_factor > 0.0, "group factor must be positive");
        self.group_factor = group_factor;
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn variance_bound(&self) -> f64 {
        self.variance_bound
    }

    pub fn mean_lower_bound(&self) -> Option<f64> {
        self.mean_lower_bound
    }

    pub fn is_multiplicative(&self) -> bool {
        self.mean_lower_bound.is_some()
    }

    pub fn group_count(&self) -> usize {
        ((self.group_factor * (2.0 / self.delta).ln()).ceil() as usize).max(1)
    }

    /// Total sample budget `K` before rounding into groups.
    pub fn total_samples(&self) -> f64 {
        let ratio = match self.mean_lower_bound {
            Some(m) => self.variance_bound / (m * m),
            None => self.variance_bound,
        };
        self.constant / (self.epsilon * self.epsilon) * ratio * (2.0 / self.delta).ln()
    }

    pub fn plan(&self) -> MomPlan {
        let groups = self.group_count();
        let per_group = ((self.total_samples() / groups as f64).ceil() as usize).max(1);
        MomPlan { groups, per_group }
    }
}

/// Concrete group layout for one median-of-means run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomPlan {
    pub groups: usize,
    pub per_group: usize,
}

impl MomPlan {
    pub fn total(&self) -> usize {
        self.groups * self.per_group
    }

    /// Layout that satisfies both plans.
    pub fn max(self, other: MomPlan) -> MomPlan {
        MomPlan { groups: self.groups.max(other.groups), per_group: self.per_group.max(other.per_group) }
    }
}

pub fn median_of_means(
    mut sampler: impl FnMut(&mut RngStream) -> f64,
    cfg: &MoMConfig,
    rng: &mut RngStream,
) -> f64 {
    let plan = cfg.plan();
    let mut out = [0.0];
    median_of_means_vec(1, |r, buf| buf[0] = sampler(r), plan, rng, &mut out);
    out[0]
}

/// Coordinate-wise median of means for a vector-valued sampler. Every
/// coordinate shares the same draws; each one individually carries the
/// guarantee of `plan`.
pub fn median_of_means_vec(
    dim: usize,
    mut sampler: impl FnMut(&mut RngStream, &mut [f64]),
    plan: MomPlan,
    rng: &mut RngStream,
    out: &mut [f64],
) {
    assert_eq!(out.len(), dim, "output length");
    let mut draw = vec![0.0; dim];
    let mut anchor = vec![0.0; dim];
    let mut acc = vec![0.0; dim];
    let mut means = vec![Vec::with_capacity(plan.groups); dim];
    for _ in 0..plan.groups {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for s in 0..plan.per_group {
            sampler(rng, &mut draw);
            if s == 0 {
                anchor.copy_from_slice(&draw);
            } else {
                for ((a, x), c) in acc.iter_mut().zip(&draw).zip(&anchor) {
                    *a += x - c;
                }
            }
        }
        // Anchored sums keep a constant sampler exact.
        for (t, group) in means.iter_mut().enumerate() {
            group.push(anchor[t] + acc[t] / plan.per_group as f64);
        }
    }
    for (o, group) in out.iter_mut().zip(means.iter_mut()) {
        *o = median(group);
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        if a == b { a } else { 0.5 * (a + b) }
    }
}
