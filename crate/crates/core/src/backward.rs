//! Sub-quadratic estimators of the attention gradients.
//!
//! `P` is never materialised. Rows of `P` are sampled exactly with lazy
//! Gumbel draws from a top-k index, and products with `P^T` are estimated by
//! one-step random walks: pick a source row proportional to a nonnegative
//! weight vector, then step to a key drawn from that row's softmax.
//!
//! Each estimator returns an [`ErrorBudget`] alongside its estimate. Budgets
//! are computed from quantities the estimator actually knows, so callers can
//! measure how often they hold instead of trusting them.

use std::cell::OnceCell;

use crate::error::{Error, Result};
use crate::forward::IndexBackend;
use crate::matrix::{dot, Matrix};
use crate::mom::{median_of_means_vec, MoMConfig, MomPlan};
use crate::oracle::{AttentionProblem, UpstreamGradient};
use crate::rng::RngStream;
use crate::sampling::{build_cdf_tables, sample_shifted_y, CdfSampler, CdfTables, ShiftBound, SoftmaxRowSampler, TopKSet};

const TAG_S_HAT: u64 = 1;
const TAG_DV: u64 = 2;
const TAG_DQ: u64 = 3;
const TAG_DK_A: u64 = 4;
const TAG_DK_B: u64 = 5;
const TAG_DK_B_WALK: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Walks per Markov-chain product; `None` uses [`walk_count`].
    pub walks: Option<usize>,
    /// Top-k size for the index; `None` uses `ceil(sqrt(n))`.
    pub k: Option<usize>,
    pub index: IndexBackend,
    pub cutoff_slack: f64,
    pub seed: u64,
    /// Assumed `||K||_inf`; `None` measures it from the data.
    pub k_cap: Option<f64>,
    /// Assumed `||dO||_inf`; `None` measures it from the data.
    pub d_o_cap: Option<f64>,
}

impl BackwardConfig {
    pub fn new(epsilon: f64, delta: f64, seed: u64) -> Self {
        Self {
            epsilon,
            delta,
            walks: None,
            k: None,
            index: IndexBackend::Exact,
            cutoff_slack: 0.0,
            seed,
            k_cap: None,
            d_o_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta {}", self.delta)));
        }
        if self.walks == Some(0) || self.k == Some(0) {
            return Err(Error::InvalidParameter("walks and k must be positive".into()));
        }
        for cap in [self.k_cap, self.d_o_cap].into_iter().flatten() {
            if !(cap >= 0.0) {
                return Err(Error::InvalidParameter(format!("cap {cap}")));
            }
        }
        Ok(())
    }
}

/// `ceil(max(2 lg n, ln(n^2 d)) / eps^2)`: enough walks for every one of the
/// `n d` entries to be within `eps` (relative to the walk mass) after a
/// union bound.
pub fn walk_count(n: usize, d: usize, epsilon: f64) -> usize {
    let nf = n as f64;
    let logs = (2.0 * nf.log2()).max((nf * nf * d as f64).ln());
    ((logs / (epsilon * epsilon)).ceil() as usize).max(1)
}

/// Per-entry additive error bounds for a gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBudget {
    pub bound: Matrix,
    /// Inputs exceed the configured caps the bound relies on.
    pub guarantee_void: bool,
}

impl ErrorBudget {
    /// Fraction of entries with `|estimate - exact| <= bound`.
    pub fn fraction_within(&self, estimate: &Matrix, exact: &Matrix) -> f64 {
        assert_eq!(estimate.shape(), exact.shape());
        assert_eq!(estimate.shape(), self.bound.shape());
        let total = estimate.as_slice().len();
        if total == 0 {
            return 1.0;
        }
        let ok = estimate
            .as_slice()
            .iter()
            .zip(exact.as_slice())
            .zip(self.bound.as_slice())
            .filter(|((e, x), b)| (*e - *x).abs() <= **b)
            .count();
        ok as f64 / total as f64
    }

    fn combine(a: &ErrorBudget, b: &ErrorBudget) -> ErrorBudget {
        ErrorBudget {
            bound: a.bound.add(&b.bound).expect("matching budget shapes"),
            guarantee_void: a.guarantee_void || b.guarantee_void,
        }
    }
}

/// Query access to the rows of `P = softmax(Q K^T)` without materialising it.
#[derive(Debug)]
pub struct RowStochasticAccess<'a> {
    problem: &'a AttentionProblem,
    topk: Vec<TopKSet>,
    cutoff_slack: f64,
}

impl<'a> RowStochasticAccess<'a> {
    pub fn new(problem: &'a AttentionProblem, index: IndexBackend, k: usize, cutoff_slack: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k = 0".into()));
        }
        let knn = index.build(&problem.k)?;
        let topk = (0..problem.n())
            .map(|i| {
                let universe = problem.visible(i);
                TopKSet::retrieve(&knn, &problem.q, i, k.min(universe), universe)
            })
            .collect();
        Ok(Self { problem, topk, cutoff_slack })
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn problem(&self) -> &AttentionProblem {
        self.problem
    }

    pub fn sampler(&self, i: usize) -> SoftmaxRowSampler<'_> {
        SoftmaxRowSampler::new(self.problem.q.row(i), &self.problem.k, &self.topk[i], self.problem.visible(i))
            .with_slack(self.cutoff_slack)
    }

    /// Exact draw of a column from row `i` of `P`.
    #[inline]
    pub fn sample_row(&self, i: usize, rng: &mut RngStream) -> usize {
        self.sampler(i).sample(rng)
    }

    /// Unnormalised log-weight of `P[i][k]`, O(d).
    #[inline]
    pub fn log_weight(&self, i: usize, k: usize) -> f64 {
        self.problem.score(i, k)
    }
}

/// Unbiased estimate of `P^T x` for `x >= 0` from `walks` one-step walks.
/// A zero vector maps to zero.
pub fn approx_pos_prod(
    access: &RowStochasticAccess<'_>,
    x: &[f64],
    walks: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let n = access.n();
    if x.len() != n {
        return Err(Error::Shape(format!("vector of length {} for n = {n}", x.len())));
    }
    if let Some(bad) = x.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("negative or non-finite entry {bad}")));
    }
    let mut hist = vec![0.0; n];
    let total: f64 = x.iter().sum();
    if total == 0.0 {
        return Ok(hist);
    }
    if walks == 0 {
        return Err(Error::InvalidParameter("zero walks".into()));
    }
    let source = CdfSampler::new(x)?;
    for _ in 0..walks {
        let i = source.sample(rng);
        hist[access.sample_row(i, rng)] += 1.0;
    }
    let scale = total / walks as f64;
    hist.iter_mut().for_each(|h| *h *= scale);
    Ok(hist)
}

/// `P^T x` for signed `x`: shifts by `M = max(0, -min x)`, walks on
/// `x + M`, and subtracts `M * s_hat` with `s_hat ≈ P^T 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductEstimate {
    pub values: Vec<f64>,
    pub shift: f64,
}

pub fn estimate_product(
    access: &RowStochasticAccess<'_>,
    x: &[f64],
    walks: usize,
    s_hat: &[f64],
    rng: &mut RngStream,
) -> Result<ProductEstimate> {
    if s_hat.len() != x.len() {
        return Err(Error::Shape("s_hat length".into()));
    }
    let shift = x.iter().fold(0.0f64, |m, &v| m.max(-v));
    let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
    let mut values = approx_pos_prod(access, &shifted, walks, rng)?;
    if shift > 0.0 {
        for (v, s) in values.iter_mut().zip(s_hat) {
            *v -= shift * s;
        }
    }
    Ok(ProductEstimate { values, shift })
}

/// Shared pre-processing for the gradient estimators: the top-k sets, the
/// walk count and (lazily) `s_hat ≈ P^T 1`.
#[derive(Debug)]
pub struct BackwardContext<'a> {
    access: RowStochasticAccess<'a>,
    cfg: BackwardConfig,
    walks: usize,
    root: RngStream,
    s_hat: OnceCell<Vec<f64>>,
}

impl<'a> BackwardContext<'a> {
    pub fn new(p: &'a AttentionProblem, cfg: &BackwardConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = p.q.shape();
        let k = cfg.k.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n);
        let access = RowStochasticAccess::new(p, cfg.index, k, cfg.cutoff_slack)?;
        let walks = cfg.walks.unwrap_or_else(|| walk_count(n, d, cfg.epsilon));
        Ok(Self { access, cfg: *cfg, walks, root: RngStream::new(cfg.seed, 2), s_hat: OnceCell::new() })
    }

    pub fn access(&self) -> &RowStochasticAccess<'a> {
        &self.access
    }

    pub fn walks(&self) -> usize {
        self.walks
    }

    fn problem(&self) -> &'a AttentionProblem {
        self.access.problem
    }

    /// `s_hat ≈ P^T 1`, within `eps * n` per entry.
    pub fn s_hat(&self) -> &[f64] {
        self.s_hat.get_or_init(|| {
            let ones = vec![1.0; self.access.n()];
            let mut rng = self.root.substream(TAG_S_HAT);
            approx_pos_prod(&self.access, &ones, self.walks, &mut rng).expect("all-ones weights are valid")
        })
    }

    fn check(&self, d_o: &UpstreamGradient) -> Result<()> {
        if d_o.matrix().shape() != self.problem().q.shape() {
            return Err(Error::Shape(format!(
                "dO {:?} vs problem {:?}",
                d_o.matrix().shape(),
                self.problem().q.shape()
            )));
        }
        Ok(())
    }

    /// `D^V = P^T dO`, one Markov-chain product per column. The budget for
    /// column `j` is `eps * sum(dO[:, j]) + 2 n eps M_j`.
    pub fn dv(&self, d_o: &UpstreamGradient) -> Result<(Matrix, ErrorBudget)> {
        self.check(d_o)?;
        let (n, d) = self.problem().q.shape();
        let eps = self.cfg.epsilon;
        let mut est = Matrix::zeros(n, d);
        let mut bound = Matrix::zeros(n, d);
        let dv_rng = self.root.substream(TAG_DV);
        for j in 0..d {
            let x = d_o.matrix().column(j);
            let mut rng = dv_rng.substream(j as u64);
            let prod = if x.iter().all(|&v| v >= 0.0) {
                ProductEstimate { values: approx_pos_prod(&self.access, &x, self.walks, &mut rng)?, shift: 0.0 }
            } else {
                estimate_product(&self.access, &x, self.walks, self.s_hat(), &mut rng)?
            };
            est.set_column(j, &prod.values);
            let b = eps * x.iter().sum::<f64>() + 2.0 * n as f64 * eps * prod.shift;
            bound.set_column(j, &vec![b.max(0.0); n]);
        }
        Ok((est, ErrorBudget { bound, guarantee_void: false }))
    }

    /// Measured or configured `||K[:, j]||_inf` and whether the data exceeds
    /// a configured cap.
    fn key_caps(&self) -> (Vec<f64>, bool) {
        let k = &self.problem().k;
        let measured: Vec<f64> = (0..k.cols()).map(|j| column_max_abs(k, j)).collect();
        match self.cfg.k_cap {
            Some(cap) => (vec![cap; k.cols()], measured.iter().any(|&m| m > cap)),
            None => (measured, false),
        }
    }

    /// Bound on `|D^P[i][s]| = |<dO_i, V_s>|` for each row `i`.
    fn dp_reach(&self, d_o: &UpstreamGradient) -> (Vec<f64>, bool) {
        let p = self.problem();
        let v_max: Vec<f64> = (0..p.d()).map(|t| column_max_abs(&p.v, t)).collect();
        let mut void = false;
        let reach = (0..p.n())
            .map(|i| {
                let row = d_o.matrix().row(i);
                match self.cfg.d_o_cap {
                    Some(cap) => {
                        void |= row.iter().any(|g| g.abs() > cap);
                        cap * v_max.iter().sum::<f64>()
                    }
                    None => row.iter().zip(&v_max).map(|(g, m)| g.abs() * m).sum(),
                }
            })
            .collect();
        (reach, void)
    }

    /// `D^Q[i][j] = E1 - E2 * E3` under `D_i` with `E1 = E[D^P_ik K_kj]`,
    /// `E2 = E[K_kj]`, `E3 = E[D^P_ik]`, each an additive
    /// `(eps, delta / 3)` median-of-means estimate. All `2d + 1` expectations
    /// of a row share the same draws.
    ///
    /// `E2` only enters through `E2 * E3` and `|E3| <= r_i` is known up
    /// front, so when `r_i < 1` it is estimated to `eps / r_i` instead of
    /// `eps`. Budget: `eps + eps |E2_hat| + min(|E3_hat| + eps, r_i) eps_2`,
    /// which is `eps + eps^2 + eps (|E2_hat| + |E3_hat|)` at most when
    /// `eps_2 = eps`.
    pub fn dq(&self, d_o: &UpstreamGradient) -> Result<(Matrix, ErrorBudget)> {
        self.check(d_o)?;
        let p = self.problem();
        let (n, d) = p.q.shape();
        let eps = self.cfg.epsilon;
        let part_delta = self.cfg.delta / 3.0;
        let (k_caps, k_void) = self.key_caps();
        let (reach, d_void) = self.dp_reach(d_o);

        let mut est = Matrix::zeros(n, d);
        let mut bound = Matrix::zeros(n, d);
        let dq_rng = self.root.substream(TAG_DQ);
        let mut moments = vec![0.0; 2 * d + 1];
        for i in 0..n {
            let eps_2 = eps / reach[i].min(1.0).max(1e-300);
            let mut plan = MoMConfig::additive(eps, part_delta, reach[i] * reach[i])?.plan();
            for &kc in &k_caps {
                plan = plan
                    .max(MoMConfig::additive(eps_2, part_delta, kc * kc)?.plan())
                    .max(MoMConfig::additive(eps, part_delta, (reach[i] * kc).powi(2))?.plan());
            }
            let sampler = self.access.sampler(i);
            let d_o_row = d_o.matrix().row(i);
            let mut rng = dq_rng.substream(i as u64);
            median_of_means_vec(
                2 * d + 1,
                |r, buf| {
                    let s = sampler.sample(r);
                    let key = p.k.row(s);
                    let dp = dot(d_o_row, p.v.row(s));
                    for t in 0..d {
                        buf[t] = dp * key[t];
                        buf[d + t] = key[t];
                    }
                    buf[2 * d] = dp;
                },
                plan,
                &mut rng,
                &mut moments,
            );
            let e3 = moments[2 * d];
            for j in 0..d {
                let (e1, e2) = (moments[j], moments[d + j]);
                est[(i, j)] = e1 - e2 * e3;
                bound[(i, j)] = eps + eps * e2.abs() + (e3.abs() + eps).min(reach[i]) * eps_2;
            }
        }
        Ok((est, ErrorBudget { bound, guarantee_void: k_void || d_void }))
    }

    /// First half of the key gradient, `A[i][j] = sum_k P[k][i] Y_i[k][j]`
    /// with `Y_i[k][j] = Q[k][j] <dO_k, V_i>`. Each entry is a walk estimate:
    /// draw `k ∝ Y_i[k][j] + M` from the prefix tables, step `l ~ D_k`, and
    /// count returns to `i`.
    ///
    /// Budget: `eps * sum_k Y_i[k][j] + 2 n eps M`.
    pub fn dk_part_a(
        &self,
        d_o: &UpstreamGradient,
        tables: &CdfTables,
        shift: ShiftBound,
    ) -> Result<(Matrix, ErrorBudget)> {
        self.check(d_o)?;
        let p = self.problem();
        let (n, d) = p.q.shape();
        if tables.n() != n || tables.d() != d {
            return Err(Error::Shape("prefix tables do not match the problem".into()));
        }
        let eps = self.cfg.epsilon;
        let m = shift.value();
        let s_hat = if m > 0.0 { Some(self.s_hat()) } else { None };
        let mut est = Matrix::zeros(n, d);
        let mut bound = Matrix::zeros(n, d);
        let a_rng = self.root.substream(TAG_DK_A);
        for i in 0..n {
            let v_row = p.v.row(i);
            for j in 0..d {
                let normalizer = tables.normalizer(v_row, j, shift);
                let y_sum = normalizer - n as f64 * m;
                bound[(i, j)] = (eps * y_sum + 2.0 * n as f64 * eps * m).max(0.0);
                let correction = s_hat.map_or(0.0, |s| m * s[i]);
                if normalizer <= 0.0 {
                    if m == 0.0 && normalizer == 0.0 {
                        // All Y_i[k][j] are zero.
                        est[(i, j)] = 0.0;
                        continue;
                    }
                    return Err(Error::DegenerateWeights { total: normalizer });
                }
                let mut rng = a_rng.substream((i * d + j) as u64);
                let mut hits = 0usize;
                for _ in 0..self.walks {
                    let k = sample_shifted_y(tables, v_row, j, shift, &mut rng)?;
                    if self.access.sample_row(k, &mut rng) == i {
                        hits += 1;
                    }
                }
                est[(i, j)] = hits as f64 / self.walks as f64 * normalizer - correction;
            }
        }
        Ok((est, ErrorBudget { bound, guarantee_void: false }))
    }

    /// Per-row `D_hat[k] ≈ <D^P_k, P_k>`, each accurate enough that
    /// `|Q[k][j] * D_hat[k] - X[k][j]| <= eps` for every `j`.
    pub fn dp_centres(&self, d_o: &UpstreamGradient) -> Result<Vec<f64>> {
        self.check(d_o)?;
        let p = self.problem();
        let eps = self.cfg.epsilon;
        let (reach, _) = self.dp_reach(d_o);
        let b_rng = self.root.substream(TAG_DK_B);
        let mut out = [0.0];
        (0..p.n())
            .map(|k| {
                let q_max = p.q.row(k).iter().fold(0.0f64, |a, x| a.max(x.abs()));
                let plan: MomPlan = if q_max == 0.0 {
                    MomPlan { groups: 1, per_group: 1 }
                } else {
                    MoMConfig::additive(eps / q_max, self.cfg.delta, reach[k] * reach[k])?.plan()
                };
                let sampler = self.access.sampler(k);
                let d_o_row = d_o.matrix().row(k);
                let mut rng = b_rng.substream(k as u64);
                median_of_means_vec(
                    1,
                    |r, buf| buf[0] = dot(d_o_row, p.v.row(sampler.sample(r))),
                    plan,
                    &mut rng,
                    &mut out,
                );
                Ok(out[0])
            })
            .collect()
    }

    /// Second half of the key gradient, `B = P^T X` with
    /// `X[k][j] = Q[k][j] <D^P_k, P_k>`. `X` is estimated by median of
    /// means, then each column goes through [`estimate_product`].
    ///
    /// Budget: `eps (s_hat_i + eps n) + eps sum_k X_hat[k][j] + 2 n eps M_j`,
    /// where `s_hat_i + eps n` bounds the column sum of `P`.
    pub fn dk_part_b(&self, d_o: &UpstreamGradient) -> Result<(Matrix, ErrorBudget)> {
        self.check(d_o)?;
        let p = self.problem();
        let (n, d) = p.q.shape();
        let eps = self.cfg.epsilon;
        let (_, d_void) = self.dp_reach(d_o);
        let centres = self.dp_centres(d_o)?;
        let s_hat = self.s_hat();
        let mut est = Matrix::zeros(n, d);
        let mut bound = Matrix::zeros(n, d);
        let walk_rng = self.root.substream(TAG_DK_B_WALK);
        for j in 0..d {
            let x: Vec<f64> = (0..n).map(|k| p.q[(k, j)] * centres[k]).collect();
            let mut rng = walk_rng.substream(j as u64);
            let prod = estimate_product(&self.access, &x, self.walks, s_hat, &mut rng)?;
            est.set_column(j, &prod.values);
            let x_sum: f64 = x.iter().sum();
            let walk_part = (eps * x_sum + 2.0 * n as f64 * eps * prod.shift).max(0.0);
            for i in 0..n {
                bound[(i, j)] = eps * (s_hat[i] + eps * n as f64) + walk_part;
            }
        }
        Ok((est, ErrorBudget { bound, guarantee_void: d_void }))
    }

    /// `D^K = A - B`. A single row has no key gradient and returns zero.
    pub fn dk(&self, d_o: &UpstreamGradient) -> Result<(Matrix, ErrorBudget)> {
        self.check(d_o)?;
        let p = self.problem();
        let (n, d) = p.q.shape();
        if n == 1 {
            return Ok((Matrix::zeros(1, d), ErrorBudget { bound: Matrix::zeros(1, d), guarantee_void: false }));
        }
        let tables = build_cdf_tables(&p.q, d_o.matrix())?;
        let shift = ShiftBound::bound_for_y(&p.q, d_o.matrix(), &p.v);
        let (a, budget_a) = self.dk_part_a(d_o, &tables, shift)?;
        let (b, budget_b) = self.dk_part_b(d_o)?;
        Ok((a.sub(&b)?, ErrorBudget::combine(&budget_a, &budget_b)))
    }
}

fn column_max_abs(m: &Matrix, j: usize) -> f64 {
    (0..m.rows()).fold(0.0f64, |a, i| a.max(m[(i, j)].abs()))
}

pub fn estimate_dv(p: &AttentionProblem, d_o: &UpstreamGradient, cfg: &BackwardConfig) -> Result<(Matrix, ErrorBudget)> {
    BackwardContext::new(p, cfg)?.dv(d_o)
}

pub fn estimate_dq(p: &AttentionProblem, d_o: &UpstreamGradient, cfg: &BackwardConfig) -> Result<(Matrix, ErrorBudget)> {
    BackwardContext::new(p, cfg)?.dq(d_o)
}

pub fn estimate_dk(p: &AttentionProblem, d_o: &UpstreamGradient, cfg: &BackwardConfig) -> Result<(Matrix, ErrorBudget)> {
    BackwardContext::new(p, cfg)?.dk(d_o)
}

pub fn estimate_dk_part_a(
    p: &AttentionProblem,
    d_o: &UpstreamGradient,
    tables: &CdfTables,
    shift: ShiftBound,
    cfg: &BackwardConfig,
) -> Result<(Matrix, ErrorBudget)> {
    BackwardContext::new(p, cfg)?.dk_part_a(d_o, tables, shift)
}

pub fn estimate_dk_part_b(p: &AttentionProblem, d_o: &UpstreamGradient, cfg: &BackwardConfig) -> Result<(Matrix, ErrorBudget)> {
    BackwardContext::new(p, cfg)?.dk_part_b(d_o)
}
