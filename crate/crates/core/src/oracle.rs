//! Exact O(n^2 d) attention and gradients. Every estimator in the crate is
//! checked against these.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// A `(Q, K, V)` triple. The `1/sqrt(d)` scale is never applied here; fold it
/// into the keys with [`AttentionProblem::prefold_scale`] if wanted.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProblem {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub causal: bool,
}

impl AttentionProblem {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, causal: bool) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "Q {:?}, K {:?}, V {:?} must agree",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::Shape("empty problem".into()));
        }
        for (m, name) in [(&q, "Q"), (&k, "K"), (&v, "V")] {
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(Self { q, k, v, causal })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    /// Divides the keys by `sqrt(d)`.
    pub fn prefold_scale(mut self) -> Self {
        let s = 1.0 / (self.d() as f64).sqrt();
        self.k = self.k.scale(s);
        self
    }

    /// Keys that row `i` may attend to: `0..i+1` when causal, else `0..n`.
    #[inline]
    pub fn visible(&self, i: usize) -> usize {
        if self.causal { i + 1 } else { self.n() }
    }

    #[inline]
    pub fn score(&self, i: usize, j: usize) -> f64 {
        dot(self.q.row(i), self.k.row(j))
    }
}

/// `dphi/dO`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGradient(pub Matrix);

impl UpstreamGradient {
    pub fn new(d_o: Matrix) -> Result<Self> {
        if !d_o.is_finite() {
            return Err(Error::NonFinite("dO"));
        }
        Ok(Self(d_o))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    fn check(&self, p: &AttentionProblem) -> Result<()> {
        if self.0.shape() != p.q.shape() {
            return Err(Error::Shape(format!("dO {:?} vs problem {:?}", self.0.shape(), p.q.shape())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Row-wise softmax of `Q K^T`, masked above the diagonal when causal.
pub fn attention_probabilities(p: &AttentionProblem) -> Matrix {
    let n = p.n();
    let mut probs = Matrix::zeros(n, n);
    for i in 0..n {
        let visible = p.visible(i);
        let row = probs.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().take(visible).enumerate() {
            *r = p.score(i, j);
            max = max.max(*r);
        }
        let mut total = 0.0;
        for r in row.iter_mut().take(visible) {
            *r = (*r - max).exp();
            total += *r;
        }
        for r in row.iter_mut().take(visible) {
            *r /= total;
        }
    }
    probs
}

pub fn exact_attention(p: &AttentionProblem) -> Matrix {
    let (n, d) = p.q.shape();
    let mut out = Matrix::zeros(n, d);
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let visible = p.visible(i);
        let q = p.q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, w) in weights.iter_mut().take(visible).enumerate() {
            *w = dot(q, p.k.row(j));
            max = max.max(*w);
        }
        let mut total = 0.0;
        let o = out.row_mut(i);
        for (j, w) in weights.iter().take(visible).enumerate() {
            let e = (w - max).exp();
            total += e;
            for (o_t, v) in o.iter_mut().zip(p.v.row(j)) {
                *o_t += e * v;
            }
        }
        o.iter_mut().for_each(|x| *x /= total);
    }
    out
}

/// `D^P = dO V^T`.
pub fn exact_dp(d_o: &UpstreamGradient, v: &Matrix) -> Result<Matrix> {
    if d_o.0.cols() != v.cols() {
        return Err(Error::Shape(format!("dO {:?} vs V {:?}", d_o.0.shape(), v.shape())));
    }
    Ok(Matrix::from_fn(d_o.0.rows(), v.rows(), |i, j| dot(d_o.0.row(i), v.row(j))))
}

pub fn exact_gradients(p: &AttentionProblem, d_o: &UpstreamGradient) -> Result<GradientSet> {
    d_o.check(p)?;
    let n = p.n();
    let probs = attention_probabilities(p);
    let dp = exact_dp(d_o, &p.v)?;
    let dv = probs.transpose().matmul(&d_o.0)?;
    // dS_ij = P_ij (D^P_ij - <D^P_i, P_i>)
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let centre = dot(dp.row(i), probs.row(i));
        for j in 0..n {
            ds[(i, j)] = probs[(i, j)] * (dp[(i, j)] - centre);
        }
    }
    let dq = ds.matmul(&p.k)?;
    let dk = ds.transpose().matmul(&p.q)?;
    Ok(GradientSet { dq, dk, dv })
}

/// The two halves of `dK = A - B`:
/// `A[i][j] = sum_k P[k][i] D^P[k][i] Q[k][j]` and
/// `B[i][j] = sum_k P[k][i] <D^P_k, P_k> Q[k][j]`.
pub fn exact_dk_parts(p: &AttentionProblem, d_o: &UpstreamGradient) -> Result<(Matrix, Matrix)> {
    d_o.check(p)?;
    let (n, d) = p.q.shape();
    let probs = attention_probabilities(p);
    let dp = exact_dp(d_o, &p.v)?;
    let centres: Vec<f64> = (0..n).map(|k| dot(dp.row(k), probs.row(k))).collect();
    let mut a = Matrix::zeros(n, d);
    let mut b = Matrix::zeros(n, d);
    for k in 0..n {
        for i in 0..n {
            let w = probs[(k, i)];
            if w == 0.0 {
                continue;
            }
            for j in 0..d {
                a[(i, j)] += w * dp[(k, i)] * p.q[(k, j)];
                b[(i, j)] += w * centres[k] * p.q[(k, j)];
            }
        }
    }
    Ok((a, b))
}

fn set_entry(p: &mut AttentionProblem, which: usize, at: (usize, usize), value: f64) {
    match which {
        0 => p.q[at] = value,
        1 => p.k[at] = value,
        _ => p.v[at] = value,
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `loss(exact_attention(.))` with respect to
/// every entry of Q, K and V.
pub fn finite_diff_gradients(
    p: &AttentionProblem,
    loss: impl Fn(&Matrix) -> f64,
    h: f64,
) -> Result<GradientSet> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step {h}")));
    }
    let (n, d) = p.q.shape();
    let mut grads = [Matrix::zeros(n, d), Matrix::zeros(n, d), Matrix::zeros(n, d)];
    let mut work = p.clone();
    for (which, grad) in grads.iter_mut().enumerate() {
        for i in 0..n {
            for j in 0..d {
                let orig = [&work.q, &work.k, &work.v][which][(i, j)];
                set_entry(&mut work, which, (i, j), orig + h);
                let up = loss(&exact_attention(&work));
                set_entry(&mut work, which, (i, j), orig - h);
                let down = loss(&exact_attention(&work));
                set_entry(&mut work, which, (i, j), orig);
                grad[(i, j)] = (up - down) / (2.0 * h);
            }
        }
    }
    let [dq, dk, dv] = grads;
    Ok(GradientSet { dq, dk, dv })
}
