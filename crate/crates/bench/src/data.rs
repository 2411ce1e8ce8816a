//! Seeded inputs and losses for the experiments.

use knn_attention::matrix::Matrix;
use knn_attention::{AttentionProblem, RngStream};
use rand_distr::{Distribution, StandardNormal};

use crate::spec::Loss;

pub fn uniform_matrix(rows: usize, cols: usize, half_width: f64, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| half_width * (2.0 * rng.open01() - 1.0))
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

/// `Q`, `K`, `V` uniform on `[-B, B]`.
pub fn uniform_problem(n: usize, d: usize, half_width: f64, causal: bool, rng: &mut RngStream) -> AttentionProblem {
    let q = uniform_matrix(n, d, half_width, rng);
    let k = uniform_matrix(n, d, half_width, rng);
    let v = uniform_matrix(n, d, half_width, rng);
    AttentionProblem::new(q, k, v, causal).expect("finite inputs of matching shape")
}

/// `Q`, `K`, `V` standard normal.
pub fn normal_problem(n: usize, d: usize, causal: bool, rng: &mut RngStream) -> AttentionProblem {
    let q = normal_matrix(n, d, rng);
    let k = normal_matrix(n, d, rng);
    let v = normal_matrix(n, d, rng);
    AttentionProblem::new(q, k, v, causal).expect("finite inputs of matching shape")
}

/// Fixed training target for a loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Dense target for squared error.
    Dense(Matrix),
    /// One class per row; the row of `O` is read as logits.
    Classes(Vec<usize>),
}

impl Target {
    pub fn random(loss: Loss, n: usize, d: usize, rng: &mut RngStream) -> Self {
        match loss {
            Loss::Mse => Target::Dense(normal_matrix(n, d, rng)),
            Loss::CrossEntropy => Target::Classes((0..n).map(|_| rng.below(d)).collect()),
        }
    }

    /// Loss value and its gradient with respect to `O`.
    pub fn loss_and_grad(&self, o: &Matrix) -> (f64, Matrix) {
        let (n, d) = o.shape();
        match self {
            Target::Dense(t) => {
                let diff = o.sub(t).expect("target shape");
                let count = (n * d) as f64;
                let loss = diff.as_slice().iter().map(|x| x * x).sum::<f64>() / count;
                (loss, diff.scale(2.0 / count))
            }
            Target::Classes(classes) => {
                let mut grad = Matrix::zeros(n, d);
                let mut loss = 0.0;
                for (i, &c) in classes.iter().enumerate() {
                    let row = o.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    loss += z.ln() + max - row[c];
                    for j in 0..d {
                        let p = (row[j] - max).exp() / z;
                        grad[(i, j)] = (p - if j == c { 1.0 } else { 0.0 }) / n as f64;
                    }
                }
                (loss / n as f64, grad)
            }
        }
    }
}
