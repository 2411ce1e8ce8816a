use knn_attention::oracle::{
    attention_probabilities, exact_attention, exact_gradients, finite_diff_gradients, DEFAULT_FD_STEP,
};
use knn_attention::{AttentionProblem, Matrix, RngStream, UpstreamGradient};
use proptest::prelude::*;

fn uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| 2.0 * rng.open01() - 1.0)
}

#[test]
fn exact_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = RngStream::new(seed, 4);
        let n = 1 + rng.below(8);
        let d = 1 + rng.below(4);
        let p = AttentionProblem::new(uniform(n, d, &mut rng), uniform(n, d, &mut rng), uniform(n, d, &mut rng), seed % 2 == 0)
            .unwrap();
        let w = uniform(n, d, &mut rng);
        // loss = <W, O>, so dO = W.
        let loss = |o: &Matrix| o.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let fd = finite_diff_gradients(&p, loss, DEFAULT_FD_STEP).unwrap();
        let exact = exact_gradients(&p, &UpstreamGradient::new(w.clone()).unwrap()).unwrap();
        assert!(exact.dq.max_abs_diff(&fd.dq) < 1e-6, "seed {seed}");
        assert!(exact.dk.max_abs_diff(&fd.dk) < 1e-6, "seed {seed}");
        assert!(exact.dv.max_abs_diff(&fd.dv) < 1e-6, "seed {seed}");
    }
}

#[test]
fn large_scores_do_not_overflow() {
    let q = Matrix::filled(3, 2, 300.0);
    let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap();
    let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
    let o = exact_attention(&AttentionProblem::new(q, k, v, false).unwrap());
    assert!(o.is_finite());
    assert!((o[(0, 1)] - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn probabilities_are_row_stochastic(n in 1usize..20, d in 1usize..5, seed: u64, causal: bool) {
        let mut rng = RngStream::new(seed, 0);
        let p = AttentionProblem::new(uniform(n, d, &mut rng).scale(5.0), uniform(n, d, &mut rng), uniform(n, d, &mut rng), causal)
            .unwrap();
        let probs = attention_probabilities(&p);
        for i in 0..n {
            let row = probs.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            if causal {
                prop_assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn dv_columns_sum_like_upstream(n in 1usize..15, d in 1usize..4, seed: u64) {
        // 1^T P^T dO = 1^T dO because P is row-stochastic.
        let mut rng = RngStream::new(seed, 1);
        let p = AttentionProblem::new(uniform(n, d, &mut rng), uniform(n, d, &mut rng), uniform(n, d, &mut rng), false).unwrap();
        let d_o = uniform(n, d, &mut rng);
        let g = exact_gradients(&p, &UpstreamGradient::new(d_o.clone()).unwrap()).unwrap();
        for j in 0..d {
            let a: f64 = g.dv.column(j).iter().sum();
            let b: f64 = d_o.column(j).iter().sum();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
