use knn_attention::backward::{approx_pos_prod, BackwardConfig, BackwardContext, RowStochasticAccess};
use knn_attention::forward::IndexBackend;
use knn_attention::oracle::{attention_probabilities, exact_dk_parts, exact_gradients};
use knn_attention::{AttentionProblem, Matrix, RngStream, UpstreamGradient};
use rand_distr::{Distribution, StandardNormal};

fn normal_instance(n: usize, d: usize, seed: u64) -> (AttentionProblem, UpstreamGradient) {
    let mut rng = RngStream::new(seed, 77);
    let mut draw = |rows, cols| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
    };
    let (q, k, v, g) = (draw(n, d), draw(n, d), draw(n, d), draw(n, d));
    (AttentionProblem::new(q, k, v, false).unwrap(), UpstreamGradient::new(g).unwrap())
}

#[test]
fn dv_mostly_within_budget() {
    let mut fractions = Vec::new();
    for seed in 0..3 {
        let (p, d_o) = normal_instance(128, 4, seed);
        let exact = exact_gradients(&p, &d_o).unwrap();
        let ctx = BackwardContext::new(&p, &BackwardConfig::new(0.1, 0.1, seed)).unwrap();
        let (dv, budget) = ctx.dv(&d_o).unwrap();
        fractions.push(budget.fraction_within(&dv, &exact.dv));
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean >= 0.95, "{fractions:?}");
}

#[test]
fn dq_mostly_within_budget() {
    let mut fractions = Vec::new();
    for seed in 0..2 {
        let (p, d_o) = normal_instance(64, 3, seed);
        let exact = exact_gradients(&p, &d_o).unwrap();
        let ctx = BackwardContext::new(&p, &BackwardConfig::new(0.3, 0.1, seed)).unwrap();
        let (dq, budget) = ctx.dq(&d_o).unwrap();
        fractions.push(budget.fraction_within(&dq, &exact.dq));
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean >= 0.90, "{fractions:?}");
}

#[test]
fn dk_parts_match_materialised_halves() {
    for seed in 0..2 {
        let (p, d_o) = normal_instance(64, 3, seed);
        let exact = exact_gradients(&p, &d_o).unwrap();
        let (a, b) = exact_dk_parts(&p, &d_o).unwrap();
        assert!(a.sub(&b).unwrap().max_abs_diff(&exact.dk) < 1e-10);

        let ctx = BackwardContext::new(&p, &BackwardConfig::new(0.2, 0.1, seed)).unwrap();
        let (dk, budget) = ctx.dk(&d_o).unwrap();
        let frac = budget.fraction_within(&dk, &exact.dk);
        assert!(frac >= 0.85, "seed {seed}: {frac}");
        let (b_hat, b_budget) = ctx.dk_part_b(&d_o).unwrap();
        assert!(b_budget.fraction_within(&b_hat, &b) >= 0.85);
    }
}

#[test]
fn pos_prod_is_unbiased() {
    let (p, _) = normal_instance(32, 4, 9);
    let probs = attention_probabilities(&p);
    let access = RowStochasticAccess::new(&p, IndexBackend::Exact, 6, 0.0).unwrap();
    let x: Vec<f64> = (0..32).map(|i| 0.2 + (i % 5) as f64).collect();
    let exact: Vec<f64> = (0..32).map(|j| (0..32).map(|i| probs[(i, j)] * x[i]).sum()).collect();
    let runs = 300;
    let mut sum = vec![0.0; 32];
    let mut sq = vec![0.0; 32];
    let root = RngStream::new(4, 0);
    for r in 0..runs {
        let est = approx_pos_prod(&access, &x, 200, &mut root.substream(r)).unwrap();
        for j in 0..32 {
            sum[j] += est[j];
            sq[j] += est[j] * est[j];
        }
    }
    for j in 0..32 {
        let mean = sum[j] / runs as f64;
        let var = (sq[j] / runs as f64 - mean * mean).max(0.0);
        let se = (var / runs as f64).sqrt().max(1e-12);
        assert!((mean - exact[j]).abs() < 4.0 * se, "entry {j}: {mean} vs {}", exact[j]);
    }
}

#[test]
fn determinism_of_gradient_estimates() {
    let (p, d_o) = normal_instance(16, 2, 3);
    let cfg = BackwardConfig::new(0.3, 0.2, 11);
    let run = || {
        let ctx = BackwardContext::new(&p, &cfg).unwrap();
        (ctx.dv(&d_o).unwrap().0, ctx.dq(&d_o).unwrap().0, ctx.dk(&d_o).unwrap().0)
    };
    assert_eq!(run(), run());
}
