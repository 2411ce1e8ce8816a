use knn_attention::forward::{
    approximate_attention, choose_parameters, knn_attention_mom, knn_attention_weighted, weighted_conditions_hold,
    ForwardConfig, IndexBackend,
};
use knn_attention::mips::LshParams;
use knn_attention::oracle::exact_attention;
use knn_attention::{AttentionProblem, Matrix, RngStream};
use proptest::prelude::*;

fn problem(n: usize, d: usize, half: f64, seed: u64, causal: bool) -> AttentionProblem {
    let mut rng = RngStream::new(seed, 3);
    let mut draw = |h: f64| Matrix::from_fn(n, d, |_, _| h * (2.0 * rng.open01() - 1.0));
    let (q, k, v) = (draw(half), draw(half), draw(1.0));
    AttentionProblem::new(q, k, v, causal).unwrap()
}

#[test]
fn weighted_with_full_top_k_is_exact() {
    for (seed, n) in [(0u64, 16usize), (1, 100), (2, 300)] {
        for causal in [false, true] {
            let p = problem(n, 6, 2.0, seed, causal);
            let out = knn_attention_weighted(&p, &ForwardConfig::weighted(n, 0, seed)).unwrap();
            assert!(out.output.max_abs_diff(&exact_attention(&p)) < 1e-10);
        }
    }
}

#[test]
fn weighted_error_shrinks_with_k() {
    let p = problem(512, 8, 2.0, 4, false);
    let exact = exact_attention(&p);
    let err = |k: usize| {
        (0..5u64)
            .map(|s| knn_attention_weighted(&p, &ForwardConfig::weighted(k, k, s)).unwrap().output.mean_abs_diff(&exact))
            .sum::<f64>()
            / 5.0
    };
    let (small, large) = (err(4), err(128));
    assert!(large < small, "{large} !< {small}");
}

#[test]
fn mom_estimator_is_accurate_for_positive_values() {
    let mut p = problem(64, 2, 1.0, 5, false);
    // Shift values into [1, 3] so the multiplicative guarantee applies.
    p.v = p.v.add(&Matrix::filled(64, 2, 2.0)).unwrap();
    let out = knn_attention_mom(&p, &ForwardConfig::median_of_means(8, 0.1, 0.1, 5)).unwrap();
    let exact = exact_attention(&p);
    let worst = out
        .output
        .as_slice()
        .iter()
        .zip(exact.as_slice())
        .map(|(a, e)| (a - e).abs() / e)
        .fold(0.0, f64::max);
    assert!(worst <= 0.1, "worst relative error {worst}");
}

#[test]
fn lsh_backend_stays_close_to_exact() {
    let p = problem(1024, 8, 1.0, 6, false);
    let lsh = LshParams::for_size(1024, 32, 4, 6).unwrap();
    let cfg = ForwardConfig::weighted(32, 32, 6).with_index(IndexBackend::Lsh(lsh));
    let out = approximate_attention(&p, &cfg).unwrap();
    assert!(out.output.mean_abs_diff(&exact_attention(&p)) < 0.1);
}

#[test]
fn causal_rows_ignore_future_perturbations() {
    let p = problem(40, 4, 1.5, 7, true);
    let mut q = p.clone();
    for t in 0..4 {
        q.k[(39, t)] += 5.0;
        q.v[(39, t)] -= 3.0;
    }
    let cfg = ForwardConfig::weighted(6, 6, 7);
    let (a, b) = (approximate_attention(&p, &cfg).unwrap().output, approximate_attention(&q, &cfg).unwrap().output);
    for i in 0..39 {
        assert_eq!(a.row(i), b.row(i), "row {i}");
    }
}

#[test]
fn parameter_choice_meets_conditions() {
    let (k, l) = choose_parameters(256, 0.3, 0.1).unwrap();
    assert!(k == 256 || weighted_conditions_hold(256, k, l, 0.3, 0.1));
    let (k, l) = choose_parameters(200_000, 0.3, 0.1).unwrap();
    assert!(k < 200_000 && weighted_conditions_hold(200_000, k, l, 0.3, 0.1));
}

#[test]
fn invalid_configs_are_rejected() {
    let p = problem(10, 2, 1.0, 0, false);
    assert!(approximate_attention(&p, &ForwardConfig::weighted(0, 0, 0)).is_err());
    assert!(approximate_attention(&p, &ForwardConfig::weighted(11, 0, 0)).is_err());
    assert!(approximate_attention(&p, &ForwardConfig::weighted(5, 6, 0)).is_err());
    assert!(approximate_attention(&p, &ForwardConfig::median_of_means(3, 0.0, 0.1, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weighted_outputs_stay_in_value_hull(n in 2usize..60, k in 1usize..20, l in 0usize..20, seed: u64, causal: bool) {
        let k = k.min(n);
        let l = l.min(n - k);
        let p = problem(n, 3, 3.0, seed, causal);
        let out = knn_attention_weighted(&p, &ForwardConfig::weighted(k, l, seed)).unwrap().output;
        for j in 0..3 {
            let col = p.v.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                prop_assert!(out[(i, j)] >= lo - 1e-12 && out[(i, j)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn constant_values_are_reproduced(n in 1usize..50, c in -10.0f64..10.0, seed: u64) {
        let mut p = problem(n, 2, 2.0, seed, false);
        p.v = Matrix::filled(n, 2, c);
        let k = (n / 3).max(1);
        let w = knn_attention_weighted(&p, &ForwardConfig::weighted(k, (n - k).min(3), seed)).unwrap().output;
        let m = knn_attention_mom(&p, &ForwardConfig::median_of_means(k, 0.5, 0.2, seed)).unwrap().output;
        prop_assert!(w.as_slice().iter().all(|&x| x == c));
        prop_assert!(m.as_slice().iter().all(|&x| x == c));
    }

    #[test]
    fn same_seed_same_output(seed: u64) {
        let p = problem(30, 3, 1.0, seed, false);
        let cfg = ForwardConfig::weighted(5, 5, seed);
        prop_assert_eq!(
            knn_attention_weighted(&p, &cfg).unwrap().output,
            knn_attention_weighted(&p, &cfg).unwrap().output
        );
    }
}
