use knn_attention::matrix::dot;
use knn_attention::mips::{augment_keys, augment_query, build_exact_index, build_lsh_index, LshParams};
use knn_attention::{Matrix, RngStream};
use proptest::prelude::*;

fn uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| 2.0 * rng.open01() - 1.0)
}

fn brute_force(keys: &Matrix, q: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.rows()).collect();
    idx.sort_by(|&a, &b| dot(keys.row(b), q).total_cmp(&dot(keys.row(a), q)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn lsh_recall_is_high() {
    let mut rng = RngStream::new(1, 0);
    let (n, d, k) = (2048, 8, 32);
    let keys = uniform(n, d, &mut rng);
    let lsh = build_lsh_index(augment_keys(&keys).unwrap(), LshParams::for_size(n, k, 8, 1).unwrap());
    let mut found = 0;
    let queries = 50;
    for _ in 0..queries {
        let q: Vec<f64> = (0..d).map(|_| 2.0 * rng.open01() - 1.0).collect();
        let truth = brute_force(&keys, &q, k);
        let got = lsh.query_topk(&augment_query(&q), k);
        assert_eq!(got.len(), k);
        found += got.iter().filter(|i| truth.contains(i)).count();
    }
    let recall = found as f64 / (queries * k) as f64;
    // About 2k candidates per query; a random subset of that size would
    // give a recall of 2k/n = 3%.
    assert!(recall > 0.4, "recall {recall}");
}

fn recall(index: &knn_attention::mips::KnnIndex, exact: &knn_attention::mips::KnnIndex, q: &[f64], k: usize) -> f64 {
    let q = augment_query(q);
    let truth = exact.query_topk(&q, k);
    index.query_topk(&q, k).iter().filter(|i| truth.contains(i)).count() as f64 / k as f64
}

#[test]
fn many_single_bit_tables_see_everything() {
    let mut rng = RngStream::new(2, 0);
    let keys = uniform(16, 4, &mut rng);
    let aug = augment_keys(&keys).unwrap();
    let lsh = build_lsh_index(aug.clone(), LshParams::new(32, 1, 2).unwrap());
    let exact = build_exact_index(aug);
    let mut total = 0.0;
    for _ in 0..20 {
        let q: Vec<f64> = (0..4).map(|_| 2.0 * rng.open01() - 1.0).collect();
        total += recall(&lsh, &exact, &q, 5);
    }
    assert!(total / 20.0 >= 0.95, "recall {}", total / 20.0);
}

#[test]
fn clustered_keys_stay_in_cluster() {
    let mut rng = RngStream::new(3, 0);
    let centres = [[5.0, 0.0, 0.0], [-5.0, 0.0, 0.0]];
    let keys = Matrix::from_fn(100, 3, |i, j| centres[i / 50][j] + 0.3 * (2.0 * rng.open01() - 1.0));
    let aug = augment_keys(&keys).unwrap();
    let lsh = build_lsh_index(aug.clone(), LshParams::for_size(100, 10, 4, 3).unwrap());
    let exact = build_exact_index(aug);
    for (c, centre) in centres.iter().enumerate() {
        let got = lsh.query_topk(&augment_query(centre), 10);
        assert!(got.iter().all(|&i| i / 50 == c), "cluster {c}: {got:?}");
        assert!(recall(&lsh, &exact, centre, 10) >= 0.9);
    }
}

#[test]
fn augmentation_preserves_inner_products() {
    let mut rng = RngStream::new(4, 0);
    let keys = uniform(50, 8, &mut rng);
    let aug = augment_keys(&keys).unwrap();
    let q: Vec<f64> = (0..8).map(|_| 3.0 * rng.open01()).collect();
    let qa = augment_query(&q);
    for j in 0..50 {
        assert!((dot(&qa, aug.keys().row(j)) - dot(&q, keys.row(j))).abs() < 1e-12);
        assert!(aug.keys()[(j, 8)] >= 0.0);
    }
}

#[test]
fn exact_index_separates_returned_from_excluded() {
    let mut rng = RngStream::new(5, 0);
    let keys = uniform(200, 6, &mut rng);
    let index = build_exact_index(augment_keys(&keys).unwrap());
    let q: Vec<f64> = (0..6).map(|_| 2.0 * rng.open01() - 1.0).collect();
    let got = index.query_topk(&augment_query(&q), 14);
    assert_eq!(got, brute_force(&keys, &q, 14));
    let worst_in = got.iter().map(|&j| dot(keys.row(j), &q)).fold(f64::INFINITY, f64::min);
    let best_out = (0..200).filter(|j| !got.contains(j)).map(|j| dot(keys.row(j), &q)).fold(f64::NEG_INFINITY, f64::max);
    assert!(worst_in >= best_out);
}

#[test]
fn identical_keys_return_lowest_indices() {
    let index = build_exact_index(augment_keys(&Matrix::filled(10, 3, 0.5)).unwrap());
    assert_eq!(index.query_topk(&augment_query(&[1.0, -2.0, 0.3]), 4), vec![0, 1, 2, 3]);
}

#[test]
fn lsh_params_validation() {
    assert!(LshParams::new(0, 4, 0).is_err());
    assert!(LshParams::new(2, 0, 0).is_err());
    assert!(LshParams::new(2, 65, 0).is_err());
    assert!(LshParams::for_size(1024, 32, 4, 0).unwrap().hash_bits >= 1);
}

proptest! {
    #[test]
    fn augmented_keys_have_equal_norms(n in 1usize..30, d in 1usize..6, seed: u64) {
        let mut rng = RngStream::new(seed, 0);
        let keys = uniform(n, d, &mut rng);
        let aug = augment_keys(&keys).unwrap();
        for i in 0..n {
            let norm2 = dot(aug.keys().row(i), aug.keys().row(i));
            prop_assert!((norm2 - aug.m_norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_index_matches_brute_force(n in 1usize..50, d in 1usize..5, k in 1usize..10, seed: u64) {
        let mut rng = RngStream::new(seed, 1);
        let keys = uniform(n, d, &mut rng);
        let index = build_exact_index(augment_keys(&keys).unwrap());
        let q: Vec<f64> = (0..d).map(|_| 2.0 * rng.open01() - 1.0).collect();
        let k = k.min(n);
        prop_assert_eq!(index.query_topk(&augment_query(&q), k), brute_force(&keys, &q, k));
    }

    #[test]
    fn lsh_returns_k_distinct(n in 1usize..200, k in 1usize..20, seed: u64) {
        let mut rng = RngStream::new(seed, 2);
        let keys = uniform(n, 4, &mut rng);
        let k = k.min(n);
        let lsh = build_lsh_index(augment_keys(&keys).unwrap(), LshParams::for_size(n, k, 3, seed).unwrap());
        let q: Vec<f64> = (0..4).map(|_| 2.0 * rng.open01() - 1.0).collect();
        let mut got = lsh.query_topk(&augment_query(&q), k);
        got.sort_unstable();
        got.dedup();
        prop_assert_eq!(got.len(), k);
    }
}
