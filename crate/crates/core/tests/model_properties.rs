use mismix_core::model::{
    geometry, normalized_mse, perm_distance, perm_sq_distance, sample_gmm, sq_dist, MeanConfig, MixtureModel,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn config(k: usize, d: usize) -> impl Strategy<Value = MeanConfig> {
    prop::collection::vec(-10.0f64..10.0, k * d).prop_map(move |v| MeanConfig::new(k, d, v).unwrap())
}

fn triple() -> impl Strategy<Value = (MeanConfig, MeanConfig, MeanConfig)> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(k, d)| (config(k, d), config(k, d), config(k, d)))
}

fn orthogonal(d: usize, seed: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, &seed[..d * d]);
    a.qr().q()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d * d).map(|i| m[(i / d, i % d)]).collect()
}

fn brute_force(a: &MeanConfig, b: &MeanConfig) -> f64 {
    fn go(i: usize, used: &mut Vec<bool>, acc: f64, a: &MeanConfig, b: &MeanConfig, best: &mut f64) {
        if i == a.k() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.k() {
            if !used[j] {
                used[j] = true;
                go(i + 1, used, acc + sq_dist(a.row(i), b.row(j)), a, b, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; a.k()], 0.0, a, b, &mut best);
    best
}

proptest! {
    #[test]
    fn perm_distance_is_symmetric((a, b, _) in triple()) {
        let ab = perm_distance(&a, &b).unwrap();
        let ba = perm_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn perm_distance_triangle((a, b, c) in triple()) {
        let ac = perm_distance(&a, &c).unwrap();
        let ab = perm_distance(&a, &b).unwrap();
        let bc = perm_distance(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn zero_exactly_on_relabelling((a, _, _) in triple(), shift in 0usize..6) {
        let k = a.k();
        let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
        prop_assert_eq!(perm_distance(&a, &a.permuted(&perm)).unwrap(), 0.0);
    }

    #[test]
    fn positive_off_the_orbit((a, _, _) in triple(), i in 0usize..6, eps in 1e-6f64..1.0) {
        let mut b = a.clone();
        let row = i % a.k();
        b.row_mut(row)[0] += eps;
        prop_assert!(perm_distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn solver_matches_enumeration((a, b, _) in triple()) {
        let (sq, perm) = perm_sq_distance(&a, &b).unwrap();
        prop_assert_eq!(sq, brute_force(&a, &b));
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..a.k()).collect::<Vec<_>>());
    }

    #[test]
    fn snr_invariant_under_translation_and_rotation(
        (k, d) in (2usize..=5, 1usize..=4),
        raw in prop::collection::vec(-3.0f64..3.0, 5 * 4),
        shift in prop::collection::vec(-50.0f64..50.0, 4),
        rot in prop::collection::vec(-1.0f64..1.0, 16),
        sigma in 0.1f64..5.0,
    ) {
        let means = MeanConfig::new(k, d, raw[..k * d].to_vec()).unwrap();
        let base = geometry(&MixtureModel::new(means.clone(), sigma).unwrap()).snr;
        let moved = geometry(&MixtureModel::new(means.translated(&shift[..d]), sigma).unwrap()).snr;
        prop_assert!((moved - base).abs() <= 1e-9 * base.max(1e-12));
        let q = orthogonal(d, &rot);
        prop_assume!(q.iter().all(|v| v.is_finite()));
        let rotated = geometry(&MixtureModel::new(means.mapped(&row_major(&q)), sigma).unwrap()).snr;
        prop_assert!((rotated - base).abs() <= 1e-10 * base.max(1e-12));
    }

    #[test]
    fn normalized_mse_is_scale_free((a, b, _) in triple(), c in 0.01f64..100.0) {
        prop_assume!(b.frobenius_norm() > 1e-3);
        let u = normalized_mse(&a, &b).unwrap();
        let v = normalized_mse(&a.scaled(c), &b.scaled(c)).unwrap();
        prop_assert!((u - v).abs() <= 1e-10 * u.max(1e-10));
    }
}

#[test]
fn empirical_second_moment_matches_model() {
    let means = MeanConfig::from_rows(&[[1.0, -0.5], [-2.0, 0.3], [0.4, 1.7]]).unwrap();
    let model = MixtureModel::new(means, 0.8).unwrap();
    let n = 1_000_000;
    let sample = sample_gmm(&model, n, 2024).unwrap();
    let d = model.d();
    let expected = model.second_moment();
    for i in 0..d {
        for j in 0..d {
            let vals: Vec<f64> = sample.observations.rows().map(|y| y[i] * y[j]).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - expected[(i, j)]).abs() <= 5.0 * se, "({i},{j}): {m} vs {}", expected[(i, j)]);
        }
    }
}

#[test]
fn sampling_is_a_pure_function_of_seed() {
    let model = MixtureModel::symmetric_k2(3, 1.0, 2.0).unwrap();
    let a = sample_gmm(&model, 50_000, 9).unwrap();
    let b = sample_gmm(&model, 50_000, 9).unwrap();
    let c = sample_gmm(&model, 50_000, 10).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.observations, b.observations);
    assert_ne!(a.observations, c.observations);
}
