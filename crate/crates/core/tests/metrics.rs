use ldvae_t::metrics::{match_endmembers, rmse_abundance, rmse_per_endmember, sad, EvalReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, k - 1);
            out.push(q);
        }
    }
    out
}

fn random_spectra(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..c).map(|_| rng.random_range(0.01..1.0)).collect()).collect()
}

#[test]
fn matching_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=6 {
        let perms = permutations(k);
        for _ in 0..50 {
            let pred = random_spectra(&mut rng, k, 6);
            let gt = random_spectra(&mut rng, k, 6);
            let cost = |a: &[usize]| -> f64 { a.iter().enumerate().map(|(p, &g)| sad(&pred[p], &gt[g]).unwrap()).sum() };
            let best = perms.iter().map(|p| cost(p)).fold(f64::INFINITY, f64::min);
            let got = match_endmembers(&pred, &gt).unwrap();
            let mut sorted = got.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..k).collect::<Vec<_>>());
            assert!((cost(&got) - best).abs() < 1e-12, "k={k}: {} vs {best}", cost(&got));
        }
    }
}

#[test]
fn matching_recovers_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_spectra(&mut rng, 5, 10);
    let order = [3, 0, 4, 1, 2];
    let pred: Vec<_> = order.iter().map(|&g| gt[g].clone()).collect();
    assert_eq!(match_endmembers(&pred, &gt).unwrap(), order);
    let rev: Vec<_> = gt.iter().rev().cloned().collect();
    assert_eq!(match_endmembers(&rev, &gt).unwrap(), vec![4, 3, 2, 1, 0]);
}

#[test]
fn unit_values() {
    let pi = std::f64::consts::PI;
    assert!((sad(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - pi / 2.0).abs() < 1e-9);
    assert!((sad(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - pi / 4.0).abs() < 1e-9);
    assert!(sad(&[0.2, 0.4], &[0.4, 0.8]).unwrap().abs() < 1e-9);
    assert!((rmse_abundance(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap() - 2f64.sqrt()).abs() < 1e-9);
    let per = rmse_per_endmember(&[0.1, 0.0, 0.3, 0.0], &[0.0, 0.0, 0.0, 0.0], 2).unwrap();
    assert!((per[0] - 0.05f64.sqrt()).abs() < 1e-9 && (per[0] - 0.223607).abs() < 1e-6);
}

proptest! {
    #[test]
    fn sad_scale_invariant_and_symmetric(
        pair in prop::collection::vec((0.01f64..2.0, 0.01f64..2.0), 2..40),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let base = sad(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
        prop_assert!((sad(&xs, &ys).unwrap() - base).abs() < 1e-12);
        prop_assert!((sad(&y, &x).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn overall_rmse_squares_to_sum_of_per_endmember(seed in any::<u64>(), k in 1usize..6, n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n * k).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.random()).collect();
        let overall = rmse_abundance(&a, &b, k).unwrap();
        let per = rmse_per_endmember(&a, &b, k).unwrap();
        let sum: f64 = per.iter().map(|r| r * r).sum();
        prop_assert!((overall * overall - sum).abs() < 1e-12 * sum.max(1.0));
    }
}

#[test]
fn oracle_predictions_score_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_spectra(&mut rng, 3, 12);
    let dir = Dirichlet::new([1.0, 2.0, 0.5]).unwrap();
    let ab: Vec<f64> = (0..40).flat_map(|_| dir.sample(&mut rng)).collect();
    let names = vec!["a".into(), "b".into(), "c".into()];
    let r = EvalReport::compute(names, &gt, &gt, &ab, &ab).unwrap();
    assert!(r.per_endmember_sad.iter().chain(&r.per_endmember_rmse).all(|v| v.abs() < 1e-6));
    assert_eq!(r.assignment, vec![0, 1, 2]);
}

/// A model that always predicts 1/K scores `sqrt(E (z_k - 1/K)^2)` per
/// endmember, which for a Dirichlet is `sqrt(var_k + (mean_k - 1/K)^2)`.
#[test]
fn uniform_prediction_matches_monte_carlo_rmse() {
    let alpha = [1.0, 2.0, 3.0];
    let a0: f64 = alpha.iter().sum();
    let k = alpha.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir = Dirichlet::new(alpha).unwrap();
    let n = 200_000;
    let gt: Vec<f64> = (0..n).flat_map(|_| dir.sample(&mut rng)).collect();
    let uniform = vec![1.0 / k as f64; n * k];
    let per = rmse_per_endmember(&uniform, &gt, k).unwrap();
    for (i, &a) in alpha.iter().enumerate() {
        let mean = a / a0;
        let var = a * (a0 - a) / (a0 * a0 * (a0 + 1.0));
        let expect = (var + (mean - 1.0 / k as f64).powi(2)).sqrt();
        assert!((per[i] - expect).abs() < 2e-3, "{i}: {} vs {expect}", per[i]);
    }
}

#[test]
fn csv_average_recomputes() {
    let names = vec!["x".into(), "y".into()];
    let pred = vec![vec![1.0, 0.1, 0.2], vec![0.2, 0.9, 0.3]];
    let gt = vec![vec![0.9, 0.2, 0.2], vec![0.1, 1.0, 0.4]];
    let r = EvalReport::compute(names, &pred, &gt, &[0.6, 0.4, 0.2, 0.8], &[0.5, 0.5, 0.3, 0.7]).unwrap();
    let csv = r.to_csv();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let col = |c: usize| -> Vec<f64> { rows[..2].iter().map(|r| r[c].parse().unwrap()).collect() };
    assert_eq!(rows[2][0], "average");
    for c in 1..=2 {
        let v = col(c);
        let avg: f64 = rows[2][c].parse().unwrap();
        assert!((avg - (v[0] + v[1]) / 2.0).abs() < 1e-12);
    }
}
