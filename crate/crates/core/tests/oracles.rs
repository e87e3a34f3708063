//! Straight-line reference implementations checked against the library.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycle_core::dcor::{dc_loss_sum, dcor, double_center, pairwise_dist_matrix};
use recycle_core::select::{knn_accuracy_on, knn_predict};
use recycle_core::source::FeatureDataset;
use recycle_core::tensor::Tensor;

fn brute_dcor(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let centred = |rows: &[Vec<f64>]| {
        let a: Vec<Vec<f64>> = (0..n).map(|k| (0..n).map(|l| dist(&rows[k], &rows[l])).collect()).collect();
        let row_mean: Vec<f64> = (0..n).map(|k| a[k].iter().sum::<f64>() / n as f64).collect();
        let col_mean: Vec<f64> = (0..n).map(|l| (0..n).map(|k| a[k][l]).sum::<f64>() / n as f64).collect();
        let all = row_mean.iter().sum::<f64>() / n as f64;
        let mut out = vec![vec![0.0; n]; n];
        for k in 0..n {
            for l in 0..n {
                out[k][l] = a[k][l] - row_mean[k] - col_mean[l] + all;
            }
        }
        out
    };
    let (a, b) = (centred(x), centred(y));
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..n {
        for l in 0..n {
            ab += a[k][l] * b[k][l];
            aa += a[k][l] * a[k][l];
            bb += b[k][l] * b[k][l];
        }
    }
    let n2 = (n * n) as f64;
    (ab / n2) / ((aa / n2) * (bb / n2)).sqrt()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::randn(&[n, d], 1.0, rng)
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn transform(x: &Tensor<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor<f64> {
    let n = x.shape()[0];
    let data: Vec<f64> = (0..n).flat_map(|i| f(x.row(i))).collect();
    let d = data.len() / n;
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn dcor_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let dx = rng.random_range(1..=5);
        let dy = loop {
            let d = rng.random_range(1..=5);
            if d != dx {
                break d;
            }
        };
        let x = randn(&mut rng, n, dx);
        let y = randn(&mut rng, n, dy);
        let got = dcor(&x, &y).unwrap().value;
        let want = brute_dcor(&rows(&x), &rows(&y));
        assert!((got - want).abs() < 1e-9, "n={n} dx={dx} dy={dy}: {got} vs {want}");
        assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}

#[test]
fn fixed_four_by_two_against_four_by_three() {
    let x = Tensor::new(vec![4, 2], vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5, 3.0, 2.0]).unwrap();
    let y = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 1.0, -1.0, 1.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
    let want = brute_dcor(&rows(&x), &rows(&y));
    assert!((dcor(&x, &y).unwrap().value - want).abs() < 1e-9);
}

#[test]
fn self_correlation_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 2..10 {
        let x = randn(&mut rng, n, 3);
        assert!((dcor(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
    }
}

#[test]
fn constant_batch_scores_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, 6, 2);
    let y = Tensor::full(&[6, 4], 2.5);
    let v = dcor(&x, &y).unwrap();
    assert_eq!(v.value, 0.0);
    assert!(v.degenerate);
}

#[test]
fn invariant_to_translation_rotation_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.random_range(3..=8);
        let x = randn(&mut rng, n, 3);
        let y = randn(&mut rng, n, 4);
        let base = dcor(&x, &y).unwrap().value;

        let shift: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted = transform(&x, |r| r.iter().zip(&shift).map(|(a, b)| a + b).collect());
        let q = rotation(&mut rng, 3);
        let rotated = transform(&x, |r| q.iter().map(|qr| qr.iter().zip(r).map(|(a, b)| a * b).sum()).collect());
        let c: f64 = rng.random_range(0.1..10.0);
        let scaled = transform(&x, |r| r.iter().map(|a| a * c).collect());

        for (what, v) in [("translation", &shifted), ("rotation", &rotated), ("scaling", &scaled)] {
            let got = dcor(v, &y).unwrap().value;
            assert!((got - base).abs() < 1e-6, "{what}: {got} vs {base}");
        }
    }
}

#[test]
fn independent_batches_score_low_dependent_high() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, 200, 2);
    let y = randn(&mut rng, 200, 2);
    let squared = transform(&x, |r| vec![r[0] * r[0], r[1].abs()]);
    assert!(dcor(&x, &y).unwrap().value < 0.05);
    assert!(dcor(&x, &squared).unwrap().value > 0.2);
}

#[test]
fn dc_loss_is_a_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = randn(&mut rng, 7, 3);
    let s = randn(&mut rng, 7, 5);
    let s2 = randn(&mut rng, 7, 2);
    assert_eq!(dc_loss_sum(&[s.clone()], &t, 1.0).unwrap(), dcor(&s, &t).unwrap().value);
    assert_eq!(dc_loss_sum(&[s.clone(), s2.clone()], &t, 0.0).unwrap(), 0.0);
    let both = dcor(&s, &t).unwrap().value + dcor(&s2, &t).unwrap().value;
    assert!((dc_loss_sum(&[s, s2], &t, 0.05).unwrap() - 0.05 * both).abs() < 1e-15);
}

#[test]
fn centred_matrices_have_zero_margins() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, 6, 3);
    let d = pairwise_dist_matrix(&x).unwrap();
    for i in 0..6 {
        assert_eq!(d.data()[i * 6 + i], 0.0);
    }
    let a = double_center(&d).unwrap();
    for k in 0..6 {
        let row: f64 = (0..6).map(|l| a.get(k, l)).sum();
        let col: f64 = (0..6).map(|l| a.get(l, k)).sum();
        assert!(row.abs() < 1e-12 && col.abs() < 1e-12);
    }
}

/// Full sort by (squared distance, index), then a vote where ties go to the
/// smallest label.
fn sorted_knn(points: &[Vec<f32>], labels: &[usize], query: &[f32], k: usize) -> usize {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d: f64 = p.iter().zip(query).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = std::collections::BTreeMap::new();
    for &(_, i) in &order[..k] {
        *votes.entry(labels[i]).or_insert(0usize) += 1;
    }
    let top = *votes.values().max().unwrap();
    *votes.iter().find(|(_, &v)| v == top).unwrap().0
}

fn dataset(points: &[Vec<f32>], labels: &[usize]) -> FeatureDataset {
    let d = points[0].len();
    let data = points.iter().flatten().copied().collect();
    FeatureDataset::new(Tensor::new(vec![points.len(), d], data).unwrap(), labels.to_vec(), None).unwrap()
}

#[test]
fn knn_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ties_seen = 0;
    for case in 0..100 {
        let n = rng.random_range(1..=50);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=7.min(n));
        let classes = rng.random_range(1..=4);
        // Small integer coordinates make distance ties common.
        let grid = if case % 2 == 0 { 3 } else { 50 };
        let points: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0..grid) as f32).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let query: Vec<f32> = (0..d).map(|_| rng.random_range(0..grid) as f32).collect();
        let ds = dataset(&points, &labels);
        let want = sorted_knn(&points, &labels, &query, k);
        assert_eq!(knn_predict(&ds, &query, k).unwrap(), want, "case {case}");
        let mut dists: Vec<f64> = points
            .iter()
            .map(|p| p.iter().zip(&query).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
            .collect();
        dists.sort_by(f64::total_cmp);
        if k < n && dists[k - 1] == dists[k] {
            ties_seen += 1;
        }
    }
    assert!(ties_seen > 10, "only {ties_seen} boundary ties exercised");
}

#[test]
fn knn_examples() {
    let points = vec![
        vec![0.1, 0.0],
        vec![0.0, 0.1],
        vec![-0.1, 0.0],
        vec![0.0, -0.1],
        vec![9.0, 9.0],
        vec![9.5, 9.0],
    ];
    let labels = [0, 0, 0, 0, 1, 1];
    let ds = dataset(&points, &labels);
    assert_eq!(knn_predict(&ds, &[0.0, 0.0], 3).unwrap(), 0);
    assert_eq!(knn_predict(&ds, &[9.5, 9.0], 1).unwrap(), 1);
    assert!(knn_predict(&ds, &[0.0, 0.0], 7).is_err());
}

#[test]
fn noise_features_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let points: Vec<Vec<f32>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f32>()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        dataset(&points, &labels)
    };
    let train = make(&mut rng, 1000);
    let val = make(&mut rng, 1000);
    let acc = knn_accuracy_on(&train, &val, 5).unwrap();
    assert!((acc - 0.5).abs() < 0.1, "{acc}");
}

proptest! {
    #[test]
    fn dcor_stays_in_unit_interval(seed in any::<u64>(), n in 2usize..9, dx in 1usize..4, dy in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, n, dx);
        let y = randn(&mut rng, n, dy);
        let v = dcor(&x, &y).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - dcor(&y, &x).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn duplicate_query_recovers_its_label(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f32>> = (0..n).map(|_| vec![rng.random::<f32>(), rng.random::<f32>()]).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let i = rng.random_range(0..n);
        let ds = dataset(&points, &labels);
        prop_assert_eq!(knn_predict(&ds, &points[i], 1).unwrap(), sorted_knn(&points, &labels, &points[i], 1));
    }
}
