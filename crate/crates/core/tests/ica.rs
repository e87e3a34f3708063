use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycle_core::ica::{fastica_fit, fastica_transform, IcaConfig};
use recycle_core::tensor::Tensor;

fn covariance(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| x.row(i)[c]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
            }
        }
    }
    cov
}

fn identity_deviation(cov: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, row) in cov.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            worst = worst.max((v - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn column(x: &Tensor<f64>, c: usize) -> Vec<f64> {
    (0..x.shape()[0]).map(|i| x.row(i)[c]).collect()
}

#[test]
fn output_is_white() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = Tensor::randn(&[2000, 4], 1.0, &mut rng);
    let t = fastica_fit(&x, &IcaConfig::new(4, 0)).unwrap();
    let s = fastica_transform(&t, &x).unwrap();
    let dev = identity_deviation(&covariance(&s));
    assert!(dev < 1e-3, "{dev}");
}

#[test]
fn correlated_input_is_whitened_after_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Tensor<f64> = Tensor::randn(&[1500, 6], 1.0, &mut rng);
    let x = Tensor::from_fn(&[1500, 6], |i| {
        let (r, c) = (i / 6, i % 6);
        z.row(r)[c] + 0.8 * z.row(r)[(c + 1) % 6] + 3.0
    });
    let t = fastica_fit(&x, &IcaConfig::new(3, 4)).unwrap();
    let s = fastica_transform(&t, &x).unwrap();
    assert_eq!(s.shape(), &[1500, 3]);
    assert!(identity_deviation(&covariance(&s)) < 1e-3);
}

#[test]
fn recovers_two_mixed_uniform_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let s1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix = [[1.0, 0.6], [0.4, 1.0]];
    let x = Tensor::from_fn(&[n, 2], |i| {
        let (r, c) = (i / 2, i % 2);
        mix[c][0] * s1[r] + mix[c][1] * s2[r]
    });
    let t = fastica_fit(&x, &IcaConfig::new(2, 9)).unwrap();
    assert!(t.converged);
    let y = fastica_transform(&t, &x).unwrap();
    let (y0, y1) = (column(&y, 0), column(&y, 1));
    let straight = pearson(&y0, &s1).abs().min(pearson(&y1, &s2).abs());
    let swapped = pearson(&y0, &s2).abs().min(pearson(&y1, &s1).abs());
    let best = straight.max(swapped);
    assert!(best >= 0.95, "{best}");
}

#[test]
fn transform_is_frozen_and_row_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor<f64> = Tensor::randn(&[300, 5], 1.0, &mut rng);
    let t = fastica_fit(&x, &IcaConfig::new(3, 1)).unwrap();
    assert_eq!(t, fastica_fit(&x, &IcaConfig::new(3, 1)).unwrap());
    let full = fastica_transform(&t, &x).unwrap();
    assert_eq!(full, fastica_transform(&t, &x).unwrap());
    for i in [0, 17, 299] {
        let one = fastica_transform(&t, &x.gather_rows(&[i]).unwrap()).unwrap();
        assert_eq!(one.data(), full.row(i));
    }

    let shift = [1.0, -2.0, 0.5, 3.0, 0.0];
    let moved = Tensor::from_fn(&[300, 5], |i| x.data()[i] + shift[i % 5]);
    let out = fastica_transform(&t, &moved).unwrap();
    let offset: Vec<f64> = {
        let a = fastica_transform(&t, &Tensor::new(vec![1, 5], shift.to_vec()).unwrap()).unwrap();
        let b = fastica_transform(&t, &Tensor::<f64>::zeros(&[1, 5])).unwrap();
        a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect()
    };
    for i in 0..300 {
        for c in 0..3 {
            assert!((out.row(i)[c] - full.row(i)[c] - offset[c]).abs() < 1e-9);
        }
    }
}

#[test]
fn guards() {
    let x = Tensor::<f64>::from_fn(&[10, 2], |i| (i as f64).cos());
    assert!(fastica_fit(&x, &IcaConfig::new(3, 0)).is_err());
    let one = Tensor::<f64>::zeros(&[1, 2]);
    assert!(fastica_fit(&one, &IcaConfig::new(1, 0)).is_err());
}
