//! Empirical distance correlation between two batches of feature vectors.
//!
//! With `a_kl = |X_k - X_l|`, the double-centered matrix is
//! `A_kl = a_kl - mean_row(k) - mean_col(l) + mean_all`, likewise `B` from
//! `Y`, and the statistic is `<A, B> / sqrt(<A, A> <B, B>)`. This is the
//! squared distance correlation in Székely's convention (the `1/n^2` factors
//! cancel). All accumulation is done in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Floor under the radical so the gradient stays finite near degeneracy.
pub const SQRT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CenteredDistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CenteredDistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.entries[k * self.n + l]
    }

    /// Frobenius inner product `<self, other>`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| a * b).sum()
    }
}

/// Result of [`dcor`]. `degenerate` is set when either batch has zero
/// distance variance, in which case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcorValue {
    pub value: f64,
    pub degenerate: bool,
}

fn as_matrix<T: Float>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("{what} rank"), 2, x.rank()));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Euclidean distances between all rows of an `n x d` matrix.
pub fn pairwise_dist_matrix<T: Float>(x: &Tensor<T>) -> Result<Tensor<f64>> {
    let (n, d) = as_matrix(x, "distance input")?;
    if n < 2 {
        return Err(Error::dim("batch size (at least)", 2, n));
    }
    let v = x.data();
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        for l in k + 1..n {
            let s: f64 = (0..d)
                .map(|i| {
                    let diff = v[k * d + i].as_f64() - v[l * d + i].as_f64();
                    diff * diff
                })
                .sum();
            let dist = s.sqrt();
            out[k * n + l] = dist;
            out[l * n + k] = dist;
        }
    }
    Tensor::new(vec![n, n], out)
}

pub fn double_center(d: &Tensor<f64>) -> Result<CenteredDistanceMatrix> {
    let (n, m) = as_matrix(d, "centering input")?;
    if n != m {
        return Err(Error::dim("centering columns", n, m));
    }
    let v = d.data();
    let inv = 1.0 / n as f64;
    let row_mean: Vec<f64> = (0..n).map(|k| v[k * n..(k + 1) * n].iter().sum::<f64>() * inv).collect();
    let col_mean: Vec<f64> = (0..n).map(|l| (0..n).map(|k| v[k * n + l]).sum::<f64>() * inv).collect();
    let grand = row_mean.iter().sum::<f64>() * inv;
    let mut entries = vec![0.0; n * n];
    for k in 0..n {
        for l in 0..n {
            entries[k * n + l] = v[k * n + l] - row_mean[k] - col_mean[l] + grand;
        }
    }
    Ok(CenteredDistanceMatrix { n, entries })
}

fn centered<T: Float>(x: &Tensor<T>) -> Result<(Tensor<f64>, CenteredDistanceMatrix)> {
    let dist = pairwise_dist_matrix(x)?;
    let c = double_center(&dist)?;
    Ok((dist, c))
}

fn check_pair<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    let (nx, _) = as_matrix(x, "dcor X")?;
    let (ny, _) = as_matrix(y, "dcor Y")?;
    if nx != ny {
        return Err(Error::dim("dcor batch size", nx, ny));
    }
    Ok(())
}

fn ratio(sab: f64, saa: f64, sbb: f64) -> (DcorValue, f64) {
    if saa <= f64::MIN_POSITIVE || sbb <= f64::MIN_POSITIVE {
        return (
            DcorValue {
                value: 0.0,
                degenerate: true,
            },
            0.0,
        );
    }
    let denom = (saa * sbb).max(SQRT_FLOOR).sqrt();
    (
        DcorValue {
            value: sab / denom,
            degenerate: false,
        },
        denom,
    )
}

/// Distance correlation of two batches with equal row counts; the feature
/// widths may differ.
pub fn dcor<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<DcorValue> {
    check_pair(x, y)?;
    let (_, a) = centered(x)?;
    let (_, b) = centered(y)?;
    Ok(ratio(a.inner(&b), a.inner(&a), b.inner(&b)).0)
}

/// [`dcor`] together with its gradients with respect to both inputs.
pub fn dcor_with_grad<T: Float>(
    x: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<(DcorValue, Tensor<T>, Tensor<T>)> {
    check_pair(x, y)?;
    let (da, a) = centered(x)?;
    let (db, b) = centered(y)?;
    let (sab, saa, sbb) = (a.inner(&b), a.inner(&a), b.inner(&b));
    let (value, denom) = ratio(sab, saa, sbb);
    if value.degenerate {
        return Ok((value, Tensor::zeros(x.shape()), Tensor::zeros(y.shape())));
    }
    let r = value.value;
    // When the floor is active the denominator is a constant.
    let floored = saa * sbb < SQRT_FLOOR;
    let n = a.n();
    let ga: Vec<f64> = (0..n * n)
        .map(|i| {
            let base = b.entries[i] / denom;
            if floored { base } else { base - r * a.entries[i] / saa }
        })
        .collect();
    let gb: Vec<f64> = (0..n * n)
        .map(|i| {
            let base = a.entries[i] / denom;
            if floored { base } else { base - r * b.entries[i] / sbb }
        })
        .collect();
    Ok((
        value,
        chain_through_distances(x, &da, &ga),
        chain_through_distances(y, &db, &gb),
    ))
}

/// Maps `dL/d a_kl` back to the rows of `X` through `a_kl = |X_k - X_l|`.
fn chain_through_distances<T: Float>(x: &Tensor<T>, dist: &Tensor<f64>, g: &[f64]) -> Tensor<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let v = x.data();
    let dv = dist.data();
    let mut out = vec![0.0f64; n * d];
    for k in 0..n {
        for l in 0..n {
            let a = dv[k * n + l];
            if a <= 0.0 {
                continue;
            }
            let w = (g[k * n + l] + g[l * n + k]) / a;
            for i in 0..d {
                out[k * d + i] += w * (v[k * d + i].as_f64() - v[l * d + i].as_f64());
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out.into_iter().map(T::of).collect()).expect("shape preserved")
}

/// `sigma * sum_n dcor(source_n, target)`, summed in source order.
pub fn dc_loss_sum<T: Float>(sources: &[Tensor<T>], target: &Tensor<T>, sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in sources {
        check_pair(s, target)?;
        if sigma != 0.0 {
            total += dcor(s, target)?.value;
        }
    }
    Ok(sigma * total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn identical_rows_give_zero_distances() {
        let x = m(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(pairwise_dist_matrix(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pythagorean_distance() {
        let d = pairwise_dist_matrix(&m(2, 2, &[0.0, 0.0, 3.0, 4.0])).unwrap();
        assert_eq!(d.data(), &[0.0, 5.0, 5.0, 0.0]);
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(pairwise_dist_matrix(&m(1, 2, &[0.0, 1.0])).is_err());
    }

    #[test]
    fn centering_two_by_two() {
        let c = 3.5;
        let a = double_center(&m(2, 2, &[0.0, c, c, 0.0])).unwrap();
        assert_eq!(a.entries(), &[-c / 2.0, c / 2.0, c / 2.0, -c / 2.0]);
    }

    #[test]
    fn centering_annihilates_constants() {
        let a = double_center(&Tensor::full(&[4, 4], 2.5)).unwrap();
        assert!(a.entries().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn centering_rejects_non_square() {
        assert!(double_center(&Tensor::<f64>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn constant_batch_is_degenerate() {
        let x = m(3, 1, &[0.0, 1.0, 3.0]);
        let y = m(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let v = dcor(&x, &y).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.value, 0.0);
        let (_, gx, gy) = dcor_with_grad(&x, &y).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));
    }

    #[test]
    fn batch_mismatch_is_an_error() {
        let x = m(3, 1, &[0.0, 1.0, 3.0]);
        let y = m(2, 1, &[0.0, 1.0]);
        assert!(dcor(&x, &y).is_err());
        assert!(dc_loss_sum(&[x], &y, 1.0).is_err());
    }

    #[test]
    fn sigma_zero_switches_off() {
        let x = m(3, 1, &[0.0, 1.0, 3.0]);
        let y = m(3, 1, &[2.0, -1.0, 0.5]);
        assert_eq!(dc_loss_sum(&[x.clone(), x.clone()], &y, 0.0).unwrap(), 0.0);
        let single = dc_loss_sum(&[x.clone()], &y, 1.0).unwrap();
        assert_eq!(single, dcor(&x, &y).unwrap().value);
    }
}
