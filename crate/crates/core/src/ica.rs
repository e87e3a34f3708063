//! FastICA: centering, eigen-whitening, then the parallel fixed-point
//! iteration with `g = tanh` and symmetric decorrelation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Eigenvalues below this are raised to it before the inverse square root.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl IcaConfig {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            max_iter: 200,
            tol: 1e-4,
            seed,
        }
    }
}

/// A fitted, frozen transform `x -> W K (x - mean)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcaTransformer {
    pub mean: Vec<f64>,
    /// `K`, row-major `n_components x d_in`.
    pub whitening: Vec<f64>,
    /// `W`, row-major `n_components x n_components`, orthogonal.
    pub unmixing: Vec<f64>,
    pub n_components: usize,
    pub d_in: usize,
    pub converged: bool,
    pub iterations: usize,
}

/// `(W W^T)^{-1/2} W`.
fn sym_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.max(EIGEN_FLOOR).sqrt());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose() * w
}

fn to_matrix<T: Float>(x: &Tensor<T>) -> Result<DMatrix<f64>> {
    if x.rank() != 2 {
        return Err(Error::dim("ICA input rank", 2, x.rank()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    Ok(DMatrix::from_row_iterator(n, d, x.data().iter().map(|v| v.as_f64())))
}

pub fn fastica_fit<T: Float>(x: &Tensor<T>, cfg: &IcaConfig) -> Result<IcaTransformer> {
    let data = to_matrix(x)?;
    let (n, d) = data.shape();
    let k = cfg.n_components;
    if k == 0 || k > d {
        return Err(Error::invalid(format!("{k} components requested from {d} input dimensions")));
    }
    if n < 2 {
        return Err(Error::dim("ICA rows (at least)", 2, n));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::invalid("ICA tolerance must be positive"));
    }
    if n <= d {
        log::warn!("ICA fit on {n} rows of width {d}; covariance is rank deficient");
    }
    let mean: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    let mut xc = data;
    for j in 0..d {
        xc.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = xc.transpose() * &xc / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut kmat = DMatrix::<f64>::zeros(k, d);
    for (r, &i) in order[..k].iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].max(EIGEN_FLOOR).sqrt();
        // Fix the eigenvector sign so the fit is reproducible across solvers.
        let v = eig.eigenvectors.column(i);
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            kmat[(r, c)] = sign * scale * v[c];
        }
    }
    let z = &xc * kmat.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w0 = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = sym_decorrelate(&w0);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let wx = &z * w.transpose();
        let g = wx.map(f64::tanh);
        let gp_mean: Vec<f64> = (0..k).map(|c| g.column(c).iter().map(|v| 1.0 - v * v).sum::<f64>() / n as f64).collect();
        let mut next = g.transpose() * &z / n as f64;
        for r in 0..k {
            for c in 0..k {
                next[(r, c)] -= gp_mean[r] * w[(r, c)];
            }
        }
        let next = sym_decorrelate(&next);
        let lim = (&next * w.transpose())
            .diagonal()
            .iter()
            .map(|v| (v.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < cfg.tol {
            converged = true;
            break;
        }
    }
    let row_major = |m: &DMatrix<f64>| (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
    Ok(IcaTransformer {
        mean,
        whitening: row_major(&kmat),
        unmixing: row_major(&w),
        n_components: k,
        d_in: d,
        converged,
        iterations,
    })
}

impl IcaTransformer {
    /// `W K`, row-major `n_components x d_in`.
    fn combined(&self) -> Vec<f64> {
        let (k, d) = (self.n_components, self.d_in);
        let mut out = vec![0.0; k * d];
        for r in 0..k {
            for m in 0..k {
                let w = self.unmixing[r * k + m];
                for c in 0..d {
                    out[r * d + c] += w * self.whitening[m * d + c];
                }
            }
        }
        out
    }
}

/// Applies the frozen transform row by row.
pub fn fastica_transform<T: Float>(t: &IcaTransformer, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim("ICA input rank", 2, x.rank()));
    }
    if x.shape()[1] != t.d_in {
        return Err(Error::dim("ICA input width", t.d_in, x.shape()[1]));
    }
    let (n, d, k) = (x.shape()[0], t.d_in, t.n_components);
    let m = t.combined();
    let mut out = Vec::with_capacity(n * k);
    let mut centred = vec![0.0; d];
    for i in 0..n {
        for (c, v) in x.row(i).iter().enumerate() {
            centred[c] = v.as_f64() - t.mean[c];
        }
        for r in 0..k {
            let s: f64 = m[r * d..(r + 1) * d].iter().zip(&centred).map(|(a, b)| a * b).sum();
            out.push(T::of(s));
        }
    }
    Tensor::new(vec![n, k], out)
}
