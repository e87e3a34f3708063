//! Forward and backward kernels on plain tensors. The graph calls these; they
//! are also usable directly for inference.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Geometry of a grouped 2-D cross-correlation over NHWC input with HWIO
/// filters (`[kh, kw, c_in / groups, c_out]`), stride 1.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cin_g: usize,
    cout: usize,
    cout_g: usize,
    groups: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Float>(
        input: &Tensor<T>,
        filters: &Tensor<T>,
        groups: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.rank() != 4 {
            return Err(Error::dim("conv input rank", 4, input.rank()));
        }
        if filters.rank() != 4 {
            return Err(Error::dim("conv filter rank", 4, filters.rank()));
        }
        if groups == 0 {
            return Err(Error::invalid("conv groups must be positive"));
        }
        let [n, h, w, cin] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
        let [kh, kw, cin_g, cout] = [
            filters.shape[0],
            filters.shape[1],
            filters.shape[2],
            filters.shape[3],
        ];
        if cin % groups != 0 {
            return Err(Error::dim(
                "input channels (multiple of groups)",
                (cin / groups).max(1) * groups,
                cin,
            ));
        }
        if cout % groups != 0 {
            return Err(Error::dim(
                "output channels (multiple of groups)",
                (cout / groups).max(1) * groups,
                cout,
            ));
        }
        if cin_g != cin / groups {
            return Err(Error::dim("filter depth (input channels per group)", cin / groups, cin_g));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim("input height", kh, h + 2 * pad));
        }
        if w + 2 * pad < kw {
            return Err(Error::dim("input width", kw, w + 2 * pad));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cin_g,
            cout,
            cout_g: cout / groups,
            groups,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    /// Input coordinate for an output coordinate plus kernel tap, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    groups: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, filters, groups, padding)?;
    let mut out = vec![T::zero(); g.n * g.ho * g.wo * g.cout];
    let x = &input.data;
    let wt = &filters.data;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let ob = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                let out_px = &mut out[ob..ob + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let ib = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let in_px = &x[ib..ib + g.cin];
                        let wb = (ky * g.kw + kx) * g.cin_g * g.cout;
                        for grp in 0..g.groups {
                            let dst = &mut out_px[grp * g.cout_g..(grp + 1) * g.cout_g];
                            for ci in 0..g.cin_g {
                                let v = in_px[grp * g.cin_g + ci];
                                if v == T::zero() {
                                    continue;
                                }
                                let row = wb + ci * g.cout + grp * g.cout_g;
                                for (d, &wv) in dst.iter_mut().zip(&wt[row..row + g.cout_g]) {
                                    *d += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.ho, g.wo, g.cout], out)
}

/// Gradients of `conv2d` with respect to the input and the filters. Either
/// half can be skipped.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    groups: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_filters: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(input, filters, groups, padding)?;
    grad_out.expect_shape("conv grad", &[g.n, g.ho, g.wo, g.cout])?;
    let mut gx = want_input.then(|| vec![T::zero(); input.len()]);
    let mut gw = want_filters.then(|| vec![T::zero(); filters.len()]);
    let x = &input.data;
    let wt = &filters.data;
    let go = &grad_out.data;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let ob = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                let gpx = &go[ob..ob + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let ib = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let wb = (ky * g.kw + kx) * g.cin_g * g.cout;
                        for grp in 0..g.groups {
                            let gsl = &gpx[grp * g.cout_g..(grp + 1) * g.cout_g];
                            for ci in 0..g.cin_g {
                                let c = grp * g.cin_g + ci;
                                let row = wb + ci * g.cout + grp * g.cout_g;
                                if let Some(gx) = gx.as_mut() {
                                    let mut acc = T::zero();
                                    for (&gv, &wv) in gsl.iter().zip(&wt[row..row + g.cout_g]) {
                                        acc += gv * wv;
                                    }
                                    gx[ib + c] += acc;
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let v = x[ib + c];
                                    if v != T::zero() {
                                        for (d, &gv) in gw[row..row + g.cout_g].iter_mut().zip(gsl) {
                                            *d += v * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        gx.map(|d| Tensor { shape: input.shape.clone(), data: d }),
        gw.map(|d| Tensor { shape: filters.shape.clone(), data: d }),
    ))
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape("add rhs", &a.shape)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_shape("mul rhs", &a.shape)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect(),
    })
}

pub fn scale<T: Float>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::dim("matmul lhs rank", 2, a.rank()));
    }
    if b.rank() != 2 {
        return Err(Error::dim("matmul rhs rank", 2, b.rank()));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::dim("matmul inner axis", k, b.shape[0]));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            for (d, &bv) in dst.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T b` for rank-2 tensors: `[k, m]^T x [k, n] -> [m, n]`.
pub fn matmul_tn<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::dim("matmul_tn outer axis", k, b.shape[0]));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            for (d, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a b^T` for rank-2 tensors: `[m, k] x [n, k]^T -> [m, n]`.
pub fn matmul_nt<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    if b.shape[1] != k {
        return Err(Error::dim("matmul_nt inner axis", k, b.shape[1]));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow
                .iter()
                .zip(&b.data[j * k..(j + 1) * k])
                .map(|(&x, &y)| x * y)
                .sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds a length-`n` vector to every row of an `[m, n]` tensor.
pub fn add_bias<T: Float>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *a.shape.last().ok_or_else(|| Error::invalid("bias on a scalar"))?;
    if bias.len() != n {
        return Err(Error::dim("bias length", n, bias.len()));
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(n) {
        for (d, &b) in row.iter_mut().zip(&bias.data) {
            *d += b;
        }
    }
    Ok(out)
}

pub fn relu<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn nhwc<T: Float>(a: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    if a.rank() != 4 {
        return Err(Error::dim(format!("{what} rank"), 4, a.rank()));
    }
    Ok([a.shape[0], a.shape[1], a.shape[2], a.shape[3]])
}

/// 2x2 mean pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(a, "pool input")?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::dim("pool spatial extent", 2, h.min(w)));
    }
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let ob = ((b * ho + y) * wo + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let ib = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        out[ob + ch] += a.data[ib + ch] * quarter;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, ho, wo, c], out)
}

pub fn avg_pool2_backward<T: Float>(input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                let ob = ((b * ho + y) * wo + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let ib = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        out[ib + ch] = grad.data[ob + ch] * quarter;
                    }
                }
            }
        }
    }
    Tensor {
        shape: input_shape.to_vec(),
        data: out,
    }
}

/// `[n, h, w, c] -> [n, c]` spatial mean.
pub fn global_mean_pool<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(a, "global pool input")?;
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let dst = &mut out[b * c..(b + 1) * c];
        for px in a.data[b * h * w * c..(b + 1) * h * w * c].chunks(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Row-wise normalized exponential of a rank-2 tensor.
pub fn softmax_rows<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::dim("softmax rank", 2, a.rank()));
    }
    let c = a.shape[1];
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

/// Concatenates rank-4 (or any equal-prefix) tensors along the last axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    let prefix = &first.shape[..first.rank() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != first.rank() || &p.shape[..p.rank() - 1] != prefix {
            return Err(Error::invalid(format!(
                "concat shape {:?} incompatible with {:?}",
                p.shape, first.shape
            )));
        }
        widths.push(*p.shape.last().unwrap());
    }
    let outer: usize = prefix.iter().product();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = prefix.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

/// Mean softmax cross-entropy of `[n, classes]` logits. Returns the loss and
/// the row-wise softmax.
pub fn softmax_cross_entropy<T: Float>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::dim("logits rank", 2, logits.rank()));
    }
    let (n, c) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::dim("label count", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let mut probs = vec![T::zero(); n * c];
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} outside [0, {c})")));
        }
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        total += m + z.ln() - row[y].as_f64();
        for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = T::of((v.as_f64() - m).exp() / z);
        }
    }
    Ok((T::of(total / n as f64), Tensor::new(vec![n, c], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap().data(), &[3.0]);
    }

    #[test]
    fn conv_box_filter_counts_valid_taps() {
        let x = Tensor::<f64>::ones(&[1, 3, 3, 1]);
        let w = Tensor::<f64>::ones(&[3, 3, 1, 1]);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(y.data()[edge], 6.0);
        }
    }

    #[test]
    fn grouped_conv_preserves_shape() {
        let x = Tensor::<f32>::ones(&[1, 8, 8, 16]);
        let w = Tensor::<f32>::ones(&[3, 3, 4, 16]);
        assert_eq!(conv2d(&x, &w, 4, 1).unwrap().shape(), &[1, 8, 8, 16]);
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = Tensor::<f32>::ones(&[1, 4, 4, 6]);
        let w = Tensor::<f32>::ones(&[3, 3, 2, 6]);
        let err = conv2d(&x, &w, 4, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let err = conv2d(&x, &w, 2, 1).unwrap_err().to_string();
        assert!(err.contains("filter depth"), "{err}");
        let w = Tensor::<f32>::ones(&[3, 3, 3, 5]);
        let err = conv2d(&x, &w, 2, 1).unwrap_err().to_string();
        assert!(err.contains("output channels"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin() {
        let logits = Tensor::<f32>::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        // -log sigmoid(20) = log1p(exp(-20))
        let expected = (-20f64).exp().ln_1p();
        assert!(((loss as f64) - expected).abs() / expected < 1e-6, "{loss}");
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let logits = t(&[1, 3], &[margin, 0.0, 0.0]);
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f32>::zeros(&[1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn concat_and_pool_shapes() {
        let a = Tensor::<f32>::ones(&[2, 4, 4, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4, 4, 2]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 4, 5]);
        assert_eq!(&c.data()[..5], &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(avg_pool2(&c).unwrap().shape(), &[2, 2, 2, 5]);
        assert_eq!(global_mean_pool(&c).unwrap().shape(), &[2, 5]);
    }
}
