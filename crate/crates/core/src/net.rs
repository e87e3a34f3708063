//! Frozen convolutional backbone and the adapted forward pass.
//!
//! Each layer is `conv3x3 (pad 1, no bias) -> EFT -> relu`, optionally
//! followed by 2x2 average pooling; a global mean pool yields the feature
//! vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eft::{eft_graph, EftConfig, EftLayerWeights};
use crate::error::{Error, Result};
use crate::tensor::{io, Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each convolution.
    pub channels: Vec<usize>,
    /// Layers followed by 2x2 average pooling.
    pub pool_after: Vec<usize>,
}

impl BackboneConfig {
    /// 16x16 grey images, channels 8-16-16-32, two pooling stages, d = 32.
    pub fn desk() -> Self {
        Self {
            image_size: 16,
            in_channels: 1,
            channels: vec![8, 16, 16, 32],
            pool_after: vec![0, 1],
        }
    }

    /// Desk layout with a different final width.
    pub fn desk_with_width(d: usize) -> Self {
        let mut c = Self::desk();
        let half = (d / 2).max(1);
        c.channels = vec![8, half.max(8), half.max(8), d];
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid("backbone needs at least one non-empty layer"));
        }
        let mut s = self.image_size;
        for layer in 0..self.channels.len() {
            if self.pool_after.contains(&layer) {
                if s % 2 != 0 {
                    return Err(Error::invalid(format!("cannot pool odd extent {s} after layer {layer}")));
                }
                s /= 2;
            }
        }
        if s == 0 || self.pool_after.iter().any(|&l| l >= self.channels.len()) {
            return Err(Error::invalid("pooling schedule out of range"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    fn filter_shape(&self, layer: usize) -> [usize; 4] {
        let cin = if layer == 0 { self.in_channels } else { self.channels[layer - 1] };
        [3, 3, cin, self.channels[layer]]
    }
}

/// Shared frozen trunk. Weights never change after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub id: String,
    config: BackboneConfig,
    filters: Vec<Tensor<f32>>,
}

/// Gaussian columns orthogonalized by Gram-Schmidt, each scaled to norm
/// `sqrt(2)`; columns beyond the fan-in are left Gaussian with that norm.
fn orthogonal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let g = Tensor::<f64>::randn(&[cols, rows], 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut v = g.row(c).to_vec();
        if c < rows {
            for b in &basis[..c.min(rows)] {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = 2f64.sqrt();
    let mut out = vec![0f32; rows * cols];
    for (c, col) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + c] = (col[r] * scale) as f32;
        }
    }
    out
}

impl Backbone {
    pub fn init(id: impl Into<String>, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..config.num_layers())
            .map(|l| {
                let shape = config.filter_shape(l);
                let fan_in = shape[0] * shape[1] * shape[2];
                Tensor::new(shape.to_vec(), orthogonal_columns(fan_in, shape[3], &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.into(),
            config,
            filters,
        })
    }

    pub fn from_parts(id: impl Into<String>, config: BackboneConfig, filters: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        if filters.len() != config.num_layers() {
            return Err(Error::dim("backbone layers", config.num_layers(), filters.len()));
        }
        for (l, f) in filters.iter().enumerate() {
            f.expect_shape(&format!("backbone conv {l}"), &config.filter_shape(l))?;
        }
        Ok(Self {
            id: id.into(),
            config,
            filters,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn filters(&self) -> &[Tensor<f32>] {
        &self.filters
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Channels of every adapted layer, in order.
    pub fn channel_schedule(&self) -> &[usize] {
        &self.config.channels
    }

    /// Hex SHA-256 over the serialized filters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.filters {
            h.update(io::encode_blob(f));
        }
        hex::encode(h.finalize())
    }

    /// Identity-initialized adapters for every layer.
    pub fn identity_adapters<T: Float>(&self, eft: &EftConfig) -> Result<Vec<EftLayerWeights<T>>> {
        self.config
            .channels
            .iter()
            .map(|&k| EftLayerWeights::identity(k, eft))
            .collect()
    }

    /// Registers the frozen filters as graph constants.
    pub fn constants<T: Float>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.filters.iter().map(|f| g.constant(f.cast())).collect()
    }

    pub fn check_input<T: Float>(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if x.rank() != 4 {
            return Err(Error::dim("image rank", 4, x.rank()));
        }
        let s = x.shape();
        for (axis, want, got) in [
            ("image height", c.image_size, s[1]),
            ("image width", c.image_size, s[2]),
            ("image channels", c.in_channels, s[3]),
        ] {
            if want != got {
                return Err(Error::dim(axis, want, got));
            }
        }
        Ok(())
    }
}

/// Adapter filters of one layer as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub groupwise: Var,
    pub pointwise: Var,
}

/// Adapted trunk on the graph: returns the `[N, d]` feature node.
pub fn forward_features<T: Float>(
    g: &mut Graph<T>,
    backbone: &Backbone,
    trunk: &[Var],
    layers: &[LayerVars],
    eft: &EftConfig,
    x: Var,
) -> Result<Var> {
    let cfg = backbone.config();
    if layers.len() != cfg.num_layers() || trunk.len() != cfg.num_layers() {
        return Err(Error::dim("adapted layers", cfg.num_layers(), layers.len()));
    }
    backbone.check_input(g.value(x))?;
    let mut h = x;
    for (l, lv) in layers.iter().enumerate() {
        h = g.conv2d(h, trunk[l], 1, 1)?;
        h = eft_graph(g, h, lv.groupwise, lv.pointwise, eft)?;
        h = g.relu(h);
        if cfg.pool_after.contains(&l) {
            h = g.avg_pool2(h)?;
        }
    }
    g.global_mean_pool(h)
}

/// Inference in chunks; no parameters are registered.
pub fn extract<T: Float>(
    backbone: &Backbone,
    eft: &EftConfig,
    adapters: &[EftLayerWeights<T>],
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    const CHUNK: usize = 256;
    backbone.check_input(images)?;
    let n = images.shape()[0];
    let d = backbone.feature_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let mut g = Graph::<T>::new();
        let trunk = backbone.constants(&mut g);
        let layers: Vec<LayerVars> = adapters
            .iter()
            .map(|w| LayerVars {
                groupwise: g.constant(w.groupwise.clone()),
                pointwise: g.constant(w.pointwise.clone()),
            })
            .collect();
        let x = g.constant(images.gather_rows(&idx)?);
        let f = forward_features(&mut g, backbone, &trunk, &layers, eft, x)?;
        out.extend_from_slice(g.value(f).data());
        start += CHUNK;
    }
    Tensor::new(vec![n, d], out)
}

/// Linear classifier `x W + b` with `W: [d, alpha]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Float>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
