//! Efficient feature transformations: per-task adapters appended to the
//! output of each backbone convolution.
//!
//! A layer with `K` feature maps is split into `K/a` groups of `a` maps; each
//! group is convolved with its own `a` filters of size `3x3xa` (group-wise
//! part, `H^s`). The point-wise part `H^d` does the same with `K/b` groups of
//! `b` filters of size `1x1xb`. The adapter output is `H^s + gamma * H^d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EftConfig {
    /// Channels per group-wise filter group.
    pub a: usize,
    /// Channels per point-wise filter group.
    pub b: usize,
    /// 1 enables the point-wise branch, 0 disables it.
    pub gamma: u8,
}

impl Default for EftConfig {
    fn default() -> Self {
        Self::DESK
    }
}

impl EftConfig {
    /// Small-task preset.
    pub const DESK: EftConfig = EftConfig { a: 2, b: 1, gamma: 1 };
    /// Preset used with wide backbones.
    pub const LARGE: EftConfig = EftConfig { a: 8, b: 16, gamma: 1 };

    pub fn new(a: usize, b: usize, gamma: u8) -> Result<Self> {
        let cfg = Self { a, b, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.b == 0 {
            return Err(Error::invalid("EFT group sizes must be at least 1"));
        }
        if self.gamma > 1 {
            return Err(Error::invalid(format!("gamma must be 0 or 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Checks that a layer with `k` channels splits evenly into both group sizes.
    pub fn check_channels(&self, k: usize) -> Result<()> {
        self.validate()?;
        if k == 0 || k % self.a != 0 {
            return Err(Error::invalid(format!("{k} channels not divisible by a={}", self.a)));
        }
        if k % self.b != 0 {
            return Err(Error::invalid(format!("{k} channels not divisible by b={}", self.b)));
        }
        Ok(())
    }

    /// `9 a K + b K`.
    pub fn layer_params(&self, k: usize) -> usize {
        9 * self.a * k + self.b * k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EftLayerWeights<T = f32> {
    /// `[3, 3, a, K]`: `K/a` groups of `a` filters.
    pub groupwise: Tensor<T>,
    /// `[1, 1, b, K]`: `K/b` groups of `b` filters.
    pub pointwise: Tensor<T>,
}

impl<T: Float> EftLayerWeights<T> {
    pub fn zeros(k: usize, cfg: &EftConfig) -> Result<Self> {
        cfg.check_channels(k)?;
        Ok(Self {
            groupwise: Tensor::zeros(&[3, 3, cfg.a, k]),
            pointwise: Tensor::zeros(&[1, 1, cfg.b, k]),
        })
    }

    /// Group-wise filters pass each channel through unchanged (centre tap 1
    /// on the matching in-group channel); point-wise filters are zero.
    pub fn identity(k: usize, cfg: &EftConfig) -> Result<Self> {
        let mut w = Self::zeros(k, cfg)?;
        let centre = (3 + 1) * cfg.a * k;
        for co in 0..k {
            let ci = co % cfg.a;
            w.groupwise.data_mut()[centre + ci * k + co] = T::one();
        }
        Ok(w)
    }

    pub fn random<R: Rng + ?Sized>(k: usize, cfg: &EftConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.check_channels(k)?;
        Ok(Self {
            groupwise: Tensor::randn(&[3, 3, cfg.a, k], std, rng),
            pointwise: Tensor::randn(&[1, 1, cfg.b, k], std, rng),
        })
    }

    pub fn channels(&self) -> usize {
        *self.groupwise.shape().last().unwrap_or(&0)
    }

    pub fn param_count(&self) -> usize {
        self.groupwise.len() + self.pointwise.len()
    }

    pub fn check(&self, cfg: &EftConfig) -> Result<()> {
        let k = self.channels();
        cfg.check_channels(k)?;
        self.groupwise.expect_shape("group-wise filters", &[3, 3, cfg.a, k])?;
        self.pointwise.expect_shape("point-wise filters", &[1, 1, cfg.b, k])
    }

    pub fn cast<U: Float>(&self) -> EftLayerWeights<U> {
        EftLayerWeights {
            groupwise: self.groupwise.cast(),
            pointwise: self.pointwise.cast(),
        }
    }
}

fn channels_of<T: Float>(f: &Tensor<T>) -> Result<usize> {
    if f.rank() != 4 {
        return Err(Error::dim("feature map rank", 4, f.rank()));
    }
    Ok(f.shape()[3])
}

/// Group-wise part `H^s`: each group of `a` maps convolved (padding 1) with
/// its own `a` filters, groups concatenated in order.
pub fn apply_groupwise<T: Float>(f: &Tensor<T>, w: &Tensor<T>, a: usize) -> Result<Tensor<T>> {
    let k = channels_of(f)?;
    if a == 0 || k % a != 0 {
        return Err(Error::invalid(format!("{k} channels not divisible by a={a}")));
    }
    ops::conv2d(f, w, k / a, 1)
}

/// Point-wise part `H^d`.
pub fn apply_pointwise<T: Float>(f: &Tensor<T>, w: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let k = channels_of(f)?;
    if b == 0 || k % b != 0 {
        return Err(Error::invalid(format!("{k} channels not divisible by b={b}")));
    }
    ops::conv2d(f, w, k / b, 0)
}

/// `H = H^s + gamma H^d`.
pub fn eft_forward<T: Float>(f: &Tensor<T>, w: &EftLayerWeights<T>, cfg: &EftConfig) -> Result<Tensor<T>> {
    let k = channels_of(f)?;
    if w.channels() != k {
        return Err(Error::dim("EFT channels", k, w.channels()));
    }
    w.check(cfg)?;
    let hs = apply_groupwise(f, &w.groupwise, cfg.a)?;
    if cfg.gamma == 0 {
        return Ok(hs);
    }
    ops::add(&hs, &apply_pointwise(f, &w.pointwise, cfg.b)?)
}

/// [`eft_forward`] recorded on a graph. The filter banks are graph nodes so
/// they can be trainable, constants, or mixtures.
pub fn eft_graph<T: Float>(
    g: &mut Graph<T>,
    f: Var,
    groupwise: Var,
    pointwise: Var,
    cfg: &EftConfig,
) -> Result<Var> {
    let k = channels_of(g.value(f))?;
    cfg.check_channels(k)?;
    let hs = g.conv2d(f, groupwise, k / cfg.a, 1)?;
    if cfg.gamma == 0 {
        return Ok(hs);
    }
    let hd = g.conv2d(f, pointwise, k / cfg.b, 0)?;
    g.add(hs, hd)
}

/// Adapter parameters for a whole network: `sum_layers (9 a K + b K)`.
pub fn param_count(channel_schedule: &[usize], cfg: &EftConfig) -> Result<usize> {
    if channel_schedule.is_empty() {
        return Err(Error::invalid("empty channel schedule"));
    }
    let mut total = 0;
    for &k in channel_schedule {
        cfg.check_channels(k)?;
        total += cfg.layer_params(k);
    }
    Ok(total)
}

/// Output channels of every convolution in ResNet-18: the stem, sixteen
/// block convolutions and, optionally, the three 1x1 downsample shortcuts.
pub fn resnet18_schedule(adapt_shortcuts: bool) -> Vec<usize> {
    let mut s = vec![64];
    for (stage, &k) in [64usize, 128, 256, 512].iter().enumerate() {
        s.extend([k; 4]);
        if adapt_shortcuts && stage > 0 {
            s.push(k);
        }
    }
    s
}

/// Per-channel values of a task-specific batch norm stored with each adapted
/// convolution: scale, shift, running mean and running variance.
pub const TASK_NORM_PER_CHANNEL: usize = 4;

/// Per-task storage for an adapted ResNet-18: adapter filters plus a
/// task-specific batch norm after every adapted convolution.
pub fn resnet18_task_params(cfg: &EftConfig, adapt_shortcuts: bool) -> Result<usize> {
    let schedule = resnet18_schedule(adapt_shortcuts);
    let norm: usize = schedule.iter().map(|k| TASK_NORM_PER_CHANNEL * k).sum();
    Ok(param_count(&schedule, cfg)? + norm)
}
