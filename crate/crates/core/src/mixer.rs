//! Module mixing. Every layer's adapter is a convex combination of frozen
//! source adapters and one new trainable adapter, and the final feature is a
//! convex combination of source features and the target feature. Each
//! combination uses one row of simplex weights obtained from free logits by a
//! row-wise softmax; columns list the sources first and the new module last.
//!
//! The same model covers plain training (no sources), fine-tuning (no
//! sources, adapters initialized from a source) and the black-box case
//! (feature row only).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ThetaInit, TrainConfig};
use crate::eft::{EftConfig, EftLayerWeights};
use crate::error::{Error, Result};
use crate::net::{extract, forward_features, Backbone, LayerVars, Linear};
use crate::task::{mix_seed, TaskSpec};
use crate::tensor::{ops, Adam, Float, Graph, Tensor, Var};

/// Tolerance on the row sums of realized mixing weights.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Free logits whose row-wise softmax gives the mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingSpec<T: Float = f32> {
    logits: Tensor<T>,
}

impl<T: Float> MixingSpec<T> {
    /// `j + 1` rows (one per layer plus the feature row), each realizing
    /// `((1 - lambda_new)/m, ..., lambda_new)`. With no sources every row is
    /// the single weight 1.
    pub fn init(lambda_new: f64, m: usize, j: usize) -> Result<Self> {
        if !(lambda_new > 0.0 && lambda_new < 1.0) {
            return Err(Error::invalid(format!("lambda_new must lie in (0, 1), got {lambda_new}")));
        }
        let row: Vec<f64> = if m == 0 {
            vec![0.0]
        } else {
            let ls = ((1.0 - lambda_new) / m as f64).ln();
            let mut r = vec![ls; m];
            r.push(lambda_new.ln());
            r
        };
        let rows = j + 1;
        let data = (0..rows).flat_map(|_| row.iter().map(|&v| T::of(v))).collect();
        Ok(Self {
            logits: Tensor::new(vec![rows, m + 1], data)?,
        })
    }

    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 || logits.shape()[0] == 0 || logits.shape()[1] == 0 {
            return Err(Error::invalid(format!("mixing logits need a non-empty matrix, got {:?}", logits.shape())));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn rows(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn sources(&self) -> usize {
        self.logits.shape()[1] - 1
    }

    pub fn realized(&self) -> Tensor<T> {
        ops::softmax_rows(&self.logits).expect("logits are a matrix")
    }
}

/// Mixing weights of a model: learned through logits or held fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixing<T: Float = f32> {
    Learned(MixingSpec<T>),
    Fixed(Tensor<T>),
}

impl<T: Float> Mixing<T> {
    /// Fixed weights; every row must be non-negative and sum to one.
    pub fn fixed(weights: Tensor<T>) -> Result<Self> {
        if weights.rank() != 2 || weights.is_empty() {
            return Err(Error::invalid("fixed mixing weights need a non-empty matrix"));
        }
        let cols = weights.shape()[1];
        for r in 0..weights.shape()[0] {
            let row = weights.row(r);
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|v| v.as_f64() < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!("row {r} of {cols} weights is not on the simplex")));
            }
        }
        Ok(Mixing::Fixed(weights))
    }

    /// A single feature row giving `lambda_source / m` to every source and
    /// the rest to the new module. Endpoints are allowed.
    pub fn fixed_feature_row(lambda_source: f64, m: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_source) || m == 0 {
            return Err(Error::invalid(format!("cannot give weight {lambda_source} to {m} sources")));
        }
        let mut row = vec![T::of(lambda_source / m as f64); m];
        row.push(T::of(1.0 - lambda_source));
        Self::fixed(Tensor::new(vec![1, m + 1], row)?)
    }

    pub fn realized(&self) -> Tensor<T> {
        match self {
            Mixing::Learned(s) => s.realized(),
            Mixing::Fixed(w) => w.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Mixing::Learned(s) => s.rows(),
            Mixing::Fixed(w) => w.shape()[0],
        }
    }

    pub fn sources(&self) -> usize {
        match self {
            Mixing::Learned(s) => s.sources(),
            Mixing::Fixed(w) => w.shape()[1] - 1,
        }
    }
}

fn convex<T: Float>(items: &[&Tensor<T>], row: &[T], what: &str) -> Result<Tensor<T>> {
    if items.len() != row.len() {
        return Err(Error::dim(format!("{what} weights"), items.len(), row.len()));
    }
    let shape = items[0].shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for (item, &c) in items.iter().zip(row) {
        item.expect_shape(what, &shape)?;
        for (d, &x) in out.data_mut().iter_mut().zip(item.data()) {
            *d += c * x;
        }
    }
    Ok(out)
}

/// Convex combination of one layer's adapters; `row` lists the source
/// weights first and the new module's weight last.
pub fn mix_params<T: Float>(
    theta_new: &EftLayerWeights<T>,
    sources: &[&EftLayerWeights<T>],
    row: &[T],
) -> Result<EftLayerWeights<T>> {
    let gw: Vec<&Tensor<T>> = sources.iter().map(|s| &s.groupwise).chain([&theta_new.groupwise]).collect();
    let pw: Vec<&Tensor<T>> = sources.iter().map(|s| &s.pointwise).chain([&theta_new.pointwise]).collect();
    Ok(EftLayerWeights {
        groupwise: convex(&gw, row, "group-wise filters")?,
        pointwise: convex(&pw, row, "point-wise filters")?,
    })
}

/// Convex combination of feature batches, sources first and target last.
pub fn mix_features<T: Float>(target: &Tensor<T>, sources: &[&Tensor<T>], row: &[T]) -> Result<Tensor<T>> {
    let items: Vec<&Tensor<T>> = sources.iter().copied().chain([target]).collect();
    convex(&items, row, "features")
}

/// A selected source as seen by the mixed model. Features are precomputed
/// for every sample of the target task and indexed by sample position.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBranch<T: Float = f32> {
    pub id: u32,
    /// Source adapters; required when parameters are mixed.
    pub adapters: Option<Vec<EftLayerWeights<T>>>,
    /// `[N, d]` features entering the feature mixture.
    pub features: Tensor<T>,
    /// Features used by the distance-correlation penalty when they differ
    /// from `features` (for example before a dimension reduction).
    pub dc_features: Option<Tensor<T>>,
}

impl<T: Float> SourceBranch<T> {
    fn dc(&self) -> &Tensor<T> {
        self.dc_features.as_ref().unwrap_or(&self.features)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    /// Unweighted sum of the per-source distance correlations.
    pub dc: f64,
    pub total: f64,
    /// Sources whose correlation was degenerate on this batch.
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub dc: f64,
    pub total: f64,
    pub degenerate: usize,
    /// Realized mixing weights at the end of the epoch.
    pub lambda: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Largest `|sum(row) - 1|` seen after any step.
    pub max_simplex_error: f64,
    /// Smallest realized weight seen after any step.
    pub min_lambda: f64,
}

struct Forward {
    logits: Var,
    target: Var,
    params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedModel<T: Float = f32> {
    backbone: Backbone,
    eft: EftConfig,
    theta_new: Vec<EftLayerWeights<T>>,
    head: Linear<T>,
    sources: Vec<SourceBranch<T>>,
    mixing: Mixing<T>,
    param_mixing: bool,
}

/// New adapters for every backbone layer.
pub fn new_adapters<T: Float>(backbone: &Backbone, eft: &EftConfig, init: ThetaInit, seed: u64) -> Result<Vec<EftLayerWeights<T>>> {
    match init {
        ThetaInit::Identity => backbone.identity_adapters(eft),
        ThetaInit::Random { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 17]));
            backbone
                .channel_schedule()
                .iter()
                .map(|&k| EftLayerWeights::random(k, eft, std, &mut rng))
                .collect()
        }
    }
}

impl<T: Float> MixedModel<T> {
    pub fn new(
        backbone: Backbone,
        eft: EftConfig,
        theta_new: Vec<EftLayerWeights<T>>,
        head: Linear<T>,
        sources: Vec<SourceBranch<T>>,
        mixing: Mixing<T>,
        param_mixing: bool,
    ) -> Result<Self> {
        let layers = backbone.config().num_layers();
        if theta_new.len() != layers {
            return Err(Error::dim("new adapter layers", layers, theta_new.len()));
        }
        for (w, &k) in theta_new.iter().zip(backbone.channel_schedule()) {
            w.check(&eft)?;
            if w.channels() != k {
                return Err(Error::dim("adapter channels", k, w.channels()));
            }
        }
        let d = backbone.feature_dim();
        if head.in_dim() != d || head.bias.shape() != [head.classes()] {
            return Err(Error::dim("classifier input", d, head.in_dim()));
        }
        let rows = if param_mixing { layers + 1 } else { 1 };
        if mixing.rows() != rows {
            return Err(Error::dim("mixing rows", rows, mixing.rows()));
        }
        if mixing.sources() != sources.len() {
            return Err(Error::dim("mixing source columns", sources.len(), mixing.sources()));
        }
        let n_rows = sources.first().map(|s| s.features.shape()[0]);
        for s in &sources {
            if s.features.rank() != 2 || s.features.shape()[1] != d {
                return Err(Error::dim(format!("source {} feature width", s.id), d, *s.features.shape().last().unwrap_or(&0)));
            }
            if Some(s.features.shape()[0]) != n_rows || Some(s.dc().shape()[0]) != n_rows {
                return Err(Error::dim("source feature rows", n_rows.unwrap_or(0), s.features.shape()[0]));
            }
            if param_mixing {
                let adapters = s
                    .adapters
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("source {} has no adapters to mix", s.id)))?;
                if adapters.len() != layers {
                    return Err(Error::dim("source adapter layers", layers, adapters.len()));
                }
                for (a, w) in adapters.iter().zip(&theta_new) {
                    a.groupwise.expect_shape("source group-wise filters", w.groupwise.shape())?;
                    a.pointwise.expect_shape("source point-wise filters", w.pointwise.shape())?;
                }
            }
        }
        Ok(Self {
            backbone,
            eft,
            theta_new,
            head,
            sources,
            mixing,
            param_mixing,
        })
    }

    /// No sources: the plain adapted network with a zero-initialized head.
    pub fn standalone(backbone: Backbone, eft: EftConfig, classes: usize, init: ThetaInit, seed: u64) -> Result<Self> {
        let theta = new_adapters(&backbone, &eft, init, seed)?;
        Self::from_adapters(backbone, eft, theta, classes)
    }

    /// No sources, adapters given (used for fine-tuning).
    pub fn from_adapters(backbone: Backbone, eft: EftConfig, theta: Vec<EftLayerWeights<T>>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("a classifier needs at least one class"));
        }
        let j = backbone.config().num_layers();
        let head = Linear::zeros(backbone.feature_dim(), classes);
        let mixing = Mixing::Learned(MixingSpec::init(0.5, 0, j)?);
        Self::new(backbone, eft, theta, head, Vec::new(), mixing, true)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn eft(&self) -> &EftConfig {
        &self.eft
    }

    pub fn theta_new(&self) -> &[EftLayerWeights<T>] {
        &self.theta_new
    }

    pub fn head(&self) -> &Linear<T> {
        &self.head
    }

    pub fn sources(&self) -> &[SourceBranch<T>] {
        &self.sources
    }

    pub fn mixing(&self) -> &Mixing<T> {
        &self.mixing
    }

    pub fn param_mixing(&self) -> bool {
        self.param_mixing
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    /// Trainable tensors in a fixed order: per layer group-wise then
    /// point-wise filters, classifier weight and bias, then the logits of
    /// learned mixing weights.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        for w in &self.theta_new {
            out.push(&w.groupwise);
            out.push(&w.pointwise);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        if let Mixing::Learned(s) = &self.mixing {
            out.push(&s.logits);
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for w in &mut self.theta_new {
            out.push(&mut w.groupwise);
            out.push(&mut w.pointwise);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        if let Mixing::Learned(s) = &mut self.mixing {
            out.push(&mut s.logits);
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Replaces trainable tensor `slot` (same order as [`Self::trainable`]).
    pub fn set_trainable(&mut self, slot: usize, value: Tensor<T>) -> Result<()> {
        let mut slots = self.trainable_mut();
        let n = slots.len();
        let target = slots
            .get_mut(slot)
            .ok_or_else(|| Error::invalid(format!("trainable slot {slot} of {n}")))?;
        value.expect_shape("trainable replacement", target.shape())?;
        **target = value;
        Ok(())
    }

    /// Realized weights as `f64` rows.
    pub fn realized_lambda(&self) -> Vec<Vec<f64>> {
        let w = self.mixing.realized();
        (0..w.shape()[0]).map(|r| w.row(r).iter().map(|v| v.as_f64()).collect()).collect()
    }

    /// Effective adapters of every layer under the current weights.
    pub fn effective_adapters(&self) -> Result<Vec<EftLayerWeights<T>>> {
        if !self.param_mixing {
            return Ok(self.theta_new.clone());
        }
        let w = self.mixing.realized();
        self.theta_new
            .iter()
            .enumerate()
            .map(|(j, new)| {
                let srcs: Vec<&EftLayerWeights<T>> =
                    self.sources.iter().map(|s| &s.adapters.as_ref().expect("checked")[j]).collect();
                mix_params(new, &srcs, w.row(j))
            })
            .collect()
    }

    fn check_rows(&self, rows: &[usize], n_images: usize) -> Result<()> {
        if rows.len() != n_images {
            return Err(Error::dim("batch rows", n_images, rows.len()));
        }
        if let Some(s) = self.sources.first() {
            let n = s.features.shape()[0];
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(Error::invalid(format!("sample {bad} has no cached source features ({n} rows)")));
            }
        }
        Ok(())
    }

    fn forward_graph(&self, g: &mut Graph<T>, images: Tensor<T>, rows: &[usize]) -> Result<Forward> {
        self.check_rows(rows, images.shape().first().copied().unwrap_or(0))?;
        let trunk = self.backbone.constants(g);
        let mut params = Vec::new();
        let mut new_vars = Vec::with_capacity(self.theta_new.len());
        for w in &self.theta_new {
            let gw = g.param(w.groupwise.clone());
            let pw = g.param(w.pointwise.clone());
            params.push(gw);
            params.push(pw);
            new_vars.push(LayerVars {
                groupwise: gw,
                pointwise: pw,
            });
        }
        let head_w = g.param(self.head.weight.clone());
        let head_b = g.param(self.head.bias.clone());
        params.push(head_w);
        params.push(head_b);
        let weights = match &self.mixing {
            Mixing::Learned(s) => {
                let logits = g.param(s.logits.clone());
                params.push(logits);
                g.softmax_rows(logits)?
            }
            Mixing::Fixed(w) => g.constant(w.clone()),
        };
        let layers = if self.param_mixing {
            let mut out = Vec::with_capacity(new_vars.len());
            for (j, nv) in new_vars.iter().enumerate() {
                let mut gws = Vec::with_capacity(self.sources.len() + 1);
                let mut pws = Vec::with_capacity(self.sources.len() + 1);
                for s in &self.sources {
                    let a = &s.adapters.as_ref().expect("checked at construction")[j];
                    gws.push(g.constant(a.groupwise.clone()));
                    pws.push(g.constant(a.pointwise.clone()));
                }
                gws.push(nv.groupwise);
                pws.push(nv.pointwise);
                out.push(LayerVars {
                    groupwise: g.combine(weights, j, &gws)?,
                    pointwise: g.combine(weights, j, &pws)?,
                });
            }
            out
        } else {
            new_vars
        };
        let x = g.constant(images);
        let target = forward_features(g, &self.backbone, &trunk, &layers, &self.eft, x)?;
        let mut items = Vec::with_capacity(self.sources.len() + 1);
        for s in &self.sources {
            items.push(g.constant(s.features.gather_rows(rows)?));
        }
        items.push(target);
        let feature_row = self.mixing.rows() - 1;
        let mixed = g.combine(weights, feature_row, &items)?;
        let z = g.matmul(mixed, head_w)?;
        let logits = g.add_bias(z, head_b)?;
        Ok(Forward { logits, target, params })
    }

    fn loss_graph(
        &self,
        g: &mut Graph<T>,
        images: Tensor<T>,
        rows: &[usize],
        labels: &[usize],
        sigma: f64,
    ) -> Result<(Forward, Var, LossParts)> {
        let fw = self.forward_graph(g, images, rows)?;
        let ce = g.cross_entropy(fw.logits, labels)?;
        let mut parts = LossParts {
            ce: g.value(ce).item()?.as_f64(),
            ..LossParts::default()
        };
        let mut dc_sum: Option<Var> = None;
        if rows.len() >= 2 {
            for s in &self.sources {
                let src = g.constant(s.dc().gather_rows(rows)?);
                let (v, degenerate) = g.dcor(src, fw.target)?;
                parts.dc += g.value(v).item()?.as_f64();
                parts.degenerate += degenerate as usize;
                dc_sum = Some(match dc_sum {
                    None => v,
                    Some(acc) => g.add(acc, v)?,
                });
            }
        } else {
            parts.degenerate = self.sources.len();
        }
        let total = match dc_sum {
            Some(dc) if sigma != 0.0 => {
                let weighted = g.scale(dc, T::of(sigma));
                g.add(ce, weighted)?
            }
            _ => ce,
        };
        parts.total = g.value(total).item()?.as_f64();
        Ok((fw, total, parts))
    }

    /// Loss components and gradients of the total loss for every trainable
    /// tensor, in [`Self::trainable`] order.
    pub fn objective(
        &self,
        images: &Tensor<T>,
        rows: &[usize],
        labels: &[usize],
        sigma: f64,
    ) -> Result<(LossParts, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let (fw, total, parts) = self.loss_graph(&mut g, images.clone(), rows, labels, sigma)?;
        let mut grads = g.backward(total)?;
        let out = fw
            .params
            .iter()
            .map(|&p| grads.take(p).expect("every parameter receives a gradient"))
            .collect();
        Ok((parts, out))
    }

    /// Class scores for `images`; `rows` locates each image among the task
    /// samples for which source features were cached.
    pub fn logits(&self, images: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
        const CHUNK: usize = 256;
        let n = images.shape().first().copied().unwrap_or(0);
        self.check_rows(rows, n)?;
        let mut out = Vec::with_capacity(n * self.num_classes());
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let fw = self.forward_graph(&mut g, images.gather_rows(&idx)?, &rows[start..end])?;
            out.extend_from_slice(g.value(fw.logits).data());
        }
        Tensor::new(vec![n, self.num_classes()], out)
    }

    /// Argmax predictions; ties go to the smaller class id.
    pub fn predict(&self, images: &Tensor<T>, rows: &[usize]) -> Result<Vec<usize>> {
        let logits = self.logits(images, rows)?;
        Ok((0..rows.len())
            .map(|i| {
                let r = logits.row(i);
                let mut best = 0;
                for (c, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Accuracy on the given sample positions of `task`.
    pub fn accuracy(&self, task: &TaskSpec, split: &[usize]) -> Result<f64> {
        if split.is_empty() {
            return Err(Error::invalid("cannot score an empty split"));
        }
        let images = task.images.gather_rows(split)?.cast::<T>();
        let pred = self.predict(&images, split)?;
        let hits = pred.iter().zip(split).filter(|(p, &i)| **p == task.labels[i]).count();
        Ok(hits as f64 / split.len() as f64)
    }

    /// Target features before mixing.
    pub fn target_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        extract(&self.backbone, &self.eft, &self.effective_adapters()?, images)
    }

    fn simplex_status(&self) -> (f64, f64) {
        let w = self.mixing.realized();
        let mut err: f64 = 0.0;
        let mut min = f64::INFINITY;
        for r in 0..w.shape()[0] {
            let row = w.row(r);
            err = err.max((row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs());
            min = row.iter().map(|v| v.as_f64()).fold(min, f64::min);
        }
        (err, min)
    }

    /// Minibatch training of the trainable set on the task's train split.
    pub fn train(&mut self, task: &TaskSpec, cfg: &TrainConfig) -> Result<History> {
        cfg.validate()?;
        if let Some(&bad) = task.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::invalid(format!("label {bad} outside {} classes", self.num_classes())));
        }
        let train = &task.splits().train;
        if train.is_empty() {
            return Err(Error::invalid(format!("task {} has an empty train split", task.id())));
        }
        let images = task.images.cast::<T>();
        let shapes: Vec<Vec<usize>> = self.trainable().iter().map(|t| t.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let mut adam = Adam::<T>::new(cfg.adam(), &shape_refs);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 19]));
        let mut history = History {
            min_lambda: f64::INFINITY,
            ..History::default()
        };
        let mut order = train.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = LossParts::default();
            for batch in order.chunks(cfg.batch_size) {
                let x = images.gather_rows(batch)?;
                let labels = task.split_labels(batch);
                let (parts, grads) = self.objective(&x, batch, &labels, cfg.sigma)?;
                if !parts.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                    return Err(Error::Diverged { epoch });
                }
                {
                    let mut params = self.trainable_mut();
                    let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
                    adam.step(&mut params, &grad_refs)?;
                }
                history.steps += 1;
                let (err, min) = self.simplex_status();
                history.max_simplex_error = history.max_simplex_error.max(err);
                history.min_lambda = history.min_lambda.min(min);
                if err > SIMPLEX_TOL || (min <= 0.0 && matches!(self.mixing, Mixing::Learned(_))) {
                    return Err(Error::invalid(format!(
                        "mixing weights left the simplex at step {} (error {err:e}, min {min:e})",
                        history.steps
                    )));
                }
                let w = batch.len() as f64;
                sums.ce += parts.ce * w;
                sums.dc += parts.dc * w;
                sums.total += parts.total * w;
                sums.degenerate += parts.degenerate;
            }
            let n = order.len() as f64;
            history.epochs.push(EpochLog {
                epoch,
                ce: sums.ce / n,
                dc: sums.dc / n,
                total: sums.total / n,
                degenerate: sums.degenerate,
                lambda: self.realized_lambda(),
            });
        }
        Ok(history)
    }
}

impl MixedModel<f32> {
    /// White-box mixing of the given source adapters (all on `backbone`).
    /// Source features are computed once for every sample of `task`.
    pub fn white_box(
        backbone: Backbone,
        eft: EftConfig,
        sources: &[(u32, &[EftLayerWeights<f32>])],
        task: &TaskSpec,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let theta = new_adapters(&backbone, &eft, cfg.theta_init, cfg.seed)?;
        let mut branches = Vec::with_capacity(sources.len());
        for &(id, adapters) in sources {
            branches.push(SourceBranch {
                id,
                adapters: Some(adapters.to_vec()),
                features: extract(&backbone, &eft, adapters, &task.images)?,
                dc_features: None,
            });
        }
        let j = backbone.config().num_layers();
        let mixing = Mixing::Learned(MixingSpec::init(cfg.lambda_new, sources.len(), j)?);
        let head = Linear::zeros(backbone.feature_dim(), task.num_classes());
        Self::new(backbone, eft, theta, head, branches, mixing, true)
    }

    /// Feature-level mixing only, with the given weights and precomputed
    /// source features.
    pub fn feature_mixing(
        backbone: Backbone,
        eft: EftConfig,
        branches: Vec<SourceBranch<f32>>,
        mixing: Mixing<f32>,
        classes: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let theta = new_adapters(&backbone, &eft, cfg.theta_init, cfg.seed)?;
        let head = Linear::zeros(backbone.feature_dim(), classes);
        Self::new(backbone, eft, theta, head, branches, mixing, false)
    }
}
