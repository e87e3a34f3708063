//! Source models: adapters plus a linear head trained on one task over the
//! shared frozen backbone, and the feature datasets they induce.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::eft::{EftConfig, EftLayerWeights};
use crate::error::{Error, Result};
use crate::mixer::{History, MixedModel};
use crate::net::{extract, Backbone, Linear};
use crate::task::{ClassRef, TaskSpec};
use crate::tensor::{io, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task_id: String,
    pub family: String,
    pub classes: Vec<ClassRef>,
    pub train_size: usize,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceModelRecord {
    pub id: u32,
    /// Id of the backbone the adapters were trained on.
    pub backbone: String,
    pub eft: EftConfig,
    pub adapters: Vec<EftLayerWeights<f32>>,
    pub head: Linear<f32>,
    pub meta: TaskMeta,
}

impl SourceModelRecord {
    pub fn feature_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    pub fn validate(&self) -> Result<()> {
        for w in &self.adapters {
            w.check(&self.eft)?;
        }
        if self.head.bias.shape() != [self.num_classes()] {
            return Err(Error::dim("classifier bias", self.num_classes(), self.head.bias.len()));
        }
        if self.meta.classes.len() != self.num_classes() {
            return Err(Error::dim("record classes", self.num_classes(), self.meta.classes.len()));
        }
        Ok(())
    }

    /// Named tensors in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.adapters.len() + 2);
        for (l, w) in self.adapters.iter().enumerate() {
            out.push((format!("eft.{l}.groupwise"), &w.groupwise));
            out.push((format!("eft.{l}.pointwise"), &w.pointwise));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Hex SHA-256 over every serialized tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.named_tensors() {
            h.update(io::encode_blob(t));
        }
        hex::encode(h.finalize())
    }

    fn check_backbone(&self, backbone: &Backbone) -> Result<()> {
        if backbone.id != self.backbone {
            return Err(Error::invalid(format!(
                "model {} was trained on backbone {}, not {}",
                self.id, self.backbone, backbone.id
            )));
        }
        if backbone.feature_dim() != self.feature_dim() {
            return Err(Error::dim("record feature width", backbone.feature_dim(), self.feature_dim()));
        }
        Ok(())
    }

    /// Pre-classifier features of `images`.
    pub fn features(&self, backbone: &Backbone, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_backbone(backbone)?;
        extract(backbone, &self.eft, &self.adapters, images)
    }

    /// Packages a trained source-free model as a pool record.
    pub fn from_model(model: &MixedModel<f32>, task: &TaskSpec, val_acc: f64) -> Result<Self> {
        if !model.sources().is_empty() {
            return Err(Error::invalid("only models without sources can be pooled"));
        }
        let record = Self {
            id: 0,
            backbone: model.backbone().id.clone(),
            eft: *model.eft(),
            adapters: model.theta_new().to_vec(),
            head: model.head().clone(),
            meta: TaskMeta {
                task_id: task.id().to_string(),
                family: task.family().to_string(),
                classes: task.manifest.classes.clone(),
                train_size: task.splits().train.len(),
                val_acc,
            },
        };
        record.validate()?;
        Ok(record)
    }
}

/// Feature rows paired with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub source: Option<u32>,
}

impl FeatureDataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, source: Option<u32>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim("feature rank", 2, features.rank()));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::dim("feature rows", labels.len(), features.shape()[0]));
        }
        Ok(Self { features, labels, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Subset of rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: self.source,
        })
    }
}

/// Features of the given samples of `task` under a pooled model. Rows follow
/// `split` order.
pub fn extract_features(
    record: &SourceModelRecord,
    backbone: &Backbone,
    task: &TaskSpec,
    split: &[usize],
) -> Result<FeatureDataset> {
    if split.is_empty() {
        return Err(Error::invalid("cannot extract features of an empty split"));
    }
    let images = task.images.gather_rows(split)?;
    let features = record.features(backbone, &images)?;
    if features.shape()[1] != record.feature_dim() {
        return Err(Error::dim("extracted width", record.feature_dim(), features.shape()[1]));
    }
    FeatureDataset::new(features, task.split_labels(split), Some(record.id))
}

/// Fresh adapters and head trained on the task alone.
pub fn train_independent(
    task: &TaskSpec,
    backbone: &Backbone,
    eft: EftConfig,
    cfg: &TrainConfig,
) -> Result<(MixedModel<f32>, History)> {
    let mut model = MixedModel::standalone(backbone.clone(), eft, task.num_classes(), cfg.theta_init, cfg.seed)?;
    let history = model.train(task, cfg)?;
    Ok((model, history))
}

/// Trains a source model; the record carries its validation accuracy. The
/// pool assigns the final id.
pub fn train_source(
    task: &TaskSpec,
    backbone: &Backbone,
    eft: EftConfig,
    cfg: &TrainConfig,
) -> Result<(SourceModelRecord, History)> {
    if task.splits().val.is_empty() {
        return Err(Error::invalid(format!("task {} has no validation split", task.id())));
    }
    let (model, history) = train_independent(task, backbone, eft, cfg)?;
    let val_acc = model.accuracy(task, &task.splits().val)?;
    Ok((SourceModelRecord::from_model(&model, task, val_acc)?, history))
}

/// Continues training a source's adapters on the target task with a fresh
/// zero-initialized head sized to the target classes.
pub fn finetune_source(
    record: &SourceModelRecord,
    backbone: &Backbone,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<(MixedModel<f32>, History)> {
    record.check_backbone(backbone)?;
    let mut model = MixedModel::from_adapters(backbone.clone(), record.eft, record.adapters.clone(), task.num_classes())?;
    let history = model.train(task, cfg)?;
    Ok((model, history))
}
