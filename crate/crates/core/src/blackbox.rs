//! Black-box sources: only a feature function is available. Source features
//! are reduced to the target width with FastICA and mixed at the feature
//! level.

use crate::config::TrainConfig;
use crate::eft::EftConfig;
use crate::error::{Error, Result};
use crate::ica::{fastica_fit, fastica_transform, IcaConfig, IcaTransformer};
use crate::mixer::{Mixing, MixingSpec, MixedModel, SourceBranch};
use crate::net::Backbone;
use crate::source::SourceModelRecord;
use crate::task::{mix_seed, TaskSpec};
use crate::tensor::Tensor;

/// A feature endpoint. Implementations expose outputs only, never weights.
pub trait FeatureApi {
    fn id(&self) -> u32;
    fn dim(&self) -> usize;
    fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A pooled model served as a feature endpoint.
pub struct PoolApi<'a> {
    record: &'a SourceModelRecord,
    backbone: &'a Backbone,
}

impl<'a> PoolApi<'a> {
    pub fn new(record: &'a SourceModelRecord, backbone: &'a Backbone) -> Self {
        Self { record, backbone }
    }
}

impl FeatureApi for PoolApi<'_> {
    fn id(&self) -> u32 {
        self.record.id
    }

    fn dim(&self) -> usize {
        self.record.feature_dim()
    }

    fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.record.features(self.backbone, images)
    }
}

/// A feature-mixing model and the per-source transforms fitted for it.
#[derive(Clone, Debug)]
pub struct BlackBoxModel {
    pub model: MixedModel<f32>,
    pub transformers: Vec<IcaTransformer>,
}

/// Queries every API once for all task samples, fits one transform per
/// source on the target's training rows, and builds a model that mixes only
/// features. The penalty compares the raw API features with the target's.
pub fn build_blackbox_model(
    apis: &[&dyn FeatureApi],
    target: Backbone,
    eft: EftConfig,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<BlackBoxModel> {
    let d_t = target.feature_dim();
    let train = &task.splits().train;
    let mut branches = Vec::with_capacity(apis.len());
    let mut transformers = Vec::with_capacity(apis.len());
    for api in apis {
        if api.dim() < d_t {
            return Err(Error::invalid(format!(
                "source {} outputs {} features, fewer than the target's {d_t}",
                api.id(),
                api.dim()
            )));
        }
        let raw = api.features(&task.images)?;
        if raw.rank() != 2 || raw.shape()[1] != api.dim() {
            return Err(Error::dim("API feature width", api.dim(), *raw.shape().last().unwrap_or(&0)));
        }
        let ica_cfg = IcaConfig::new(d_t, mix_seed(&[cfg.seed, 23, api.id() as u64]));
        let t = fastica_fit(&raw.gather_rows(train)?, &ica_cfg)?;
        if !t.converged {
            log::warn!("ICA for source {} stopped after {} iterations", api.id(), t.iterations);
        }
        branches.push(SourceBranch {
            id: api.id(),
            adapters: None,
            features: fastica_transform(&t, &raw)?,
            dc_features: Some(raw),
        });
        transformers.push(t);
    }
    let mixing = Mixing::Learned(MixingSpec::init(cfg.lambda_new, apis.len(), 0)?);
    let model = MixedModel::feature_mixing(target, eft, branches, mixing, task.num_classes(), cfg)?;
    Ok(BlackBoxModel { model, transformers })
}
