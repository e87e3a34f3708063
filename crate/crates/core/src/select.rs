//! Ranking pooled models by k-NN validation accuracy in their feature spaces.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Backbone;
use crate::source::{extract_features, FeatureDataset, SourceModelRecord};
use crate::task::TaskSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub m: usize,
    #[serde(default)]
    pub distance: Metric,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            m: 1,
            distance: Metric::Euclidean,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::invalid("k and m must be at least 1"));
        }
        if self.m > pool_size {
            return Err(Error::invalid(format!("cannot select {} of {pool_size} models", self.m)));
        }
        Ok(())
    }
}

fn squared(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum()
}

pub fn euclidean_dist(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("vector length", u.len(), v.len()));
    }
    Ok(squared(u, v).sqrt())
}

/// Majority label among the `k` nearest training rows. Neighbours are
/// ordered by distance, then by row index; a tied vote goes to the smallest
/// label.
pub fn knn_predict(train: &FeatureDataset, query: &[f32], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > train.len() {
        return Err(Error::invalid(format!("k={k} exceeds {} training rows", train.len())));
    }
    if query.len() != train.dim() {
        return Err(Error::dim("query width", train.dim(), query.len()));
    }
    let mut dist: Vec<(f64, usize)> = (0..train.len())
        .map(|i| (squared(train.features.row(i), query), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, by_key);
    }
    let n_labels = dist[..k].iter().map(|&(_, i)| train.labels[i]).max().unwrap_or(0) + 1;
    let mut votes = vec![0usize; n_labels];
    for &(_, i) in &dist[..k] {
        votes[train.labels[i]] += 1;
    }
    let mut best = 0;
    for (label, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = label;
        }
    }
    Ok(best)
}

/// Fraction of `val` rows whose k-NN prediction over `train` is correct.
pub fn knn_accuracy_on(train: &FeatureDataset, val: &FeatureDataset, k: usize) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("k-NN scoring needs non-empty train and validation sets"));
    }
    let mut hits = 0;
    for i in 0..val.len() {
        if knn_predict(train, val.features.row(i), k)? == val.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / val.len() as f64)
}

/// k-NN validation accuracy of the target task in `record`'s feature space.
pub fn knn_accuracy(record: &SourceModelRecord, backbone: &Backbone, task: &TaskSpec, k: usize) -> Result<f64> {
    let sp = task.splits();
    if sp.train.is_empty() || sp.val.is_empty() {
        return Err(Error::invalid(format!("task {} needs train and validation samples", task.id())));
    }
    let train = extract_features(record, backbone, task, &sp.train)?;
    let val = extract_features(record, backbone, task, &sp.val)?;
    knn_accuracy_on(&train, &val, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: u32,
    pub knn_acc: f64,
}

/// Models that shared an accuracy, listed in the order they were ranked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieRecord {
    pub knn_acc: f64,
    pub model_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub k: usize,
    /// Scores in ranked order.
    pub scores: Vec<ModelScore>,
    pub ranked: Vec<u32>,
    pub selected: Vec<u32>,
    pub ties: Vec<TieRecord>,
}

/// Sorts by accuracy (descending), breaking ties by smaller id.
pub fn rank_scores(mut scores: Vec<ModelScore>, k: usize, m: usize) -> Result<SelectionReport> {
    if m == 0 || m > scores.len() {
        return Err(Error::invalid(format!("cannot select {m} of {} models", scores.len())));
    }
    scores.sort_by(|a, b| {
        b.knn_acc
            .partial_cmp(&a.knn_acc)
            .unwrap_or(Ordering::Equal)
            .then(a.model_id.cmp(&b.model_id))
    });
    let ranked: Vec<u32> = scores.iter().map(|s| s.model_id).collect();
    let mut ties = Vec::new();
    let mut i = 0;
    while i < scores.len() {
        let mut j = i + 1;
        while j < scores.len() && scores[j].knn_acc == scores[i].knn_acc {
            j += 1;
        }
        if j - i > 1 {
            ties.push(TieRecord {
                knn_acc: scores[i].knn_acc,
                model_ids: ranked[i..j].to_vec(),
            });
        }
        i = j;
    }
    Ok(SelectionReport {
        k,
        selected: ranked[..m].to_vec(),
        ranked,
        scores,
        ties,
    })
}

/// Scores every candidate on the target's validation split and keeps the
/// best `m`. `backbone_of` resolves a record's backbone.
pub fn select_top_m<'a>(
    pool: &[&'a SourceModelRecord],
    backbone_of: impl Fn(&SourceModelRecord) -> Result<&'a Backbone>,
    target: &TaskSpec,
    cfg: &SelectionConfig,
) -> Result<SelectionReport> {
    if pool.is_empty() {
        return Err(Error::invalid("model pool is empty"));
    }
    cfg.validate(pool.len())?;
    let scores = pool
        .iter()
        .map(|r| {
            Ok(ModelScore {
                model_id: r.id,
                knn_acc: knn_accuracy(r, backbone_of(r)?, target, cfg.k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank_scores(scores, cfg.k, cfg.m)
}
