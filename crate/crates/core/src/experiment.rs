//! Experiment harness: grid search over training hyperparameters and the
//! pool-then-adapt-then-append loop over a task suite.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blackbox::{build_blackbox_model, FeatureApi, PoolApi};
use crate::config::{GridLattice, TrainConfig};
use crate::eft::EftConfig;
use crate::error::{Error, Result};
use crate::mixer::{History, MixedModel};
use crate::net::{Backbone, BackboneConfig};
use crate::pool::Pool;
use crate::select::{select_top_m, SelectionConfig, SelectionReport};
use crate::source::{train_independent, train_source, SourceModelRecord};
use crate::task::{rng_for, TaskSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    White,
    Black,
}

/// Outcome of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub val_acc: f64,
    pub test_acc: f64,
    pub history: History,
}

/// Short digest of the realized mixing-weight trajectory.
pub fn lambda_digest(history: &History) -> String {
    let mut h = Sha256::new();
    for e in &history.epochs {
        for row in &e.lambda {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn evaluate(model: &MixedModel<f32>, task: &TaskSpec, history: History) -> Result<Evaluation> {
    let sp = task.splits();
    Ok(Evaluation {
        val_acc: model.accuracy(task, &sp.val)?,
        test_acc: model.accuracy(task, &sp.test)?,
        history,
    })
}

/// Selects `m` sources from `pool` by k-NN accuracy on the target.
pub fn select(pool: &Pool, task: &TaskSpec, k: usize, m: usize) -> Result<SelectionReport> {
    let records: Vec<&SourceModelRecord> = pool.records().iter().collect();
    let cfg = SelectionConfig {
        k,
        m,
        ..SelectionConfig::default()
    };
    select_top_m(&records, |r| pool.backbone_for(r), task, &cfg)
}

/// Trains a white-box mixture of the given pool models on `task`.
pub fn run_white(pool: &Pool, ids: &[u32], task: &TaskSpec, cfg: &TrainConfig) -> Result<(MixedModel<f32>, Evaluation)> {
    let records = ids.iter().map(|&id| pool.record(id)).collect::<Result<Vec<_>>>()?;
    let first = records.first().ok_or_else(|| Error::invalid("white-box mixing needs a source"))?;
    let backbone = pool.backbone_for(first)?;
    let mut sources = Vec::with_capacity(records.len());
    for r in &records {
        if r.backbone != backbone.id || r.eft != first.eft {
            return Err(Error::invalid("white-box sources must share a backbone and adapter layout"));
        }
        sources.push((r.id, r.adapters.as_slice()));
    }
    let mut model = MixedModel::white_box(backbone.clone(), first.eft, &sources, task, cfg)?;
    let history = model.train(task, cfg)?;
    let eval = evaluate(&model, task, history)?;
    Ok((model, eval))
}

/// Trains a black-box feature mixture; the pool models are reached only
/// through their feature endpoints.
pub fn run_black(
    pool: &Pool,
    ids: &[u32],
    target: &Backbone,
    eft: EftConfig,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<(MixedModel<f32>, Evaluation)> {
    let records = ids.iter().map(|&id| pool.record(id)).collect::<Result<Vec<_>>>()?;
    let apis = records
        .iter()
        .map(|r| Ok(PoolApi::new(r, pool.backbone_for(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let handles: Vec<&dyn FeatureApi> = apis.iter().map(|a| a as &dyn FeatureApi).collect();
    let mut built = build_blackbox_model(&handles, target.clone(), eft, task, cfg)?;
    let history = built.model.train(task, cfg)?;
    let eval = evaluate(&built.model, task, history)?;
    Ok((built.model, eval))
}

/// Trains fresh adapters on the task alone.
pub fn run_independent(backbone: &Backbone, eft: EftConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<(MixedModel<f32>, Evaluation)> {
    let (model, history) = train_independent(task, backbone, eft, cfg)?;
    let eval = evaluate(&model, task, history)?;
    Ok((model, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: TrainConfig,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub cells: Vec<CellResult>,
}

/// Scores every configuration; the best validation accuracy wins and ties
/// go to the earlier cell. Failed cells are recorded and skipped.
pub fn grid_search_with(
    cells: Vec<TrainConfig>,
    mut score: impl FnMut(&TrainConfig) -> Result<(f64, f64)>,
) -> Result<GridResult> {
    if cells.is_empty() {
        return Err(Error::invalid("grid lattice is empty"));
    }
    let mut results = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, config) in cells.into_iter().enumerate() {
        match score(&config) {
            Ok((val, test)) => {
                if best.is_none_or(|(_, b)| val > b) {
                    best = Some((i, val));
                }
                results.push(CellResult {
                    config,
                    val_acc: Some(val),
                    test_acc: Some(test),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("grid cell {i} failed: {e}");
                results.push(CellResult {
                    config,
                    val_acc: None,
                    test_acc: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (best_index, _) = best.ok_or_else(|| Error::invalid("every grid cell failed"))?;
    Ok(GridResult {
        best: results[best_index].config.clone(),
        best_index,
        cells: results,
    })
}

/// Grid search for a white-box mixture of the top-`m` pool models.
pub fn grid_search(
    task: &TaskSpec,
    pool: &Pool,
    lattice: &GridLattice,
    m: usize,
    base: &TrainConfig,
    k: usize,
) -> Result<GridResult> {
    let report = select(pool, task, k, m)?;
    grid_search_with(lattice.cells(base), |cfg| {
        let (_, eval) = run_white(pool, &report.selected, task, cfg)?;
        Ok((eval.val_acc, eval.test_acc))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub ms: Vec<usize>,
    pub es: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Tasks used to seed the pool before adaptation starts.
    pub initial_pool: usize,
    /// Adapted targets after the initial pool (all remaining when `None`).
    pub max_targets: Option<usize>,
    pub shuffle_seed: u64,
    pub k: usize,
    pub eft: EftConfig,
    pub backbone: BackboneConfig,
    pub backbone_seed: u64,
    /// Target network in the black-box protocol.
    pub target_backbone: BackboneConfig,
    pub source_train: TrainConfig,
    pub target_train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::White,
            ms: vec![0, 1],
            es: vec![20, 40],
            seeds: vec![0],
            initial_pool: 4,
            max_targets: None,
            shuffle_seed: 0,
            k: 5,
            eft: EftConfig::DESK,
            backbone: BackboneConfig::desk(),
            backbone_seed: 1,
            target_backbone: BackboneConfig::desk_with_width(16),
            source_train: TrainConfig {
                lr: 1e-2,
                epochs: 40,
                batch_size: 32,
                ..TrainConfig::default()
            },
            target_train: TrainConfig {
                lr: 1e-2,
                epochs: 60,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ms.is_empty() || self.es.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("m, e and seed lists must be non-empty"));
        }
        if self.initial_pool == 0 {
            return Err(Error::invalid("the initial pool needs at least one task"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        self.eft.validate()?;
        self.source_train.validate()?;
        self.target_train.validate()
    }
}

/// One adapted (task, method, m, e, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub task: String,
    pub family: String,
    pub method: String,
    pub m: usize,
    pub e: usize,
    pub seed: u64,
    pub selected: Vec<u32>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub lambda_digest: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub config: ExperimentConfig,
    pub pool_models: Vec<u32>,
    pub rows: Vec<RunRow>,
}

fn method_name(protocol: Protocol, m: usize) -> &'static str {
    match (m, protocol) {
        (0, _) => "independent",
        (_, Protocol::White) => "mix_white",
        (_, Protocol::Black) => "mix_black",
    }
}

fn adapt_one(
    pool: &Pool,
    task: &TaskSpec,
    cfg: &ExperimentConfig,
    backbone: &Backbone,
    target_backbone: &Backbone,
    m: usize,
    train: &TrainConfig,
) -> Result<(Vec<u32>, Evaluation)> {
    if m == 0 {
        let bb = match cfg.protocol {
            Protocol::White => backbone,
            Protocol::Black => target_backbone,
        };
        return Ok((Vec::new(), run_independent(bb, cfg.eft, task, train)?.1));
    }
    let report = select(pool, task, cfg.k, m)?;
    let eval = match cfg.protocol {
        Protocol::White => run_white(pool, &report.selected, task, train)?.1,
        Protocol::Black => run_black(pool, &report.selected, target_backbone, cfg.eft, task, train)?.1,
    };
    Ok((report.selected, eval))
}

/// Seeds the pool with the first tasks of a seeded shuffle, then for every
/// later task: adapts on each `(m, e, seed)` cell, and finally trains a model
/// on the task's full data and appends it to the pool. Existing pool members
/// are never retrained. Cell failures are recorded and the run continues.
pub fn run_experiment(suite: &[TaskSpec], cfg: &ExperimentConfig, pool: &mut Pool) -> Result<RunFile> {
    cfg.validate()?;
    if suite.len() <= cfg.initial_pool {
        return Err(Error::invalid(format!(
            "{} tasks leave nothing to adapt after an initial pool of {}",
            suite.len(),
            cfg.initial_pool
        )));
    }
    let backbone = Backbone::init("desk", cfg.backbone.clone(), cfg.backbone_seed)?;
    let target_backbone = Backbone::init("desk-target", cfg.target_backbone.clone(), cfg.backbone_seed)?;
    pool.add_backbone(backbone.clone())?;
    let mut order: Vec<usize> = (0..suite.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(&[cfg.shuffle_seed, 29]));
    }
    let mut pool_models = Vec::new();
    for &i in &order[..cfg.initial_pool] {
        let (record, _) = train_source(&suite[i], &backbone, cfg.eft, &cfg.source_train)?;
        pool_models.push(pool.add_model(record)?);
    }
    let limit = cfg.max_targets.unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    for &i in order[cfg.initial_pool..].iter().take(limit) {
        let full = &suite[i];
        for &seed in &cfg.seeds {
            for &e in &cfg.es {
                let subset = full.subset(e, seed);
                for &m in &cfg.ms {
                    let train = TrainConfig {
                        seed,
                        ..cfg.target_train.clone()
                    };
                    let outcome = subset.as_ref().map_err(|e| Error::invalid(e.to_string())).and_then(|task| {
                        if m > pool.len() {
                            return Err(Error::invalid(format!("m={m} exceeds a pool of {}", pool.len())));
                        }
                        adapt_one(pool, task, cfg, &backbone, &target_backbone, m, &train)
                    });
                    let mut row = RunRow {
                        task: full.id().to_string(),
                        family: full.family().to_string(),
                        method: method_name(cfg.protocol, m).to_string(),
                        m,
                        e,
                        seed,
                        selected: Vec::new(),
                        val_acc: None,
                        test_acc: None,
                        lambda_digest: String::new(),
                        error: None,
                    };
                    match outcome {
                        Ok((selected, eval)) => {
                            row.selected = selected;
                            row.val_acc = Some(eval.val_acc);
                            row.test_acc = Some(eval.test_acc);
                            row.lambda_digest = lambda_digest(&eval.history);
                        }
                        Err(err) => {
                            log::warn!("{} m={m} e={e} seed={seed}: {err}", full.id());
                            row.error = Some(err.to_string());
                        }
                    }
                    rows.push(row);
                }
            }
        }
        match train_source(full, &backbone, cfg.eft, &cfg.source_train).and_then(|(r, _)| pool.add_model(r)) {
            Ok(id) => pool_models.push(id),
            Err(err) => log::warn!("could not pool {}: {err}", full.id()),
        }
    }
    Ok(RunFile {
        config: cfg.clone(),
        pool_models,
        rows,
    })
}
