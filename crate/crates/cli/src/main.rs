//! `recycle`: build source pools, select and mix models, run experiments.
//!
//! Exit codes: 0 on success, 2 for invalid input, 3 when a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use recycle_core::config::{GridLattice, TrainConfig};
use recycle_core::eft::EftConfig;
use recycle_core::experiment::{
    grid_search, lambda_digest, run_black, run_experiment, run_white, select, ExperimentConfig, Protocol,
};
use recycle_core::mixer::History;
use recycle_core::net::{Backbone, BackboneConfig};
use recycle_core::pool::Pool;
use recycle_core::report::{load_runs, write_report};
use recycle_core::select::SelectionReport;
use recycle_core::source::train_source;
use recycle_core::task::{gen_family_suite, gen_overlap_suite_with, SuiteDims, TaskSpec};

const SUITE_INDEX: &str = "suite.json";

/// Bad input rather than a failed run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "recycle", version, about = "Recycle pooled source models for new tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task suite.
    GenTasks(GenTasks),
    /// Train one source model per task into a new pool.
    BuildPool(BuildPool),
    /// Rank pool models for a target task by k-NN accuracy.
    Select(SelectArgs),
    /// Train a mixture of selected pool models on a target task.
    Mix(MixArgs),
    /// Grid search over learning rate, weight decay and initial weights.
    Grid(GridArgs),
    /// Pool, adapt and append over a whole suite.
    Run(RunArgs),
    /// Summarize run files as CSV and JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output.
    #[arg(long)]
    force: bool,
}

impl OutArgs {
    fn check(&self) -> anyhow::Result<()> {
        check_out(&self.out, self.force)
    }
}

fn check_out(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Family,
    Overlap,
}

#[derive(Args)]
struct GenTasks {
    #[arg(long, value_enum, default_value = "family")]
    suite: SuiteKind,
    #[arg(long, default_value_t = 3)]
    families: u32,
    #[arg(long, default_value_t = 4)]
    tasks_per_family: usize,
    /// Task count of the overlap suite.
    #[arg(long, default_value_t = 40)]
    tasks: usize,
    #[arg(long, default_value_t = 5)]
    classes_per_task: usize,
    #[arg(long, default_value_t = 60)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 8)]
    classes_per_family: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for one manifest per task.
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PoolArg {
    /// Pool directory (RECYCLE_POOL takes precedence).
    #[arg(long)]
    pool: Option<PathBuf>,
}

impl PoolArg {
    fn resolve(&self) -> anyhow::Result<PathBuf> {
        if let Some(p) = std::env::var_os("RECYCLE_POOL").filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(p));
        }
        self.pool.clone().ok_or_else(|| usage("no pool given; use --pool or RECYCLE_POOL"))
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_new: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sigma: self.sigma,
            lambda_new: self.lambda_new,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct BuildPool {
    /// Task directory written by gen-tasks, or individual task files.
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[command(flatten)]
    pool: PoolArg,
    #[arg(long, default_value_t = 1)]
    backbone_seed: u64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    task: PathBuf,
    /// Train on a stratified subset of this many samples.
    #[arg(long)]
    e: Option<usize>,
    /// Seed of the subset draw.
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
}

impl TargetArgs {
    fn load(&self) -> anyhow::Result<TaskSpec> {
        let task = load_task(&self.task)?;
        Ok(match self.e {
            Some(e) => task.subset(e, self.subset_seed)?,
            None => task,
        })
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    pool: PoolArg,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long, conflicts_with = "black")]
    white: bool,
    #[arg(long)]
    black: bool,
    #[command(flatten)]
    pool: PoolArg,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[command(flatten)]
    train: TrainArgs,
    /// Feature width of the black-box target network.
    #[arg(long, default_value_t = 16)]
    target_width: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    pool: PoolArg,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    weight_decays: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_news: Option<Vec<f64>>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    White,
    Black,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "white")]
    protocol: ProtocolArg,
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    ms: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    es: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 4)]
    initial_pool: usize,
    #[arg(long)]
    max_targets: Option<usize>,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 40)]
    source_epochs: usize,
    #[arg(long, default_value_t = 60)]
    target_epochs: usize,
    /// Persist the pool here instead of keeping it in memory.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Output prefix; writes `<prefix>.csv` and `<prefix>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_task(path: &Path) -> anyhow::Result<TaskSpec> {
    if !path.is_file() {
        return Err(usage(format!("task file {} not found", path.display())));
    }
    Ok(TaskSpec::load(path)?)
}

/// Expands directories through their suite index.
fn load_tasks(paths: &[PathBuf]) -> anyhow::Result<Vec<TaskSpec>> {
    let mut tasks = Vec::new();
    for p in paths {
        if p.is_dir() {
            let index = p.join(SUITE_INDEX);
            let text = fs::read_to_string(&index).map_err(|_| usage(format!("{} has no {SUITE_INDEX}", p.display())))?;
            let files: Vec<String> = serde_json::from_str(&text)?;
            for f in files {
                tasks.push(load_task(&p.join(f))?);
            }
        } else {
            tasks.push(load_task(p)?);
        }
    }
    if tasks.is_empty() {
        return Err(usage("no tasks given"));
    }
    Ok(tasks)
}

fn open_pool(arg: &PoolArg) -> anyhow::Result<Pool> {
    let dir = arg.resolve()?;
    if !dir.join(recycle_core::pool::MANIFEST).is_file() {
        return Err(usage(format!("{} is not a pool directory", dir.display())));
    }
    Ok(Pool::open(&dir)?)
}

fn gen_tasks(a: GenTasks) -> anyhow::Result<()> {
    a.out.check()?;
    let tasks = match a.suite {
        SuiteKind::Family => {
            let dims = SuiteDims {
                classes_per_task: a.classes_per_task,
                samples_per_class: a.samples_per_class,
                classes_per_family: a.classes_per_family,
            };
            gen_family_suite(a.families, a.tasks_per_family, &dims, a.seed)?
        }
        SuiteKind::Overlap => gen_overlap_suite_with(a.tasks, a.classes_per_task, a.samples_per_class, a.seed)?,
    };
    fs::create_dir_all(&a.out.out)?;
    let mut files = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let name = format!("{}.json", t.id());
        t.save(&a.out.out.join(&name))?;
        files.push(name);
    }
    write_json(&a.out.out.join(SUITE_INDEX), &files)?;
    println!("wrote {} tasks to {}", tasks.len(), a.out.out.display());
    Ok(())
}

fn build_pool(a: BuildPool) -> anyhow::Result<()> {
    let dir = a.pool.resolve()?;
    if dir.join(recycle_core::pool::MANIFEST).exists() {
        return Err(usage(format!("{} already holds a pool", dir.display())));
    }
    let tasks = load_tasks(&a.tasks)?;
    let mut pool = Pool::create(&dir)?;
    let backbone = Backbone::init("desk", BackboneConfig::desk(), a.backbone_seed)?;
    pool.add_backbone(backbone.clone())?;
    let cfg = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    for t in &tasks {
        let (record, _) = train_source(t, &backbone, EftConfig::DESK, &cfg)?;
        let val = record.meta.val_acc;
        let id = pool.add_model(record)?;
        println!("model {id}: task {} val_acc {val:.4}", t.id());
    }
    Ok(())
}

fn select_cmd(a: SelectArgs) -> anyhow::Result<()> {
    a.out.check()?;
    let pool = open_pool(&a.pool)?;
    let task = a.target.load()?;
    let report = select(&pool, &task, a.k, a.m)?;
    write_json(&a.out.out, &report)?;
    println!("selected {:?}", report.selected);
    Ok(())
}

#[derive(Serialize)]
struct MixRun<'a> {
    task: &'a str,
    protocol: Protocol,
    config: &'a TrainConfig,
    selection: &'a SelectionReport,
    history: &'a History,
    lambda_digest: String,
    val_acc: f64,
    test_acc: f64,
}

fn mix_cmd(a: MixArgs) -> anyhow::Result<()> {
    if !a.white && !a.black {
        return Err(usage("choose --white or --black"));
    }
    a.out.check()?;
    let pool = open_pool(&a.pool)?;
    let task = a.target.load()?;
    let cfg = a.train.config();
    let selection = select(&pool, &task, a.k, a.m)?;
    let (protocol, eval) = if a.white {
        (Protocol::White, run_white(&pool, &selection.selected, &task, &cfg)?.1)
    } else {
        let target = Backbone::init("desk-target", BackboneConfig::desk_with_width(a.target_width), a.train.seed)?;
        (
            Protocol::Black,
            run_black(&pool, &selection.selected, &target, EftConfig::DESK, &task, &cfg)?.1,
        )
    };
    write_json(
        &a.out.out,
        &MixRun {
            task: task.id(),
            protocol,
            config: &cfg,
            selection: &selection,
            history: &eval.history,
            lambda_digest: lambda_digest(&eval.history),
            val_acc: eval.val_acc,
            test_acc: eval.test_acc,
        },
    )?;
    println!("val_acc {:.4} test_acc {:.4}", eval.val_acc, eval.test_acc);
    Ok(())
}

fn grid_cmd(a: GridArgs) -> anyhow::Result<()> {
    a.out.check()?;
    let pool = open_pool(&a.pool)?;
    let task = a.target.load()?;
    let std = GridLattice::standard();
    let lattice = GridLattice {
        lrs: a.lrs.unwrap_or(std.lrs),
        weight_decays: a.weight_decays.unwrap_or(std.weight_decays),
        lambda_news: a.lambda_news.unwrap_or(std.lambda_news),
    };
    if lattice.is_empty() {
        return Err(usage("grid lattice is empty"));
    }
    let result = grid_search(&task, &pool, &lattice, a.m, &a.train.config(), a.k)?;
    write_json(&a.out.out, &result)?;
    println!(
        "best cell {}: lr {} weight decay {} lambda_new {}",
        result.best_index, result.best.lr, result.best.weight_decay, result.best.lambda_new
    );
    Ok(())
}

fn run_cmd(a: RunArgs) -> anyhow::Result<()> {
    a.out.check()?;
    let tasks = load_tasks(&a.tasks)?;
    let mut cfg = ExperimentConfig {
        protocol: match a.protocol {
            ProtocolArg::White => Protocol::White,
            ProtocolArg::Black => Protocol::Black,
        },
        ms: a.ms,
        es: a.es,
        seeds: a.seeds,
        initial_pool: a.initial_pool,
        max_targets: a.max_targets,
        shuffle_seed: a.shuffle_seed,
        k: a.k,
        ..ExperimentConfig::default()
    };
    cfg.source_train.epochs = a.source_epochs;
    cfg.target_train.epochs = a.target_epochs;
    let pool_dir = std::env::var_os("RECYCLE_POOL")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or(a.pool);
    let mut pool = match &pool_dir {
        Some(dir) => Pool::create(dir)?,
        None => Pool::in_memory(),
    };
    let run = run_experiment(&tasks, &cfg, &mut pool)?;
    write_json(&a.out.out, &run)?;
    let failed = run.rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} rows ({failed} failed), pool of {}", run.rows.len(), pool.len());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let csv = a.out.with_extension("csv");
    let json = a.out.with_extension("json");
    check_out(&csv, a.force)?;
    check_out(&json, a.force)?;
    let (rows, warnings) = load_runs(&a.runs);
    for w in &warnings {
        eprintln!("warning: skipped {w}");
    }
    let summary = write_report(&rows, &csv, &json)?;
    println!("{} rows in {} cells", summary.rows, summary.cells.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<recycle_core::Error>() {
            return if e.is_validation() { 2 } else { 3 };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::BuildPool(a) => build_pool(a),
        Command::Select(a) => select_cmd(a),
        Command::Mix(a) => mix_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_of_errors() {
        assert_eq!(exit_code(&usage("x")), 2);
        assert_eq!(exit_code(&recycle_core::Error::Invalid("x".into()).into()), 2);
        assert_eq!(exit_code(&recycle_core::Error::Diverged { epoch: 1 }.into()), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("disk on fire")), 3);
    }

    #[test]
    fn overwrite_needs_force() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(check_out(f.path(), false).is_err());
        assert!(check_out(f.path(), true).is_ok());
    }
}
