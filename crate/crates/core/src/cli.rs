//! Command-line front end. Each subcommand loads its inputs, calls into the
//! library and writes artifacts under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, RunTask};
use crate::data::{generate_synthetic, load_manifest, Dataset, Split, SynthSpec};
use crate::evaluation::{read_rank_csv, rank_aggregate, write_report, EvalReport};
use crate::inference::{evaluate, export_progression, timestep_sweep};
use crate::model::{DenoiserModel, Head};
use crate::schedule::ScheduleConfig;
use crate::training::{pretraining_images, Checkpoint, Objective, Trainer};
use crate::{derived_rng, Error, Result, Task};

#[derive(Debug, Parser)]
#[command(name = "noise2map", version, about = "Diffusion-trained segmentation and change detection")]
pub struct Cli {
    /// Seed for every random draw; overrides the seeds in the config file.
    #[arg(long, global = true, env = "NOISE2MAP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Artifact directory [default: output_dir from the config, else "runs"].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic building dataset under --out.
    Synth(SynthArgs),
    /// Denoising pretraining on bare images.
    Pretrain(ConfigArgs),
    /// Supervised or multi-task training.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a JSON report.
    Eval(EvalArgs),
    /// Evaluate a checkpoint at several timesteps and export progressions.
    Sweep(SweepArgs),
    /// Aggregate rank table from a model,dataset,f1,iou CSV.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = RunTask::Ss)]
    pub task: RunTask,
    /// Training samples.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Held-out samples listed in both the val and test splits.
    #[arg(long, default_value_t = 0)]
    pub n_val: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub min_buildings: usize,
    #[arg(long, default_value_t = 5)]
    pub max_buildings: usize,
    #[arg(long, default_value_t = 0.5)]
    pub change_fraction: f64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Task to train [default: task from the config].
    #[arg(long, value_enum)]
    pub task: Option<RunTask>,
    /// Initialize the trunk from this checkpoint (heads start fresh).
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// ss or cd [default: the checkpoint's only task head, else the config task].
    #[arg(long, value_enum)]
    pub task: Option<RunTask>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Inference timestep [default: T].
    #[arg(long)]
    pub timestep: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<RunTask>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Comma-separated timesteps.
    #[arg(long, value_delimiter = ',', default_value = "0,500,1000")]
    pub timesteps: Vec<usize>,
    /// Where masks, grids and the F1 curve go [default: <out>/sweep].
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    pub csv: PathBuf,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    match &args.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn open_split(cfg: &ExperimentConfig, task: Task, split: Split) -> Result<Dataset> {
    Dataset::open(cfg.data.root(task)?, task, split)
}

/// Validation data is optional: a missing or empty split trains without it.
fn open_optional(root: &Path, task: Task, split: Split) -> Result<Vec<crate::data::Sample>> {
    match load_manifest(root, task, split) {
        Ok(m) => Ok(Dataset::load(m)?.samples),
        Err(Error::EmptyDataset(_)) | Err(Error::Manifest(_)) => {
            log::warn!("no {split} split under {}; training without validation", root.display());
            Ok(Vec::new())
        }
        Err(e) => Err(e),
    }
}

fn class_weights(cfg: &ExperimentConfig, ds: &Dataset) -> crate::objectives::ClassWeights {
    cfg.loss
        .class_weights
        .clone()
        .unwrap_or_else(|| ds.manifest.class_weights.clone())
}

fn save_final(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("best.ckpt");
    ckpt.save(&path)?;
    println!("{}", path.display());
    Ok(path)
}

pub fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<PathBuf> {
    let task = a
        .task
        .single()
        .ok_or_else(|| Error::Input("synth generates ss or cd data".into()))?;
    let spec = SynthSpec {
        seed: cli.seed,
        task,
        size: a.size,
        n_buildings: (a.min_buildings, a.max_buildings),
        change_fraction: a.change_fraction,
        n_samples: a.n,
        n_val: a.n_val,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
    let m = generate_synthetic(&spec, &out)?;
    log::info!("wrote {} {} samples to {}", m.entries.len() + a.n_val, task, out.display());
    println!("{}", out.display());
    Ok(out)
}

pub fn cmd_pretrain(cli: &Cli, a: &ConfigArgs) -> Result<PathBuf> {
    let cfg = load_config(a)?;
    let (root, task) = match (&cfg.data.pretrain_root, &cfg.data.ss_root, &cfg.data.cd_root) {
        (Some(p), _, _) => (p.clone(), Task::Ss),
        (None, Some(p), _) => (p.clone(), Task::Ss),
        (None, None, Some(p)) => (p.clone(), Task::Cd),
        _ => return Err(Error::Config("set data.pretrain_root, data.ss_root or data.cd_root".into())),
    };
    let train = Dataset::open(&root, task, cfg.data.train_split)?;
    let val = open_optional(&root, task, cfg.data.val_split)?;
    let mut tcfg = cfg.pretrain.clone();
    tcfg.seed = cli.seed;
    let model = DenoiserModel::build(&cfg.model, &[Head::Denoise], &mut derived_rng(cli.seed, &[0]))?;
    let objective = Objective::Denoise {
        train: pretraining_images(&train.samples),
        val: pretraining_images(&val),
    };
    let dir = out_dir(cli, &cfg).join("pretrain");
    let mut trainer = Trainer::new(model, objective, &cfg.schedule, tcfg)?.with_output(&dir)?;
    save_final(&trainer.fit()?, &dir)
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<PathBuf> {
    let cfg = load_config(&a.config)?;
    let run = a.task.unwrap_or(cfg.task);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cli.seed;
    let (objective, heads) = match run.single() {
        Some(task) => {
            let train = open_split(&cfg, task, cfg.data.train_split)?;
            let val = open_optional(cfg.data.root(task)?, task, cfg.data.val_split)?;
            let weights = class_weights(&cfg, &train);
            (
                Objective::Supervised {
                    task,
                    train: train.samples,
                    val,
                    weights,
                },
                vec![Head::from(task)],
            )
        }
        None => {
            let cd = open_split(&cfg, Task::Cd, cfg.data.train_split)?;
            let ss = open_split(&cfg, Task::Ss, cfg.data.train_split)?;
            (
                Objective::MultiTask {
                    cd_weights: class_weights(&cfg, &cd),
                    ss_weights: class_weights(&cfg, &ss),
                    cd_val: open_optional(cfg.data.root(Task::Cd)?, Task::Cd, cfg.data.val_split)?,
                    ss_val: open_optional(cfg.data.root(Task::Ss)?, Task::Ss, cfg.data.val_split)?,
                    cd_train: cd.samples,
                    ss_train: ss.samples,
                    lambda: cfg.loss.multitask()?,
                },
                vec![Head::Cd, Head::Ss],
            )
        }
    };
    let mut model = DenoiserModel::build(&cfg.model, &heads, &mut derived_rng(cli.seed, &[0]))?;
    if let Some(path) = &a.from_checkpoint {
        let n = model.transfer_trunk(&Checkpoint::load(path)?.model)?;
        if n == 0 {
            return Err(Error::Checkpoint(format!("{} shares no trunk parameters with this model", path.display())));
        }
        log::info!("transferred {n} trunk arrays from {}", path.display());
    }
    let dir = out_dir(cli, &cfg).join(run.to_string());
    let mut trainer = Trainer::new(model, objective, &cfg.schedule, tcfg)?.with_output(&dir)?;
    save_final(&trainer.fit()?, &dir)
}

fn eval_task(flag: Option<RunTask>, ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<Task> {
    if let Some(t) = flag {
        return t.single().ok_or_else(|| Error::Input("evaluate ss or cd, not mt".into()));
    }
    let tasks: Vec<Task> = [Task::Ss, Task::Cd]
        .into_iter()
        .filter(|t| ckpt.heads.contains(&Head::from(*t)))
        .collect();
    match (tasks.as_slice(), cfg.task.single()) {
        ([t], _) => Ok(*t),
        (_, Some(t)) => Ok(t),
        _ => Err(Error::Input("checkpoint has several task heads; pass --task".into())),
    }
}

fn dataset_name(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string())
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<PathBuf> {
    let cfg = load_config(&a.config)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task = eval_task(a.task, &ckpt, &cfg)?;
    let model = ckpt.build_model()?;
    let schedule = ScheduleConfig::from_spec(&ckpt.schedule, task)?;
    let t = a.timestep.unwrap_or(schedule.total_steps());
    let ds = open_split(&cfg, task, a.split)?;
    let cm = evaluate(&model, &ds.samples, &schedule, t, cfg.train.batch_size)?;
    let report = EvalReport::from_confusion(
        &cm,
        task.name(),
        &dataset_name(&ds.manifest.root),
        model.count_parameters(),
        &ckpt.schedule,
        cli.seed,
        t,
    );
    let dir = out_dir(cli, &cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("eval_{task}_{}_t{t}.json", a.split));
    write_report(&report, &path)?;
    log::info!("{task} {} t={t}: F1 {:.4} IoU {:.4}", a.split, report.mean_f1, report.mean_iou);
    println!("{}", path.display());
    Ok(path)
}

pub fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<PathBuf> {
    let cfg = load_config(&a.config)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task = eval_task(a.task, &ckpt, &cfg)?;
    let model = ckpt.build_model()?;
    let schedule = ScheduleConfig::from_spec(&ckpt.schedule, task)?;
    let ds = open_split(&cfg, task, a.split)?;
    let report = timestep_sweep(&model, &ds.samples, &schedule, &a.timesteps, cli.seed, true)?;
    let dir = a.export_dir.clone().unwrap_or_else(|| out_dir(cli, &cfg).join("sweep"));
    let written = export_progression(&report, &ds.samples, model.config().out_classes, &dir)?;
    for (t, f1) in report.timesteps.iter().zip(report.f1(1.min(model.config().out_classes - 1))) {
        log::info!("t={t}: F1 {f1:.4}");
    }
    log::info!("wrote {} files to {}", written.len(), dir.display());
    println!("{}", dir.display());
    Ok(dir)
}

pub fn cmd_rank(cli: &Cli, a: &RankArgs) -> Result<PathBuf> {
    let table = read_rank_csv(&a.csv)?;
    let entries = rank_aggregate(&table);
    println!("{:>4}  {:<20} {:>8} {:>8}  ranks ({})", "#", "model", "avg", "mIoU", table.datasets.join(", "));
    for e in &entries {
        let ranks: Vec<String> = e.ranks.iter().map(|r| r.to_string()).collect();
        println!(
            "{:>4}  {:<20} {:>8.3} {:>8.2}  {}",
            e.ordinal,
            e.model,
            e.average_rank,
            e.mean_iou,
            ranks.join(" ")
        );
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = a.csv.file_stem().map_or("rank".into(), |s| s.to_string_lossy().into_owned());
    let path = dir.join(format!("{stem}_rank.json"));
    let text = serde_json::to_string_pretty(&entries).expect("ranks serialize");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Dispatches one parsed command line; returns the main artifact path.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Pretrain(a) => cmd_pretrain(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Rank(a) => cmd_rank(cli, a),
    }
}
