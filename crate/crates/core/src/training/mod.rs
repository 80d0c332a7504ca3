//! Denoising pretraining, supervised fine-tuning and multi-task training.
//!
//! All three share [`Trainer`]: epochs of shuffled micro-batches, gradient
//! accumulation over `grad_accum` micro-batches with averaged gradients, an
//! Adam/AdamW update, per-epoch validation and best-checkpoint tracking.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use optim::{learning_rate, LrSchedule, Moments, Optimizer, OptimizerKind};

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::model::{DenoiserModel, Head};
use crate::objectives::{multitask_loss, ClassWeights, MultiTaskWeights};
use crate::schedule::{mix, standard_normal_like, ScheduleConfig, ScheduleSpec};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::{derived_rng, Error, Result, Task};

// Stream tags for `derived_rng`.
const TAG_ORDER: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_CD: u64 = 3;
const TAG_SS: u64 = 4;
const TAG_VAL: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_accum: usize,
    pub optimizer: OptimizerKind,
    /// Decoupled decay, used by `adamw` only.
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Accepted for config compatibility; this backend always computes in f32.
    pub mixed_precision: bool,
    pub t_min: usize,
    /// Upper end of the training timestep range; `T` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    /// `false` trains on the deterministic `t = T` input only (no diffusion).
    pub noising: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            grad_accum: 2,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.01,
            lr_schedule: LrSchedule::Constant,
            warmup_fraction: 0.05,
            seed: 0,
            mixed_precision: false,
            t_min: 1,
            t_max: None,
            noising: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for self-supervised pretraining: AdamW with warmup and cosine decay.
    pub fn pretrain_defaults() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            lr_schedule: LrSchedule::CosineWarmup,
            ..Self::default()
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction = {} outside [0, 1]", self.warmup_fraction)));
        }
        self.timestep_range(total_steps).map(|_| ())
    }

    /// Inclusive `[t_min, t_max]` for a trajectory of length `total_steps`.
    pub fn timestep_range(&self, total_steps: usize) -> Result<(usize, usize)> {
        let hi = self.t_max.unwrap_or(total_steps);
        if self.t_min < 1 || self.t_min > hi || hi > total_steps {
            return Err(Error::Config(format!(
                "timestep range [{}, {hi}] must satisfy 1 <= t_min <= t_max <= T = {total_steps}",
                self.t_min
            )));
        }
        Ok((self.t_min, hi))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// `ss`, `cd`, `mt` (the combined multi-task loss) or `denoise`.
    pub task: String,
    pub loss: f64,
    pub lr: f64,
    pub t_mean: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.task, self.loss, self.lr, self.t_mean
        )
    }
}

impl FromStr for LogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        let bad = || Error::Input(format!("malformed log line: {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            task: f[2].to_string(),
            loss: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
            t_mean: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// Result of one micro-batch: its loss and parameter gradients.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients<f32>,
    pub timesteps: Vec<usize>,
}

/// Per-sample generators for micro-batch samples at epoch positions `start..start + n`.
pub fn sample_rngs(seed: u64, tag: u64, epoch: usize, start: usize, n: usize) -> Vec<ChaCha8Rng> {
    (start..start + n)
        .map(|p| derived_rng(seed, &[tag, epoch as u64, p as u64]))
        .collect()
}

/// Builds the noised model inputs for a batch. Each sample draws its timestep
/// from `range` and then its forward-process noise from its own generator.
/// With `noising` off every sample gets the deterministic `t = T` input.
pub fn noised_batch(
    batch: &[&Sample],
    schedule: &ScheduleConfig,
    range: (usize, usize),
    noising: bool,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    if noising && rngs.len() != batch.len() {
        return Err(Error::Input(format!("{} generators for {} samples", rngs.len(), batch.len())));
    }
    let total = schedule.total_steps();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        if !noising {
            inputs.push(schedule.clean_path(&s.input(), total)?);
            ts.push(total);
            continue;
        }
        let rng = &mut rngs[i];
        let t = rng.random_range(range.0..=range.1);
        inputs.push(schedule.forward_sample(&s.input(), t, rng)?.x_t);
        ts.push(t);
    }
    Ok((Tensor::stack(&inputs)?, ts))
}

fn check_batch(model: &DenoiserModel<f32>, batch: &[&Sample], schedule: &ScheduleConfig) -> Result<Head> {
    let task = schedule.task();
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.task != task) {
        return Err(Error::Config(format!("sample {} is {} but the schedule is for {task}", s.id, s.task)));
    }
    let head = Head::from(task);
    if !model.has_head(head) {
        return Err(Error::Config(format!("model has no {task} head")));
    }
    Ok(head)
}

fn targets(batch: &[&Sample]) -> Vec<usize> {
    batch.iter().flat_map(|s| s.mask.iter().map(|&v| v as usize)).collect()
}

fn record_task_loss(
    model: &DenoiserModel<f32>,
    tape: &mut Tape<f32>,
    batch: &[&Sample],
    schedule: &ScheduleConfig,
    weights: &ClassWeights,
    range: (usize, usize),
    noising: bool,
    rngs: &mut [ChaCha8Rng],
) -> Result<(Var, Vec<usize>)> {
    let head = check_batch(model, batch, schedule)?;
    let (x, ts) = noised_batch(batch, schedule, range, noising, rngs)?;
    let xv = tape.constant(x);
    let logits = model.forward_tape(tape, xv, &ts, head)?;
    let loss = tape.weighted_cross_entropy(logits, &targets(batch), &weights.to_float())?;
    Ok((loss, ts))
}

/// One supervised micro-batch: noised inputs, one forward pass, weighted
/// cross-entropy against the clean masks, gradients into trunk and active head.
pub fn supervised_step(
    model: &DenoiserModel<f32>,
    batch: &[&Sample],
    schedule: &ScheduleConfig,
    weights: &ClassWeights,
    range: (usize, usize),
    noising: bool,
    rngs: &mut [ChaCha8Rng],
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let (loss, timesteps) = record_task_loss(model, &mut tape, batch, schedule, weights, range, noising, rngs)?;
    let value = tape.value(loss).item() as f64;
    Ok(StepOutput {
        loss: value,
        grads: tape.backward(loss, 1.0),
        timesteps,
    })
}

/// Joint micro-batch: one change-detection and one segmentation batch, a
/// single backward pass through `lambda_cd * L_cd + lambda_ss * L_ss`.
#[derive(Debug)]
pub struct MultiStepOutput {
    pub l_cd: f64,
    pub l_ss: f64,
    /// Combined loss as evaluated on the tape.
    pub l_mt: f64,
    pub grads: Gradients<f32>,
    pub timesteps: Vec<usize>,
}

pub struct MultiTaskBatch<'a> {
    pub cd: &'a [&'a Sample],
    pub ss: &'a [&'a Sample],
    pub cd_schedule: &'a ScheduleConfig,
    pub ss_schedule: &'a ScheduleConfig,
    pub cd_weights: &'a ClassWeights,
    pub ss_weights: &'a ClassWeights,
}

pub fn multitask_step(
    model: &DenoiserModel<f32>,
    b: &MultiTaskBatch<'_>,
    lambda: &MultiTaskWeights,
    range: (usize, usize),
    noising: bool,
    cd_rngs: &mut [ChaCha8Rng],
    ss_rngs: &mut [ChaCha8Rng],
) -> Result<MultiStepOutput> {
    lambda.validate()?;
    let mut tape = Tape::new();
    let (l_cd, mut ts) = record_task_loss(model, &mut tape, b.cd, b.cd_schedule, b.cd_weights, range, noising, cd_rngs)?;
    let (l_ss, ts_ss) = record_task_loss(model, &mut tape, b.ss, b.ss_schedule, b.ss_weights, range, noising, ss_rngs)?;
    ts.extend(ts_ss);
    let l_mt = tape.lincomb(&[(l_cd, lambda.lambda_cd as f32), (l_ss, lambda.lambda_ss as f32)]);
    Ok(MultiStepOutput {
        l_cd: tape.value(l_cd).item() as f64,
        l_ss: tape.value(l_ss).item() as f64,
        l_mt: tape.value(l_mt).item() as f64,
        grads: tape.backward(l_mt, 1.0),
        timesteps: ts,
    })
}

/// Denoising micro-batch on the monotone curve: `x_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps`,
/// predict `eps`, mean squared error.
pub fn denoise_step(
    model: &DenoiserModel<f32>,
    images: &[&Tensor<f32>],
    schedule: &ScheduleConfig,
    range: (usize, usize),
    rngs: &mut [ChaCha8Rng],
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let (loss, timesteps) = record_denoise_loss(model, &mut tape, images, schedule, range, rngs)?;
    Ok(StepOutput {
        loss: tape.value(loss).item() as f64,
        grads: tape.backward(loss, 1.0),
        timesteps,
    })
}

fn record_denoise_loss(
    model: &DenoiserModel<f32>,
    tape: &mut Tape<f32>,
    images: &[&Tensor<f32>],
    schedule: &ScheduleConfig,
    range: (usize, usize),
    rngs: &mut [ChaCha8Rng],
) -> Result<(Var, Vec<usize>)> {
    if !model.has_head(Head::Denoise) {
        return Err(Error::Config("pretraining needs a model with the denoise head".into()));
    }
    if images.is_empty() || rngs.len() != images.len() {
        return Err(Error::Input("denoising batch needs one generator per image".into()));
    }
    let mut inputs = Vec::with_capacity(images.len());
    let mut noises = Vec::with_capacity(images.len());
    let mut ts = Vec::with_capacity(images.len());
    for (x, rng) in images.iter().zip(rngs.iter_mut()) {
        let t = rng.random_range(range.0..=range.1);
        let eps = standard_normal_like::<f32, _>(x.shape(), rng);
        inputs.push(mix(x, &eps, schedule.monotone_alpha_bar(t)?));
        noises.push(eps);
        ts.push(t);
    }
    let xv = tape.constant(Tensor::stack(&inputs)?);
    let pred = model.forward_tape(tape, xv, &ts, Head::Denoise)?;
    Ok((tape.mse(pred, &Tensor::stack(&noises)?)?, ts))
}

/// Weighted cross-entropy over a whole sample set at the deterministic `t = T`
/// input, pooled as one weighted mean.
pub fn validation_loss(
    model: &DenoiserModel<f32>,
    samples: &[Sample],
    schedule: &ScheduleConfig,
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("validation set is empty".into()));
    }
    let w = weights.as_slice();
    let (mut num, mut den) = (0.0, 0.0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (loss, _) = record_task_loss(model, &mut tape, &refs, schedule, weights, (1, 1), false, &mut [])?;
        let applied: f64 = targets(&refs).iter().map(|&y| w[y]).sum();
        num += tape.value(loss).item() as f64 * applied;
        den += applied;
    }
    Ok(num / den)
}

/// Supervision and data for one training run.
#[derive(Clone, Debug)]
pub enum Objective {
    Supervised {
        task: Task,
        train: Vec<Sample>,
        val: Vec<Sample>,
        weights: ClassWeights,
    },
    MultiTask {
        cd_train: Vec<Sample>,
        cd_val: Vec<Sample>,
        ss_train: Vec<Sample>,
        ss_val: Vec<Sample>,
        lambda: MultiTaskWeights,
        cd_weights: ClassWeights,
        ss_weights: ClassWeights,
    },
    /// Self-supervised noise prediction on bare images.
    Denoise { train: Vec<Tensor<f32>>, val: Vec<Tensor<f32>> },
}

impl Objective {
    fn heads(&self) -> Vec<Head> {
        match self {
            Objective::Supervised { task, .. } => vec![Head::from(*task)],
            Objective::MultiTask { .. } => vec![Head::Cd, Head::Ss],
            Objective::Denoise { .. } => vec![Head::Denoise],
        }
    }

    /// Micro-batches per epoch (the larger task set drives multi-task epochs).
    fn micro_batches(&self, batch_size: usize) -> usize {
        let n = match self {
            Objective::Supervised { train, .. } => train.len(),
            Objective::MultiTask { cd_train, ss_train, .. } => cd_train.len().max(ss_train.len()),
            Objective::Denoise { train, .. } => train.len(),
        };
        n.div_ceil(batch_size)
    }

    fn class_weights(&self) -> Vec<&ClassWeights> {
        match self {
            Objective::Supervised { weights, .. } => vec![weights],
            Objective::MultiTask {
                cd_weights, ss_weights, ..
            } => vec![cd_weights, ss_weights],
            Objective::Denoise { .. } => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |name: &str, set: &[Sample], task: Task| -> Result<()> {
            if set.is_empty() {
                return Err(Error::EmptyDataset(format!("{name} training set is empty")));
            }
            if let Some(s) = set.iter().find(|s| s.task != task) {
                return Err(Error::Config(format!("{name} set holds {} sample {}", s.task, s.id)));
            }
            Ok(())
        };
        match self {
            Objective::Supervised { task, train, .. } => check(task.name(), train, *task),
            Objective::MultiTask {
                cd_train, ss_train, lambda, ..
            } => {
                check("cd", cd_train, Task::Cd)?;
                check("ss", ss_train, Task::Ss)?;
                lambda.validate()
            }
            Objective::Denoise { train, .. } => {
                if train.is_empty() {
                    return Err(Error::EmptyDataset("pretraining corpus is empty".into()));
                }
                Ok(())
            }
        }
    }
}

/// Every image of a sample set as an independent pretraining example.
pub fn pretraining_images(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples.iter().flat_map(|s| s.images.iter().cloned()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub improved: bool,
}

/// Stateful driver shared by every objective.
pub struct Trainer {
    model: DenoiserModel<f32>,
    objective: Objective,
    schedule_spec: ScheduleSpec,
    ss_schedule: ScheduleConfig,
    cd_schedule: ScheduleConfig,
    cfg: TrainConfig,
    optimizer: Optimizer,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    best: Option<Checkpoint>,
    log: Vec<LogRecord>,
    out_dir: Option<PathBuf>,
    log_file: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(model: DenoiserModel<f32>, objective: Objective, schedule: &ScheduleSpec, cfg: TrainConfig) -> Result<Self> {
        let ss_schedule = ScheduleConfig::from_spec(schedule, Task::Ss)?;
        let cd_schedule = ss_schedule.with_task(Task::Cd);
        cfg.validate(ss_schedule.total_steps())?;
        objective.validate()?;
        for head in objective.heads() {
            if !model.has_head(head) {
                return Err(Error::Config(format!("model lacks the {} head this objective trains", head.name())));
            }
        }
        let k = model.config().out_classes;
        if let Some(w) = objective.class_weights().into_iter().find(|w| w.num_classes() != k) {
            return Err(Error::Config(format!("{} class weights for a {k}-class model", w.num_classes())));
        }
        if cfg.mixed_precision {
            log::warn!("mixed_precision requested; this backend computes in f32 only");
        }
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer, cfg.weight_decay),
            model,
            objective,
            schedule_spec: schedule.clone(),
            ss_schedule,
            cd_schedule,
            cfg,
            epoch: 0,
            step: 0,
            best_val: None,
            best: None,
            log: Vec::new(),
            out_dir: None,
            log_file: None,
        })
    }

    /// Continues from `ckpt` with its stored configuration and optimizer state.
    pub fn resume(ckpt: &Checkpoint, objective: Objective) -> Result<Self> {
        let mut t = Self::new(ckpt.build_model()?, objective, &ckpt.schedule, ckpt.train.clone())?;
        if let Some(opt) = &ckpt.optimizer {
            t.optimizer = opt.clone();
        }
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.best_val = ckpt.best_val_loss;
        Ok(t)
    }

    /// Streams the log to `dir/train.log` and writes `last.ckpt` / `best.ckpt` there.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train.log");
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(self.epoch > 0)
            .truncate(self.epoch == 0)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.log_file = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &DenoiserModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn schedule(&self, task: Task) -> &ScheduleConfig {
        match task {
            Task::Ss => &self.ss_schedule,
            Task::Cd => &self.cd_schedule,
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.objective.micro_batches(self.cfg.batch_size).div_ceil(self.cfg.grad_accum) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            heads: self.model.heads().to_vec(),
            schedule: self.schedule_spec.clone(),
            train: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_loss: self.best_val,
            model: self.model.state(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Runs the remaining epochs and returns the best-validation checkpoint
    /// (the final state when there is no validation data).
    pub fn fit(&mut self) -> Result<Checkpoint> {
        while self.epoch < self.cfg.epochs {
            let s = self.run_epoch()?;
            log::info!(
                "epoch {} train {:.5} val {}",
                s.epoch,
                s.train_loss,
                s.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
            );
        }
        Ok(self.best.clone().unwrap_or_else(|| self.checkpoint()))
    }

    fn emit(&mut self, rec: LogRecord) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.log_file, &self.out_dir) {
            writeln!(f, "{rec}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(dir.join("train.log"), e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn permutation(&self, n: usize, tag: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(self.cfg.seed, &[TAG_ORDER, tag, self.epoch as u64]));
        order
    }

    /// One pass over the training data.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let bs = self.cfg.batch_size;
        let n_micro = self.objective.micro_batches(bs);
        let total = self.total_steps().max(1);
        let range = self.cfg.timestep_range(self.ss_schedule.total_steps())?;
        let (seed, epoch, noising) = (self.cfg.seed, self.epoch, self.cfg.noising);

        let (order_a, order_b) = match &self.objective {
            Objective::Supervised { train, .. } => (self.permutation(train.len(), TAG_SAMPLE), Vec::new()),
            Objective::MultiTask { cd_train, ss_train, .. } => {
                (self.permutation(cd_train.len(), TAG_CD), self.permutation(ss_train.len(), TAG_SS))
            }
            Objective::Denoise { train, .. } => (self.permutation(train.len(), TAG_SAMPLE), Vec::new()),
        };
        // Positions `start..start + bs` of an epoch order, wrapping for the
        // shorter multi-task set.
        let window = |order: &[usize], start: usize| -> Vec<usize> {
            let n = order.len();
            let end = if start + bs > n && start < n { n } else { start + bs };
            (start..end).map(|p| order[p % n]).collect()
        };

        let mut step_losses = Vec::new();
        let micro_ids: Vec<usize> = (0..n_micro).collect();
        for group in micro_ids.chunks(self.cfg.grad_accum) {
            let lr = learning_rate(self.cfg.lr_schedule, self.cfg.lr, self.cfg.warmup_fraction, self.step, total);
            let mut acc: Gradients<f32> = Gradients::new();
            let mut ts_all = Vec::new();
            let (mut l_a, mut l_b) = (0.0, 0.0);
            for &mb in group {
                let start = mb * bs;
                let (grads, la, lb, ts) = match &self.objective {
                    Objective::Supervised {
                        task, train, weights, ..
                    } => {
                        let idx = window(&order_a, start);
                        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                        let mut rngs = sample_rngs(seed, TAG_SAMPLE, epoch, start, batch.len());
                        let sched = self.schedule(*task);
                        let o = supervised_step(&self.model, &batch, sched, weights, range, noising, &mut rngs)?;
                        (o.grads, o.loss, 0.0, o.timesteps)
                    }
                    Objective::MultiTask {
                        cd_train,
                        ss_train,
                        lambda,
                        cd_weights,
                        ss_weights,
                        ..
                    } => {
                        let cd: Vec<&Sample> = window(&order_a, start).iter().map(|&i| &cd_train[i]).collect();
                        let ss: Vec<&Sample> = window(&order_b, start).iter().map(|&i| &ss_train[i]).collect();
                        let mut cd_rngs = sample_rngs(seed, TAG_CD, epoch, start, cd.len());
                        let mut ss_rngs = sample_rngs(seed, TAG_SS, epoch, start, ss.len());
                        let b = MultiTaskBatch {
                            cd: &cd,
                            ss: &ss,
                            cd_schedule: &self.cd_schedule,
                            ss_schedule: &self.ss_schedule,
                            cd_weights,
                            ss_weights,
                        };
                        let o = multitask_step(&self.model, &b, lambda, range, noising, &mut cd_rngs, &mut ss_rngs)?;
                        (o.grads, o.l_cd, o.l_ss, o.timesteps)
                    }
                    Objective::Denoise { train, .. } => {
                        let idx = window(&order_a, start);
                        let batch: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train[i]).collect();
                        let mut rngs = sample_rngs(seed, TAG_SAMPLE, epoch, start, batch.len());
                        let o = denoise_step(&self.model, &batch, &self.ss_schedule, range, &mut rngs)?;
                        (o.grads, o.loss, 0.0, o.timesteps)
                    }
                };
                if !(la.is_finite() && lb.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {} of epoch {epoch}; the last finite checkpoint is kept",
                        self.step
                    )));
                }
                l_a += la;
                l_b += lb;
                ts_all.extend(ts);
                for (id, g) in grads {
                    match acc.get_mut(&id) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(id, g);
                        }
                    }
                }
            }
            let k = group.len() as f64;
            for g in acc.values_mut() {
                g.scale_assign(1.0 / k as f32);
            }
            self.optimizer.step(self.model.params_mut(), &acc, lr);
            self.step += 1;

            let t_mean = ts_all.iter().sum::<usize>() as f64 / ts_all.len().max(1) as f64;
            let (la, lb) = (l_a / k, l_b / k);
            let base = LogRecord {
                step: self.step,
                epoch,
                task: String::new(),
                loss: la,
                lr,
                t_mean,
            };
            match &self.objective {
                Objective::Supervised { task, .. } => {
                    step_losses.push(la);
                    self.emit(LogRecord {
                        task: task.name().into(),
                        ..base
                    })?;
                }
                Objective::MultiTask { lambda, .. } => {
                    let mt = multitask_loss(la, lb, lambda);
                    step_losses.push(mt);
                    self.emit(LogRecord {
                        task: "cd".into(),
                        ..base.clone()
                    })?;
                    self.emit(LogRecord {
                        task: "ss".into(),
                        loss: lb,
                        ..base.clone()
                    })?;
                    self.emit(LogRecord {
                        task: "mt".into(),
                        loss: mt,
                        ..base
                    })?;
                }
                Objective::Denoise { .. } => {
                    step_losses.push(la);
                    self.emit(LogRecord {
                        task: "denoise".into(),
                        ..base
                    })?;
                }
            }
        }
        self.epoch += 1;

        let val_loss = self.validate()?;
        let improved = match (val_loss, self.best_val) {
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(b)) => v < b,
            _ => false,
        };
        if improved {
            self.best_val = val_loss;
            self.best = Some(self.checkpoint());
        }
        if let Some(dir) = self.out_dir.clone() {
            let ckpt = self.checkpoint();
            ckpt.save(&dir.join("last.ckpt"))?;
            if improved || val_loss.is_none() {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
        }
        Ok(EpochSummary {
            epoch: self.epoch,
            train_loss: step_losses.iter().sum::<f64>() / step_losses.len().max(1) as f64,
            val_loss,
            improved,
        })
    }

    /// Validation loss of the current model, `None` without validation data.
    pub fn validate(&self) -> Result<Option<f64>> {
        let bs = self.cfg.batch_size;
        match &self.objective {
            Objective::Supervised { task, val, weights, .. } => {
                if val.is_empty() {
                    return Ok(None);
                }
                validation_loss(&self.model, val, self.schedule(*task), weights, bs).map(Some)
            }
            Objective::MultiTask {
                cd_val,
                ss_val,
                lambda,
                cd_weights,
                ss_weights,
                ..
            } => {
                if cd_val.is_empty() || ss_val.is_empty() {
                    return Ok(None);
                }
                let cd = validation_loss(&self.model, cd_val, &self.cd_schedule, cd_weights, bs)?;
                let ss = validation_loss(&self.model, ss_val, &self.ss_schedule, ss_weights, bs)?;
                Ok(Some(multitask_loss(cd, ss, lambda)))
            }
            Objective::Denoise { val, .. } => {
                if val.is_empty() {
                    return Ok(None);
                }
                let range = self.cfg.timestep_range(self.ss_schedule.total_steps())?;
                let mut total = 0.0;
                for (c, chunk) in val.chunks(bs).enumerate() {
                    let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
                    // Fixed draws so epochs are compared on identical inputs.
                    let mut rngs = sample_rngs(self.cfg.seed, TAG_VAL, 0, c * bs, refs.len());
                    let mut tape = Tape::new();
                    let (loss, _) = record_denoise_loss(&self.model, &mut tape, &refs, &self.ss_schedule, range, &mut rngs)?;
                    total += tape.value(loss).item() as f64 * refs.len() as f64;
                }
                Ok(Some(total / val.len() as f64))
            }
        }
    }
}
