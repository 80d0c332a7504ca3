//! Joint change-detection and segmentation training with one shared trunk and
//! two heads; reports both tasks' validation F1.
//!
//! cargo run --example multitask -- --epochs 20 --lambda-cd 1 --lambda-ss 1

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, Split, SynthSpec};
use noise2map::evaluation::headline;
use noise2map::inference::evaluate;
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::objectives::MultiTaskWeights;
use noise2map::schedule::ScheduleSpec;
use noise2map::training::{Objective, TrainConfig, Trainer};
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_cd: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_ss: f64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let load = |task: Task| -> noise2map::Result<_> {
        let dir = std::env::temp_dir().join(format!("noise2map-multitask-{task}"));
        let spec = SynthSpec {
            seed: args.seed,
            task,
            size: args.size,
            n_samples: 32,
            n_val: 16,
            ..SynthSpec::default()
        };
        let m = generate_synthetic(&spec, &dir)?;
        let w = m.class_weights.clone();
        Ok((Dataset::load(m)?.samples, Dataset::open(&dir, task, Split::Val)?.samples, w))
    };
    let (cd_train, cd_val, cd_weights) = load(Task::Cd)?;
    let (ss_train, ss_val, ss_weights) = load(Task::Ss)?;
    let objective = Objective::MultiTask {
        cd_train,
        cd_val: cd_val.clone(),
        ss_train,
        ss_val: ss_val.clone(),
        lambda: MultiTaskWeights::new(args.lambda_cd, args.lambda_ss)?,
        cd_weights,
        ss_weights,
    };
    let model = DenoiserModel::build(&UNetConfig::desk(), &[Head::Cd, Head::Ss], &mut derived_rng(args.seed, &[0]))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: 1e-3,
        grad_accum: 1,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?;
    for _ in 0..args.epochs {
        let s = trainer.run_epoch()?;
        let mut line = format!("epoch {:3}  L_mt {:.4}", s.epoch, s.train_loss);
        for (task, val) in [(Task::Cd, &cd_val), (Task::Ss, &ss_val)] {
            let sched = trainer.schedule(task);
            let f1 = headline(&evaluate(trainer.model(), val, sched, sched.total_steps(), 8)?).0;
            line.push_str(&format!("  {task} val F1 {f1:.4}"));
        }
        println!("{line}");
    }
    Ok(())
}
