//! Overfits the desk model on a small synthetic corpus and reports train F1
//! at the inference timestep as training progresses.
//!
//! cargo run --example overfit -- --task cd --epochs 200

use std::time::Instant;

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, SynthSpec};
use noise2map::evaluation::headline;
use noise2map::inference::evaluate;
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::objectives::ClassWeights;
use noise2map::schedule::ScheduleSpec;
use noise2map::training::{Objective, TrainConfig, Trainer};
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "ss")]
    task: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once train F1 reaches this value.
    #[arg(long, default_value_t = 1.1)]
    target_f1: f64,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let task = if args.task == "cd" { Task::Cd } else { Task::Ss };
    let dir = std::env::temp_dir().join(format!("noise2map-overfit-{}-{}", task, args.seed));
    let spec = SynthSpec {
        seed: args.seed,
        task,
        size: args.size,
        n_samples: args.samples,
        ..SynthSpec::default()
    };
    let manifest = generate_synthetic(&spec, &dir)?;
    let weights = manifest.class_weights.clone();
    let train = Dataset::load(manifest)?.samples;

    let mut rng = derived_rng(args.seed, &[0]);
    let model = DenoiserModel::build(&UNetConfig::desk(), &[Head::from(task)], &mut rng)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        grad_accum: args.grad_accum,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let objective = Objective::Supervised {
        task,
        train: train.clone(),
        val: Vec::new(),
        weights: ClassWeights::new(weights.as_slice().to_vec())?,
    };
    let mut trainer = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?;
    let start = Instant::now();
    for epoch in 1..=args.epochs {
        let s = trainer.run_epoch()?;
        if epoch % args.eval_every == 0 || epoch == args.epochs {
            let sched = trainer.schedule(task);
            let cm = evaluate(trainer.model(), &train, sched, sched.total_steps(), 8)?;
            let (f1, iou) = headline(&cm);
            println!(
                "epoch {epoch:4}  loss {:.4}  train F1 {f1:.4}  IoU {iou:.4}  {:.0}s",
                s.train_loss,
                start.elapsed().as_secs_f64()
            );
            if f1 >= args.target_f1 {
                break;
            }
        }
    }
    Ok(())
}
