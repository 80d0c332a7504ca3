//! Trains a change-detection model briefly, then evaluates it at a range of
//! timesteps and exports per-timestep masks, progression grids and the F1 curve.
//!
//! cargo run --example timestep_sweep -- --epochs 30 --out /tmp/n2m-sweep

use std::path::PathBuf;

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, SynthSpec};
use noise2map::inference::{export_progression, timestep_sweep};
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::schedule::ScheduleSpec;
use noise2map::training::{Objective, TrainConfig, Trainer};
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,100,250,500,750,900,1000")]
    timesteps: Vec<usize>,
    #[arg(long, default_value = "/tmp/noise2map-sweep")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let spec = SynthSpec {
        seed: args.seed,
        task: Task::Cd,
        size: 32,
        n_samples: 32,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, &args.out.join("data"))?;
    let weights = m.class_weights.clone();
    let samples = Dataset::load(m)?.samples;
    let model = DenoiserModel::build(&UNetConfig::desk(), &[Head::Cd], &mut derived_rng(args.seed, &[0]))?;
    let objective = Objective::Supervised {
        task: Task::Cd,
        train: samples.clone(),
        val: Vec::new(),
        weights,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: 1e-3,
        grad_accum: 1,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?;
    trainer.fit()?;

    let shown = &samples[..4];
    let report = timestep_sweep(trainer.model(), shown, trainer.schedule(Task::Cd), &args.timesteps, args.seed, true)?;
    for (t, m) in report.timesteps.iter().zip(&report.metrics) {
        println!("t = {t:>4}  F1 {:.4}  IoU {:.4}", m[1].f1, m[1].iou);
    }
    let written = export_progression(&report, shown, 2, &args.out.join("export"))?;
    println!("wrote {} files under {}", written.len(), args.out.join("export").display());
    Ok(())
}
