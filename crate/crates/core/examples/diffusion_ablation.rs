//! Held-out comparison of the full method (noised inputs, timestep
//! conditioning) against a plain segmentation network trained on clean
//! inputs with conditioning removed.
//!
//! cargo run --example diffusion_ablation -- --seeds 3 --epochs 40

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, Split, SynthSpec};
use noise2map::evaluation::headline;
use noise2map::inference::evaluate;
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::schedule::ScheduleSpec;
use noise2map::training::{Objective, TrainConfig, Trainer};
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "ss")]
    task: String,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 32)]
    val: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

fn val_f1(task: Task, seed: u64, diffusion: bool, args: &Args) -> noise2map::Result<f64> {
    let dir = std::env::temp_dir().join(format!("noise2map-ablation-{task}-{seed}-{}", args.size));
    let spec = SynthSpec {
        seed,
        task,
        size: args.size,
        n_samples: args.train,
        n_val: args.val,
        ..SynthSpec::default()
    };
    let manifest = generate_synthetic(&spec, &dir)?;
    let weights = manifest.class_weights.clone();
    let train = Dataset::load(manifest)?.samples;
    let val = Dataset::open(&dir, task, Split::Val)?.samples;

    let model_cfg = UNetConfig {
        use_timestep_conditioning: diffusion,
        ..UNetConfig::desk()
    };
    let model = DenoiserModel::build(&model_cfg, &[Head::from(task)], &mut derived_rng(seed, &[0]))?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        grad_accum: 1,
        seed,
        noising: diffusion,
        ..TrainConfig::default()
    };
    let objective = Objective::Supervised {
        task,
        train,
        val: val.clone(),
        weights,
    };
    let mut trainer = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?;
    let best = trainer.fit()?;
    let model = best.build_model()?;
    let sched = trainer.schedule(task);
    let cm = evaluate(&model, &val, sched, sched.total_steps(), 8)?;
    Ok(headline(&cm).0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let task = if args.task == "cd" { Task::Cd } else { Task::Ss };
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..args.seeds {
        with.push(val_f1(task, seed, true, &args)?);
        without.push(val_f1(task, seed, false, &args)?);
        println!("seed {seed}: diffusion {:.4}  no diffusion {:.4}", with[with.len() - 1], without[without.len() - 1]);
    }
    println!("median val F1: diffusion {:.4}  no diffusion {:.4}", median(with), median(without));
    Ok(())
}
