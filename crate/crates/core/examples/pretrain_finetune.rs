//! Denoising pretraining on unlabeled images, then segmentation fine-tuning
//! from the pretrained trunk, compared against training from scratch.
//!
//! cargo run --example pretrain_finetune -- --pretrain-epochs 30 --epochs 30

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, Sample, Split, SynthSpec};
use noise2map::evaluation::headline;
use noise2map::inference::evaluate;
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::objectives::ClassWeights;
use noise2map::schedule::{ScheduleConfig, ScheduleSpec};
use noise2map::training::{pretraining_images, Objective, TrainConfig, Trainer};
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 30)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn finetune(model: DenoiserModel<f32>, train: &[Sample], val: &[Sample], w: &ClassWeights, args: &Args) -> noise2map::Result<f64> {
    let objective = Objective::Supervised {
        task: Task::Ss,
        train: train.to_vec(),
        val: val.to_vec(),
        weights: w.clone(),
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: 1e-3,
        grad_accum: 1,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let best = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?.fit()?.build_model()?;
    Ok(headline(&evaluate(&best, val, &ScheduleConfig::reference(Task::Ss), 1000, 8)?).0)
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let tmp = std::env::temp_dir();
    let synth = |name: &str, seed, n, n_val| {
        let spec = SynthSpec {
            seed,
            task: Task::Ss,
            size: args.size,
            n_samples: n,
            n_val,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &tmp.join(name))
    };
    let corpus = Dataset::load(synth("noise2map-pretrain-corpus", args.seed + 1000, 64, 0)?)?;
    let manifest = synth("noise2map-finetune", args.seed, 64, 32)?;
    let w = manifest.class_weights.clone();
    let root = manifest.root.clone();
    let train = Dataset::load(manifest)?.samples;
    let val = Dataset::open(&root, Task::Ss, Split::Val)?.samples;

    let model = DenoiserModel::build(&UNetConfig::desk(), &[Head::Denoise], &mut derived_rng(args.seed, &[0]))?;
    let objective = Objective::Denoise {
        train: pretraining_images(&corpus.samples),
        val: Vec::new(),
    };
    let cfg = TrainConfig {
        epochs: args.pretrain_epochs,
        lr: 1e-3,
        grad_accum: 1,
        seed: args.seed,
        ..TrainConfig::pretrain_defaults()
    };
    let mut pretrainer = Trainer::new(model, objective, &ScheduleSpec::default(), cfg)?;
    let state = pretrainer.fit()?.model;
    let first = pretrainer.log().first().map_or(f64::NAN, |r| r.loss);
    let last = pretrainer.log().last().map_or(f64::NAN, |r| r.loss);
    println!("pretraining noise MSE {first:.4} -> {last:.4}");

    let fresh = || DenoiserModel::build(&UNetConfig::desk(), &[Head::Ss], &mut derived_rng(args.seed, &[0]));
    let mut transferred = fresh()?;
    println!("transferred {} trunk arrays", transferred.transfer_trunk(&state)?);
    let pre = finetune(transferred, &train, &val, &w, &args)?;
    let scratch = finetune(fresh()?, &train, &val, &w, &args)?;
    println!("val F1: pretrained {pre:.4}  scratch {scratch:.4}");
    Ok(())
}
