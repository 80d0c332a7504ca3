//! Writes a synthetic building dataset and summarizes what was generated.
//!
//! cargo run --example synth_dataset -- --task cd --out /tmp/n2m-cd

use std::path::PathBuf;

use clap::Parser;
use noise2map::data::{generate_synthetic, Dataset, Split, SynthSpec};
use noise2map::Task;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "ss")]
    task: String,
    #[arg(long, default_value = "/tmp/noise2map-synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    n_val: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let task = if args.task == "cd" { Task::Cd } else { Task::Ss };
    let spec = SynthSpec {
        seed: args.seed,
        task,
        size: args.size,
        n_samples: args.n,
        n_val: args.n_val,
        ..SynthSpec::default()
    };
    let manifest = generate_synthetic(&spec, &args.out)?;
    println!("{} dataset at {}", task, args.out.display());
    println!("class weights {:?}", manifest.class_weights.as_slice());
    for split in [Split::Train, Split::Val] {
        let ds = Dataset::open(&args.out, task, split)?;
        let fg: usize = ds.samples.iter().map(|s| s.mask.iter().filter(|&&v| v > 0).count()).sum();
        let px: usize = ds.samples.iter().map(|s| s.mask.len()).sum();
        println!("{split:>5}: {:3} samples, foreground {:.1}%", ds.len(), 100.0 * fg as f64 / px as f64);
    }
    Ok(())
}
