//! Prints the full default experiment configuration, or validates a file.
//!
//! cargo run --example experiment_config > exp.toml
//! cargo run --example experiment_config -- exp.toml

use std::path::PathBuf;

use clap::Parser;
use noise2map::config::ExperimentConfig;

#[derive(Parser)]
struct Args {
    config: Option<PathBuf>,
}

fn main() -> noise2map::Result<()> {
    match Args::parse().config {
        None => print!("{}", ExperimentConfig::default().to_toml()),
        Some(path) => {
            let cfg = ExperimentConfig::load(&path)?;
            println!("{} is valid; task {}, T = {}", path.display(), cfg.task, cfg.schedule.total_steps);
        }
    }
    Ok(())
}
