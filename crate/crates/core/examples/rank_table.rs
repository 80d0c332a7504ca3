//! Aggregates a model x dataset score table into an average-rank ordering.
//!
//! cargo run --example rank_table -- crates/core/fixtures/table1_cd.csv

use std::path::PathBuf;

use clap::Parser;
use noise2map::evaluation::{rank_aggregate, read_rank_csv};

#[derive(Parser)]
struct Args {
    /// CSV with columns model,dataset,f1,iou.
    #[arg(default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/table1_ss.csv"))]
    csv: PathBuf,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let table = read_rank_csv(&args.csv)?;
    println!("datasets: {}", table.datasets.join(", "));
    for e in rank_aggregate(&table) {
        println!("{:>2}. {:<18} avg rank {:.3}  mean IoU {:.2}  per dataset {:?}", e.ordinal, e.model, e.average_rank, e.mean_iou, e.ranks);
    }
    Ok(())
}
