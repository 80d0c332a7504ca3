//! Prints the effective noise level and the change-detection clean path along
//! the trajectory for each curve family.
//!
//! cargo run --example forward_process -- --steps 10

use clap::Parser;
use noise2map::schedule::{CurveKind, ScheduleConfig, ScheduleSpec};
use noise2map::tensor::Tensor;
use noise2map::{derived_rng, Task};

#[derive(Parser)]
struct Args {
    /// Number of trajectory points to print.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    total_steps: usize,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let kinds = [CurveKind::LinearBeta, CurveKind::Cosine, CurveKind::Quadratic];
    let schedules = kinds
        .iter()
        .map(|&kind| {
            let spec = ScheduleSpec {
                kind,
                total_steps: args.total_steps,
                ..ScheduleSpec::default()
            };
            ScheduleConfig::from_spec(&spec, Task::Cd)
        })
        .collect::<noise2map::Result<Vec<_>>>()?;

    // One pre/post pixel pair: pre = -1, post = +1.
    let x = Tensor::from_vec(&[2, 1, 1], vec![-1.0f32, 1.0]);
    let mut rng = derived_rng(0, &[]);
    println!("{:>6} {:>12} {:>12} {:>12}   cd clean (pre, post)   one noised draw", "t", "linear_beta", "cosine", "quadratic");
    for i in 0..=args.steps {
        let t = i * args.total_steps / args.steps;
        let abs = schedules
            .iter()
            .map(|s| s.effective_alpha_bar(t))
            .collect::<noise2map::Result<Vec<_>>>()?;
        let clean = schedules[0].clean_path(&x, t)?;
        let noisy = schedules[0].forward_sample(&x, t, &mut rng)?.x_t;
        println!(
            "{t:>6} {:>12.6} {:>12.6} {:>12.6}   ({:+.3}, {:+.3})       ({:+.3}, {:+.3})",
            abs[0],
            abs[1],
            abs[2],
            clean.data()[0],
            clean.data()[1],
            noisy.data()[0],
            noisy.data()[1]
        );
    }
    Ok(())
}
