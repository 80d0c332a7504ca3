//! Compares analytic gradients of the segmentation loss with central finite
//! differences on a small 64-bit U-Net.
//!
//! cargo run --example gradient_check -- --params 30

use clap::Parser;
use noise2map::model::{DenoiserModel, Head, UNetConfig};
use noise2map::tensor::{Gradients, Tape, Tensor};
use noise2map::derived_rng;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 30)]
    params: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> noise2map::Result<()> {
    let args = Args::parse();
    let config = UNetConfig {
        stage_channels: vec![8, 16],
        num_resolutions: 2,
        time_embed_dim: 16,
        ..UNetConfig::desk()
    };
    let mut rng = derived_rng(args.seed, &[]);
    let mut model = DenoiserModel::<f64>::build(&config, &[Head::Ss], &mut rng)?;
    let ids: Vec<usize> = model.params().iter().map(|(id, _)| id).collect();
    for &id in &ids {
        if DenoiserModel::<f64>::is_head_param(model.params().name(id)) {
            for v in model.params_mut().value_mut(id).data_mut() {
                *v = 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let x = Tensor::from_vec(&[1, 3, 32, 32], (0..3 * 32 * 32).map(|_| rng.sample(StandardNormal)).collect());
    let y: Vec<usize> = (0..32 * 32).map(|_| rng.random_range(0..2)).collect();
    let loss = |m: &DenoiserModel<f64>| -> noise2map::Result<(f64, Gradients<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = m.forward_tape(&mut tape, xv, &[400], Head::Ss)?;
        let l = tape.weighted_cross_entropy(logits, &y, &[1.0, 3.0])?;
        Ok((tape.value(l).item(), tape.backward(l, 1.0)))
    };
    let (_, grads) = loss(&model)?;

    let mut worst = 0.0f64;
    for _ in 0..args.params {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..model.params().value(id).numel());
        let orig = model.params().value(id).data()[j];
        model.params_mut().value_mut(id).data_mut()[j] = orig + args.step;
        let up = loss(&model)?.0;
        model.params_mut().value_mut(id).data_mut()[j] = orig - args.step;
        let down = loss(&model)?.0;
        model.params_mut().value_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * args.step);
        let analytic = grads.get(&id).map_or(0.0, |g| g.data()[j]);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            println!("{:<32} [{j:>5}] zero gradient, skipped", model.params().name(id));
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        worst = worst.max(rel);
        println!("{:<32} [{j:>5}] analytic {analytic:+.6e} numeric {numeric:+.6e} rel {rel:.2e}", model.params().name(id));
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
