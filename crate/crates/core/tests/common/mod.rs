#![allow(dead_code)]

use std::path::Path;

use noise2map::data::{generate_synthetic, Dataset, Sample, Split, SynthSpec};
use noise2map::model::{DenoiserModel, Head, ModelState, UNetConfig};
use noise2map::{derived_rng, Task};

pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        stage_channels: vec![8, 16],
        num_resolutions: 2,
        time_embed_dim: 16,
        ..UNetConfig::desk()
    }
}

pub fn tiny_model(heads: &[Head], seed: u64) -> DenoiserModel<f32> {
    DenoiserModel::build(&tiny_config(), heads, &mut derived_rng(seed, &[0])).unwrap()
}

/// `(train, val)` synthetic samples at 16x16.
pub fn synth(dir: &Path, task: Task, n: usize, n_val: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = SynthSpec {
        seed,
        task,
        size: 16,
        n_buildings: (1, 2),
        n_samples: n,
        n_val,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, dir).unwrap();
    let train = Dataset::load(m).unwrap().samples;
    let val = if n_val > 0 {
        Dataset::open(dir, task, Split::Val).unwrap().samples
    } else {
        Vec::new()
    };
    (train, val)
}

pub fn max_state_diff(a: &ModelState, b: &ModelState) -> f32 {
    assert_eq!(a.arrays.len(), b.arrays.len());
    a.arrays
        .iter()
        .zip(&b.arrays)
        .flat_map(|(x, y)| {
            assert_eq!(x.name, y.name);
            x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f32::max)
}
