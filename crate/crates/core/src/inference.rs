//! Single-pass prediction, timestep sweeps and progression exports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::image_io::{write_png, Image8};
use crate::data::{denormalize, Sample};
use crate::evaluation::{metrics, ClassMetrics, ConfusionMatrix};
use crate::model::{DenoiserModel, Head};
use crate::schedule::{mix, ScheduleConfig};
use crate::tensor::{Float, Tensor};
use crate::{derived_rng, Error, Result};

/// Noise-free model input at `t`: `sqrt(ab_t) * clean_t`. At `t = 0` and
/// `t = T` this is exactly the clean endpoint.
pub fn deterministic_input(sample: &Sample, schedule: &ScheduleConfig, t: usize) -> Result<Tensor<f32>> {
    let clean = schedule.clean_path(&sample.input(), t)?;
    let ab = schedule.effective_alpha_bar(t)?;
    if ab == 1.0 {
        return Ok(clean);
    }
    Ok(mix(&clean, &Tensor::zeros(clean.shape()), ab))
}

/// Per-pixel argmax of `[B, K, H, W]` logits, ties to the lower class.
pub fn argmax_masks<F: Float>(logits: &Tensor<F>) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    (0..b)
        .map(|n| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(n * k + c) * plane + p] > d[(n * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

fn task_head(model: &DenoiserModel<f32>, schedule: &ScheduleConfig) -> Result<Head> {
    let head = Head::from(schedule.task());
    if !model.has_head(head) {
        return Err(Error::Config(format!("model has no {} head", head.name())));
    }
    Ok(head)
}

/// Masks for `samples` from one forward pass at timestep `t`.
pub fn predict_batch(
    model: &DenoiserModel<f32>,
    samples: &[&Sample],
    schedule: &ScheduleConfig,
    t: usize,
) -> Result<Vec<Vec<u8>>> {
    let head = task_head(model, schedule)?;
    let inputs = samples
        .iter()
        .map(|s| deterministic_input(s, schedule, t))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.forward(&Tensor::stack(&inputs)?, &vec![t; samples.len()], head)?;
    Ok(argmax_masks(&logits))
}

/// Predicted mask for one sample; inference uses `t = T` by default.
pub fn predict(model: &DenoiserModel<f32>, sample: &Sample, schedule: &ScheduleConfig, t: usize) -> Result<Vec<u8>> {
    Ok(predict_batch(model, &[sample], schedule, t)?.remove(0))
}

/// Confusion matrix of deterministic predictions at `t` over `samples`.
pub fn evaluate(
    model: &DenoiserModel<f32>,
    samples: &[Sample],
    schedule: &ScheduleConfig,
    t: usize,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().out_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (mask, s) in predict_batch(model, &refs, schedule, t)?.iter().zip(chunk) {
            cm.accumulate(mask, &s.mask)?;
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Ascending, without duplicates.
    pub timesteps: Vec<usize>,
    pub confusion: Vec<ConfusionMatrix>,
    /// `metrics[i][c]`: class `c` at `timesteps[i]`.
    pub metrics: Vec<Vec<ClassMetrics>>,
    pub sample_ids: Vec<String>,
    /// `masks[i][j]`: prediction for sample `j` at `timesteps[i]`, when kept.
    pub masks: Option<Vec<Vec<Vec<u8>>>>,
    pub seed: u64,
}

impl SweepReport {
    pub fn f1(&self, class: usize) -> Vec<f64> {
        self.metrics.iter().map(|m| m[class].f1).collect()
    }
}

/// Evaluates `samples` at every timestep of `t_list` on stochastic
/// forward-process inputs. Noise is drawn afresh per `(t, sample)` from `seed`.
pub fn timestep_sweep(
    model: &DenoiserModel<f32>,
    samples: &[Sample],
    schedule: &ScheduleConfig,
    t_list: &[usize],
    seed: u64,
    keep_masks: bool,
) -> Result<SweepReport> {
    if t_list.is_empty() {
        return Err(Error::Input("timestep list is empty".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to sweep".into()));
    }
    let mut timesteps = t_list.to_vec();
    timesteps.sort_unstable();
    timesteps.dedup();
    for &t in &timesteps {
        schedule.check_timestep(t)?;
    }
    let head = task_head(model, schedule)?;
    let k = model.config().out_classes;
    const CHUNK: usize = 8;

    let mut confusion = Vec::with_capacity(timesteps.len());
    let mut all_masks = Vec::with_capacity(timesteps.len());
    for &t in &timesteps {
        let mut cm = ConfusionMatrix::new(k);
        let mut masks = Vec::with_capacity(samples.len());
        for (c, chunk) in samples.chunks(CHUNK).enumerate() {
            let inputs = chunk
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let mut rng = derived_rng(seed, &[t as u64, (c * CHUNK + j) as u64]);
                    Ok(schedule.forward_sample(&s.input(), t, &mut rng)?.x_t)
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = model.forward(&Tensor::stack(&inputs)?, &vec![t; chunk.len()], head)?;
            for (mask, s) in argmax_masks(&logits).into_iter().zip(chunk) {
                cm.accumulate(&mask, &s.mask)?;
                if keep_masks {
                    masks.push(mask);
                }
            }
        }
        confusion.push(cm);
        all_masks.push(masks);
    }
    Ok(SweepReport {
        metrics: confusion.iter().map(|cm| (0..k).map(|c| metrics(cm, c)).collect()).collect(),
        confusion,
        timesteps,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        masks: keep_masks.then_some(all_masks),
        seed,
    })
}

fn mask_to_gray(mask: &[u8], num_classes: usize) -> Vec<u8> {
    let scale = 255 / (num_classes.max(2) - 1);
    mask.iter().map(|&v| (v as usize * scale).min(255) as u8).collect()
}

/// Writes per-timestep mask PNGs (`{id}_t{t}.png`, pixel = class index), one
/// grid per sample (`{id}_progression.png`: inputs, masks by timestep, ground
/// truth) and `f1_vs_timestep.csv`. Returns every path written.
pub fn export_progression(report: &SweepReport, samples: &[Sample], num_classes: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let masks = report
        .masks
        .as_ref()
        .ok_or_else(|| Error::Input("sweep report carries no masks; rerun with masks kept".into()))?;
    if report.timesteps.is_empty() {
        return Err(Error::Input("sweep report has no timesteps".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    for (j, sample) in samples.iter().enumerate() {
        if report.sample_ids.get(j) != Some(&sample.id) {
            return Err(Error::Input(format!("sample {} does not match the sweep report", sample.id)));
        }
        let (h, w) = (sample.height, sample.width);
        for (i, &t) in report.timesteps.iter().enumerate() {
            let path = out_dir.join(format!("{}_t{t}.png", sample.id));
            write_png(&path, &Image8::new(w, h, 1, masks[i][j].clone()))?;
            written.push(path);
        }

        let mut tiles: Vec<Vec<u8>> = sample.images.iter().map(denormalize).collect();
        for m in masks.iter().map(|m| &m[j]).chain(std::iter::once(&sample.mask)) {
            let gray = mask_to_gray(m, num_classes);
            tiles.push([gray.clone(), gray.clone(), gray].concat());
        }
        let cols = tiles.len();
        let mut grid = vec![0u8; 3 * h * w * cols];
        for (col, tile) in tiles.iter().enumerate() {
            for c in 0..3 {
                for y in 0..h {
                    let src = &tile[(c * h + y) * w..(c * h + y + 1) * w];
                    let dst = (c * h + y) * w * cols + col * w;
                    grid[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        let path = out_dir.join(format!("{}_progression.png", sample.id));
        write_png(&path, &Image8::from_planar(w * cols, h, 3, &grid))?;
        written.push(path);
    }

    let path = out_dir.join("f1_vs_timestep.csv");
    let mut text = String::from("t,f1_class1,iou_class1\n");
    for (t, m) in report.timesteps.iter().zip(&report.metrics) {
        let c1 = m.get(1).copied().unwrap_or(m[0]);
        text.push_str(&format!("{t},{},{}\n", c1.f1, c1.iou));
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_to_lower_class() {
        let logits = Tensor::<f32>::from_vec(&[1, 3, 1, 3], vec![1.0, 0.0, 2.0, 1.0, 5.0, 2.0, 0.5, 5.0, 2.0]);
        assert_eq!(argmax_masks(&logits), vec![vec![0, 1, 0]]);
    }
}
