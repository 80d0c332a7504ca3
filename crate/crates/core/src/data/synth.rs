//! Deterministic synthetic building scenes: a smooth background field with
//! hard-edged rectangular roofs, optionally as a pre/post pair with changes.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{write_png, Image8};
use super::{load_manifest, DatasetManifest, DatasetMeta, Split};
use crate::objectives::ClassWeights;
use crate::{Error, Result, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub task: Task,
    /// Height and width of every scene.
    pub size: usize,
    /// Inclusive range for the number of buildings in a (pre) scene.
    pub n_buildings: (usize, usize),
    /// Share of pre-scene buildings that are demolished and replaced by new ones.
    pub change_fraction: f64,
    /// Samples listed in `splits/train.txt`.
    pub n_samples: usize,
    /// Additional held-out samples listed in both `val.txt` and `test.txt`.
    pub n_val: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Ss,
            size: 64,
            n_buildings: (2, 5),
            change_fraction: 0.5,
            n_samples: 32,
            n_val: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Param(format!("synthetic size {} must be at least 16", self.size)));
        }
        if self.n_buildings.0 > self.n_buildings.1 {
            return Err(Error::Param(format!(
                "n_buildings range {:?} is empty",
                self.n_buildings
            )));
        }
        if !(0.0..=1.0).contains(&self.change_fraction) {
            return Err(Error::Param(format!(
                "change_fraction {} outside [0, 1]",
                self.change_fraction
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Param("n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn id(index: usize) -> String {
        format!("s{index:05}")
    }
}

/// Axis-aligned rectangle in pixel coordinates, `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// True when the rectangles overlap or touch within `margin` pixels.
    pub fn near(&self, other: &Rect, margin: usize) -> bool {
        self.x < other.x + other.w + margin
            && other.x < self.x + self.w + margin
            && self.y < other.y + other.h + margin
            && other.y < self.y + self.h + margin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub pre: Image8,
    /// Post-event image (change detection only).
    pub post: Option<Image8>,
    pub pre_rects: Vec<Rect>,
    pub post_rects: Vec<Rect>,
    pub removed: Vec<Rect>,
    pub added: Vec<Rect>,
    /// Building footprints (SS) or the change mask (CD), values in {0, 1}.
    pub mask: Vec<u8>,
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const CELLS: usize = 4;
    let base: [f64; 3] = [rng.random_range(70.0..110.0), rng.random_range(80.0..120.0), rng.random_range(60.0..100.0)];
    let mut out = vec![0.0; 3 * size * size];
    for (c, &b) in base.iter().enumerate() {
        let knots: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1))
            .map(|_| b + rng.random_range(-18.0..18.0))
            .collect();
        for y in 0..size {
            let gy = y as f64 * CELLS as f64 / (size - 1) as f64;
            let y0 = (gy as usize).min(CELLS - 1);
            let fy = gy - y0 as f64;
            for x in 0..size {
                let gx = x as f64 * CELLS as f64 / (size - 1) as f64;
                let x0 = (gx as usize).min(CELLS - 1);
                let fx = gx - x0 as f64;
                let k = |i: usize, j: usize| knots[i * (CELLS + 1) + j];
                let v = (1.0 - fy) * ((1.0 - fx) * k(y0, x0) + fx * k(y0, x0 + 1))
                    + fy * ((1.0 - fx) * k(y0 + 1, x0) + fx * k(y0 + 1, x0 + 1));
                out[(c * size + y) * size + x] = v;
            }
        }
    }
    out
}

/// Places a rectangle clear of every rectangle in `avoid` (1 px margin);
/// `None` after repeated failures.
fn place(size: usize, avoid: &[Rect], rng: &mut ChaCha8Rng) -> Option<Rect> {
    let (lo, hi) = ((size / 8).max(2), (size / 4).max(3));
    for _ in 0..200 {
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let r = Rect {
            x: rng.random_range(1..size - w),
            y: rng.random_range(1..size - h),
            w,
            h,
        };
        if avoid.iter().all(|a| !r.near(a, 1)) {
            return Some(r);
        }
    }
    None
}

fn roof_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // mostly bright roofs, some darker than any background value
    let v = if rng.random_bool(0.7) {
        rng.random_range(165.0..235.0)
    } else {
        rng.random_range(10.0..35.0)
    };
    [v + rng.random_range(-10.0..10.0), v + rng.random_range(-10.0..10.0), v + rng.random_range(-10.0..10.0)]
}

fn render(size: usize, bg: &[f64], rects: &[(Rect, [f64; 3])]) -> Image8 {
    let mut planar = bg.to_vec();
    for (r, color) in rects {
        for (c, &v) in color.iter().enumerate() {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    planar[(c * size + y) * size + x] = v;
                }
            }
        }
    }
    let bytes: Vec<u8> = planar.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Image8::from_planar(size, size, 3, &bytes)
}

fn footprint(size: usize, rects: &[Rect]) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for r in rects {
        for y in r.y..r.y + r.h {
            mask[y * size + r.x..y * size + r.x + r.w].fill(1);
        }
    }
    mask
}

/// Builds scene `index` of `spec` without touching the filesystem.
pub fn synthesize_scene(spec: &SynthSpec, index: usize) -> Result<SynthScene> {
    spec.validate()?;
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let bg = background(size, &mut rng);
    let n = rng.random_range(spec.n_buildings.0..=spec.n_buildings.1);
    let mut pre: Vec<(Rect, [f64; 3])> = Vec::with_capacity(n);
    for _ in 0..n {
        let taken: Vec<Rect> = pre.iter().map(|p| p.0).collect();
        match place(size, &taken, &mut rng) {
            Some(r) => pre.push((r, roof_color(&mut rng))),
            None => break,
        }
    }
    let pre_rects: Vec<Rect> = pre.iter().map(|p| p.0).collect();
    let pre_img = render(size, &bg, &pre);

    if spec.task == Task::Ss {
        return Ok(SynthScene {
            pre: pre_img,
            post: None,
            mask: footprint(size, &pre_rects),
            post_rects: pre_rects.clone(),
            pre_rects,
            removed: Vec::new(),
            added: Vec::new(),
        });
    }

    let n_change = (spec.change_fraction * pre.len() as f64).round() as usize;
    let mut gone: Vec<usize> = sample_indices(&mut rng, pre.len(), n_change).into_vec();
    gone.sort_unstable();
    let mut post: Vec<(Rect, [f64; 3])> = pre
        .iter()
        .enumerate()
        .filter(|(i, _)| !gone.contains(i))
        .map(|(_, p)| *p)
        .collect();
    let removed: Vec<Rect> = gone.iter().map(|&i| pre[i].0).collect();
    // New buildings avoid every pre-event footprint, so the change mask is
    // exactly the symmetric difference of the two footprint sets.
    let mut added = Vec::with_capacity(n_change);
    for _ in 0..n_change {
        let avoid: Vec<Rect> = pre_rects.iter().chain(added.iter()).copied().collect();
        match place(size, &avoid, &mut rng) {
            Some(r) => {
                added.push(r);
                post.push((r, roof_color(&mut rng)));
            }
            None => break,
        }
    }
    let post_rects: Vec<Rect> = post.iter().map(|p| p.0).collect();
    let changed: Vec<Rect> = removed.iter().chain(added.iter()).copied().collect();
    Ok(SynthScene {
        pre: pre_img,
        post: Some(render(size, &bg, &post)),
        mask: footprint(size, &changed),
        pre_rects,
        post_rects,
        removed,
        added,
    })
}

fn write_lines(path: &Path, ids: &[String]) -> Result<()> {
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `n_samples + n_val` scenes under `out_root` in the standard layout
/// and returns the train manifest.
pub fn generate_synthetic(spec: &SynthSpec, out_root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let image_dirs: &[&str] = match spec.task {
        Task::Ss => &["images"],
        Task::Cd => &["A", "B"],
    };
    for sub in image_dirs.iter().chain(["masks", "splits"].iter()) {
        let dir = out_root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let total = spec.n_samples + spec.n_val;
    let mut ids = Vec::with_capacity(total);
    for index in 0..total {
        let scene = synthesize_scene(spec, index)?;
        let id = SynthSpec::id(index);
        write_png(&out_root.join(image_dirs[0]).join(format!("{id}.png")), &scene.pre)?;
        if let Some(post) = &scene.post {
            write_png(&out_root.join("B").join(format!("{id}.png")), post)?;
        }
        let mask = Image8::new(spec.size, spec.size, 1, scene.mask);
        write_png(&out_root.join("masks").join(format!("{id}.png")), &mask)?;
        ids.push(id);
    }
    let splits = out_root.join("splits");
    write_lines(&splits.join("train.txt"), &ids[..spec.n_samples])?;
    write_lines(&splits.join("val.txt"), &ids[spec.n_samples..])?;
    write_lines(&splits.join("test.txt"), &ids[spec.n_samples..])?;

    let meta = DatasetMeta {
        num_classes: 2,
        class_weights: match spec.task {
            Task::Ss => ClassWeights::uniform(2),
            Task::Cd => ClassWeights::foreground_ratio(3.0)?,
        },
    };
    let meta_path = out_root.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    load_manifest(out_root, spec.task, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cd_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            task: Task::Cd,
            n_samples: 4,
            ..SynthSpec::default()
        }
    }

    fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SynthSpec { seed: 1, ..cd_spec(1) };
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(read_tree(a.path()), read_tree(b.path()));
    }

    #[test]
    fn round_trip_entry_count() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_samples: 5,
            n_val: 2,
            ..SynthSpec::default()
        };
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 5);
        assert_eq!(load_manifest(dir.path(), Task::Ss, Split::Val).unwrap().entries.len(), 2);
        let ds = super::super::Dataset::load(m).unwrap();
        let scene = synthesize_scene(&spec, 0).unwrap();
        assert_eq!(ds.samples[0].mask, scene.mask);
    }

    #[test]
    fn zero_change_fraction_means_empty_masks() {
        let spec = SynthSpec {
            change_fraction: 0.0,
            ..cd_spec(3)
        };
        for i in 0..6 {
            let s = synthesize_scene(&spec, i).unwrap();
            assert!(s.mask.iter().all(|&v| v == 0));
            assert_eq!(s.pre, s.post.unwrap());
        }
    }

    #[test]
    fn full_change_single_building() {
        let spec = SynthSpec {
            change_fraction: 1.0,
            n_buildings: (1, 1),
            ..cd_spec(9)
        };
        let s = synthesize_scene(&spec, 0).unwrap();
        assert_eq!(s.pre_rects.len(), 1);
        assert_eq!(s.removed, s.pre_rects);
        assert_eq!(s.added.len(), 1);
        let size = spec.size;
        for y in 0..size {
            for x in 0..size {
                let expect = s.pre_rects[0].contains(x, y) || s.added[0].contains(x, y);
                assert_eq!(s.mask[y * size + x] == 1, expect);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn change_mask_is_footprint_symmetric_difference(seed in 0u64..1000, frac in 0.0f64..=1.0) {
            let spec = SynthSpec { change_fraction: frac, ..cd_spec(seed) };
            let s = synthesize_scene(&spec, 0).unwrap();
            let pre = footprint(spec.size, &s.pre_rects);
            let post = footprint(spec.size, &s.post_rects);
            let xor: Vec<u8> = pre.iter().zip(&post).map(|(a, b)| a ^ b).collect();
            prop_assert_eq!(s.mask, xor);
        }
    }
}
