//! Dataset ingestion, normalization, tiling and the synthetic scene generator.
//!
//! On-disk layout (all PNG, 8-bit):
//!
//! ```text
//! root/images/{id}.png  root/masks/{id}.png            segmentation
//! root/A/{id}.png  root/B/{id}.png  root/masks/{id}.png change detection
//! root/splits/{train|val|test}.txt                     one id per line
//! root/meta.json                                       optional class metadata
//! ```

pub mod image_io;
mod synth;

pub use synth::{generate_synthetic, synthesize_scene, Rect, SynthScene, SynthSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::objectives::ClassWeights;
use crate::schedule::swap_pair;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result, Task};
use image_io::{read_png, Image8};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

/// Maps 8-bit intensities to `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize<I: Copy + Into<i64>>(shape: &[usize], values: &[I]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let v: i64 = v.into();
        if !(0..=255).contains(&v) {
            return Err(Error::Data(format!("pixel {i} has value {v} outside [0, 255]")));
        }
        data.push(v as f32 / 127.5 - 1.0);
    }
    Tensor::try_from_vec(shape, data)
}

/// Inverse of [`normalize`] on the 256-level grid, rounding and clamping.
pub fn denormalize<F: Float>(image: &Tensor<F>) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|v| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Tile origins along one axis: a non-overlapping grid plus a final tile
/// flush with the far edge when `dim` is not a multiple of `target`.
pub fn tile_offsets(dim: usize, target: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (0..dim / target).map(|i| i * target).collect();
    if dim % target != 0 {
        offsets.push(dim - target);
    }
    offsets
}

/// Cuts a `[C, H, W]` image into `target x target` tiles in row-major order.
pub fn center_crop_or_tile<F: Float>(image: &Tensor<F>, target: usize) -> Result<Vec<Tensor<F>>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < target || w < target || target == 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {target}x{target} crop; pad it first"
        )));
    }
    let mut crops = Vec::new();
    for &y0 in &tile_offsets(h, target) {
        for &x0 in &tile_offsets(w, target) {
            let mut data = Vec::with_capacity(c * target * target);
            for ch in 0..c {
                for y in y0..y0 + target {
                    let row = (ch * h + y) * w;
                    data.extend_from_slice(&image.data()[row + x0..row + x0 + target]);
                }
            }
            crops.push(Tensor::from_vec(&[c, target, target], data));
        }
    }
    Ok(crops)
}

/// One supervised example: one image (SS) or an ordered pre/post pair (CD),
/// each `[C, H, W]` in `[-1, 1]`, plus an `H x W` label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub images: Vec<Tensor<f32>>,
    pub mask: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, task: Task, images: Vec<Tensor<f32>>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        let expected = match task {
            Task::Ss => 1,
            Task::Cd => 2,
        };
        if images.len() != expected {
            return Err(Error::Data(format!("{id}: {task} sample needs {expected} image(s), got {}", images.len())));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 || images.iter().any(|im| im.shape() != shape.as_slice()) {
            return Err(Error::Shape(format!("{id}: images must share one [C, H, W] shape")));
        }
        if mask.len() != shape[1] * shape[2] {
            return Err(Error::Shape(format!(
                "{id}: mask has {} pixels, images are {}x{}",
                mask.len(),
                shape[1],
                shape[2]
            )));
        }
        Ok(Self {
            id,
            task,
            images,
            mask,
            height: shape[1],
            width: shape[2],
        })
    }

    /// Clean model input at `t = 0`: the image, or the pair stacked as `[x_t1, x_t2]`.
    pub fn input(&self) -> Tensor<f32> {
        match self.task {
            Task::Ss => self.images[0].clone(),
            Task::Cd => {
                let (a, b) = (&self.images[0], &self.images[1]);
                let mut data = Vec::with_capacity(a.numel() * 2);
                data.extend_from_slice(a.data());
                data.extend_from_slice(b.data());
                let s = a.shape();
                Tensor::from_vec(&[2 * s[0], s[1], s[2]], data)
            }
        }
    }

    /// Reversed pair `[x_t2, x_t1]` (CD) or the image itself (SS).
    pub fn endpoint(&self) -> Tensor<f32> {
        match self.task {
            Task::Ss => self.input(),
            Task::Cd => swap_pair(&self.input()).expect("pair input has even channels"),
        }
    }

    pub fn mask_usize(&self) -> Vec<usize> {
        self.mask.iter().map(|&v| v as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub images: Vec<PathBuf>,
    pub mask: PathBuf,
}

/// Optional `meta.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub class_weights: ClassWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub task: Task,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub class_weights: ClassWeights,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn list_ids(set: impl IntoIterator<Item = String>) -> String {
    set.into_iter().collect::<Vec<_>>().join(", ")
}

/// Enumerates one split of a dataset root. Entries are sorted by id.
pub fn load_manifest(root: &Path, task: Task, split: Split) -> Result<DatasetManifest> {
    let image_dirs: Vec<PathBuf> = match task {
        Task::Ss => vec![root.join("images")],
        Task::Cd => vec![root.join("A"), root.join("B")],
    };
    let masks_dir = root.join("masks");
    for dir in image_dirs.iter().chain(std::iter::once(&masks_dir)) {
        if !dir.is_dir() {
            return Err(Error::Manifest(format!("missing directory {}", dir.display())));
        }
    }
    let image_ids = png_ids(&image_dirs[0])?;
    if task == Task::Cd {
        let b_ids = png_ids(&image_dirs[1])?;
        let unmatched: BTreeSet<String> = image_ids.symmetric_difference(&b_ids).cloned().collect();
        if !unmatched.is_empty() {
            return Err(Error::Manifest(format!("ids present in only one of A/ and B/: {}", list_ids(unmatched))));
        }
    }
    let mask_ids = png_ids(&masks_dir)?;
    let unmasked: Vec<String> = image_ids.difference(&mask_ids).cloned().collect();
    if !unmasked.is_empty() {
        return Err(Error::Manifest(format!("images without masks: {}", list_ids(unmasked))));
    }

    let split_file = root.join("splits").join(format!("{split}.txt"));
    let text = fs::read_to_string(&split_file)
        .map_err(|e| Error::Manifest(format!("cannot read split file {}: {e}", split_file.display())))?;
    let wanted: BTreeSet<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if wanted.is_empty() {
        return Err(Error::EmptyDataset(format!("split '{split}' of {} lists no ids", root.display())));
    }
    let missing: Vec<String> = wanted.difference(&image_ids).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("split '{split}' names ids without images: {}", list_ids(missing))));
    }

    let meta_path = root.join("meta.json");
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", meta_path.display())))?;
        if meta.class_weights.num_classes() != meta.num_classes {
            return Err(Error::Manifest(format!(
                "{}: {} class weights for {} classes",
                meta_path.display(),
                meta.class_weights.num_classes(),
                meta.num_classes
            )));
        }
        meta
    } else {
        DatasetMeta {
            num_classes: 2,
            class_weights: ClassWeights::uniform(2),
        }
    };

    let entries = wanted
        .into_iter()
        .map(|id| ManifestEntry {
            images: image_dirs.iter().map(|d| d.join(format!("{id}.png"))).collect(),
            mask: masks_dir.join(format!("{id}.png")),
            id,
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        task,
        split,
        entries,
        num_classes: meta.num_classes,
        class_weights: meta.class_weights,
    })
}

fn read_rgb(path: &Path) -> Result<Image8> {
    let img = read_png(path)?;
    if img.channels != 3 {
        return Err(Error::Data(format!("{}: expected an RGB image, got {} channels", path.display(), img.channels)));
    }
    Ok(img)
}

fn read_mask(path: &Path) -> Result<Image8> {
    let img = read_png(path)?;
    if img.channels != 1 {
        return Err(Error::Data(format!("{}: masks must be single-channel", path.display())));
    }
    Ok(img)
}

/// Reads one manifest entry from disk.
pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Sample> {
    let mut images = Vec::with_capacity(entry.images.len());
    for path in &entry.images {
        let img = read_rgb(path)?;
        images.push(normalize(&[3, img.height, img.width], &img.to_planar())?);
    }
    let mask = read_mask(&entry.mask)?;
    if let Some((index, &class)) = mask.pixels.iter().enumerate().find(|(_, &v)| v as usize >= manifest.num_classes) {
        return Err(Error::Label {
            index,
            class: class as usize,
            num_classes: manifest.num_classes,
        });
    }
    Sample::new(entry.id.clone(), manifest.task, images, mask.pixels)
}

/// A manifest with all samples resident in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| load_sample(&manifest, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn open(root: &Path, task: Task, split: Split) -> Result<Self> {
        Self::load(load_manifest(root, task, split)?)
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image_io::write_png;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let t = normalize(&[3], &[0u8, 255, 127]).unwrap();
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] as f64 - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((t.data()[2] + 0.003_921_6).abs() < 1e-6);
        assert!(matches!(normalize(&[2], &[3i32, 300]), Err(Error::Data(_))));
        assert!(matches!(normalize(&[1], &[-1i32]), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(values in prop::collection::vec(any::<u8>(), 1..64)) {
            let t = normalize(&[values.len()], &values).unwrap();
            prop_assert_eq!(denormalize(&t), values);
        }
    }

    #[test]
    fn tiling_examples() {
        let img = Tensor::<f32>::from_vec(&[1, 256, 256], (0..256 * 256).map(|v| v as f32).collect());
        let crops = center_crop_or_tile(&img, 256).unwrap();
        assert_eq!(crops, vec![img]);

        let big = Tensor::<f32>::from_vec(&[2, 512, 512], (0..2 * 512 * 512).map(|v| v as f32).collect());
        let crops = center_crop_or_tile(&big, 256).unwrap();
        assert_eq!(crops.len(), 4);
        // top-right tile starts at column 256
        assert_eq!(crops[1].data()[0], 256.0);
        assert_eq!(crops[2].data()[0], (256 * 512) as f32);
        let mut covered: Vec<f32> = crops.iter().flat_map(|c| c.data().iter().copied()).collect();
        covered.sort_by(f32::total_cmp);
        assert_eq!(covered, big.data());

        assert_eq!(tile_offsets(300, 256), vec![0, 44]);
        let odd = Tensor::<f32>::zeros(&[3, 300, 300]);
        assert_eq!(center_crop_or_tile(&odd, 256).unwrap().len(), 4);
        let small = Tensor::<f32>::zeros(&[3, 100, 300]);
        assert!(matches!(center_crop_or_tile(&small, 256), Err(Error::Shape(m)) if m.contains("pad")));
    }

    fn write_rgb(path: &Path, v: u8) {
        write_png(path, &Image8::new(4, 4, 3, vec![v; 48])).unwrap();
    }

    fn write_mask(path: &Path) {
        write_png(path, &Image8::new(4, 4, 1, vec![0; 16])).unwrap();
    }

    fn ss_root(ids: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["images", "masks", "splits"] {
            fs::create_dir_all(root.join(sub)).unwrap();
        }
        for id in ids {
            write_rgb(&root.join("images").join(format!("{id}.png")), 10);
            write_mask(&root.join("masks").join(format!("{id}.png")));
        }
        let listing: String = ids.iter().rev().map(|id| format!("{id}\n")).collect();
        fs::write(root.join("splits/train.txt"), listing).unwrap();
        dir
    }

    #[test]
    fn well_formed_ss_root_sorted() {
        let dir = ss_root(&["c", "a", "b"]);
        let m = load_manifest(dir.path(), Task::Ss, Split::Train).unwrap();
        let ids: Vec<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m, load_manifest(dir.path(), Task::Ss, Split::Train).unwrap());
        let ds = Dataset::load(m).unwrap();
        assert_eq!(ds.samples[0].images[0].shape(), &[3, 4, 4]);
    }

    #[test]
    fn missing_mask_and_empty_split_are_reported() {
        let dir = ss_root(&["a", "b"]);
        fs::remove_file(dir.path().join("masks/b.png")).unwrap();
        let err = load_manifest(dir.path(), Task::Ss, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Manifest(ref m) if m.contains('b')), "{err}");

        let dir = ss_root(&["a"]);
        fs::write(dir.path().join("splits/val.txt"), "").unwrap();
        assert!(matches!(load_manifest(dir.path(), Task::Ss, Split::Val), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn cd_mismatched_pair_dirs_name_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["A", "B", "masks", "splits"] {
            fs::create_dir_all(root.join(sub)).unwrap();
        }
        for id in ["x1", "x2"] {
            write_rgb(&root.join("A").join(format!("{id}.png")), 1);
            write_mask(&root.join("masks").join(format!("{id}.png")));
        }
        write_rgb(&root.join("B/x1.png"), 2);
        fs::write(root.join("splits/train.txt"), "x1\nx2\n").unwrap();
        let err = load_manifest(root, Task::Cd, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Manifest(ref m) if m.contains("x2")), "{err}");
    }

    #[test]
    fn cd_sample_input_and_endpoint() {
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]);
        let s = Sample::new("p", Task::Cd, vec![a, b], vec![0, 1]).unwrap();
        assert_eq!(s.input().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.endpoint().data(), &[3.0, 4.0, 1.0, 2.0]);
        assert!(Sample::new("q", Task::Cd, vec![Tensor::zeros(&[1, 1, 2])], vec![0, 0]).is_err());
    }
}
