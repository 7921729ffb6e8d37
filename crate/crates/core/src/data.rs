//! Image classification datasets and class-wise task splits.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Images in NCHW layout with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn select(&self, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
        (
            self.images.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Subset keeping only `classes`, relabelled to their position in that list.
    pub fn restrict(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let (images, labels) = self.select(&idx);
        let labels = labels
            .into_iter()
            .map(|l| classes.iter().position(|&c| c == l).unwrap())
            .collect();
        Dataset { images, labels, num_classes: classes.len() }
    }

    /// Deterministic mini-batches covering the dataset once in shuffled order.
    pub fn batches(&self, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Parametric generator of class-conditional images: each class has a smooth random prototype
/// per channel; samples are randomly shifted, contrast-jittered, noisy copies of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImages {
    pub num_classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum cyclic shift in pixels along each spatial axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticImages {
    fn default() -> Self {
        Self { num_classes: 20, per_class: 60, shape: [3, 8, 8], noise: 0.6, max_shift: 1, seed: 0 }
    }
}

impl SyntheticImages {
    pub fn generate(&self) -> Result<Dataset> {
        let [c, h, w] = self.shape;
        if self.num_classes == 0 || self.per_class == 0 || c * h * w == 0 {
            return Err(Error::Dataset("synthetic dataset needs classes, samples and pixels".into()));
        }
        let mut rng = rng::seeded(self.seed);
        let mut protos = Array4::<f32>::zeros((self.num_classes, c, h, w));
        for k in 0..self.num_classes {
            for ch in 0..c {
                let waves: Vec<[f32; 4]> = (0..3)
                    .map(|_| {
                        [
                            rng.random_range(0.5..2.5f32),
                            rng.random_range(0.5..2.5f32),
                            rng.random_range(0.0..std::f32::consts::TAU),
                            rng.random_range(-1.0..1.0f32),
                        ]
                    })
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (y as f32 / h as f32, x as f32 / w as f32);
                        protos[[k, ch, y, x]] = waves
                            .iter()
                            .map(|[fy, fx, ph, a]| a * (std::f32::consts::TAU * (fy * u + fx * v) + ph).sin())
                            .sum();
                    }
                }
            }
        }
        let n = self.num_classes * self.per_class;
        let mut images = Array4::<f32>::zeros((n, c, h, w));
        let mut labels = Vec::with_capacity(n);
        let noise = Normal::new(0.0, self.noise.max(0.0) as f32).unwrap();
        let shift = self.max_shift as i64;
        for i in 0..n {
            let k = i % self.num_classes;
            let (dy, dx) = (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift));
            let gain = rng.random_range(0.7..1.3f32);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                        let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                        images[[i, ch, y, x]] = gain * protos[[k, ch, sy, sx]] + noise.sample(&mut rng);
                    }
                }
            }
            labels.push(k);
        }
        Ok(Dataset { images, labels, num_classes: self.num_classes })
    }
}

/// Loads a folder of class folders. Class ids follow the sorted folder names; images are resized
/// to the target height/width, converted to 1 or 3 channels and centred to `[-0.5, 0.5]`.
pub fn load_image_folder(root: &Path, shape: [usize; 3]) -> Result<Dataset> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Dataset(format!("image folders support 1 or 3 channels, got {c}")));
    }
    let mut classes: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class folders", root.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?
                .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
            if c == 3 {
                let rgb = img.to_rgb8();
                for ch in 0..3 {
                    pixels.extend(rgb.pixels().map(|p| p.0[ch] as f32 / 255.0 - 0.5));
                }
            } else {
                pixels.extend(img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0 - 0.5));
            }
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{} contains no images", root.display())));
    }
    let images = Array4::from_shape_vec((labels.len(), c, h, w), pixels)
        .map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(Dataset { images, labels, num_classes: classes.len() })
}

/// Assignment of classes to class-disjoint splits, and of splits to meta-train / meta-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplitPlan {
    pub source: String,
    pub num_splits: usize,
    pub train_splits: usize,
    pub val_splits: usize,
    /// `class_to_split[c]` is the split holding class `c`.
    pub class_to_split: Vec<usize>,
    /// Fraction of each class's examples held out for validation inside a split.
    pub val_fraction: f64,
    pub seed: u64,
}

/// Materialized split: relabelled train and validation sets.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub split: usize,
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub val: Dataset,
}

/// Shuffles classes and deals them round-robin into `num_splits` class-disjoint splits whose
/// sizes differ by at most one. A fifth of the splits (rounded) are marked for meta-validation.
pub fn plan_splits(
    source: &str,
    num_classes: usize,
    num_splits: usize,
    seed: u64,
) -> Result<DatasetSplitPlan> {
    if num_splits == 0 || num_classes < num_splits {
        return Err(Error::Dataset(format!(
            "cannot split {num_classes} classes into {num_splits} class-disjoint splits"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut class_to_split = vec![0; num_classes];
    for (i, &c) in order.iter().enumerate() {
        class_to_split[c] = i % num_splits;
    }
    let val_splits = if num_splits > 1 {
        ((num_splits as f64 * 0.2).round() as usize).max(1)
    } else {
        0
    };
    Ok(DatasetSplitPlan {
        source: source.to_string(),
        num_splits,
        train_splits: num_splits - val_splits,
        val_splits,
        class_to_split,
        val_fraction: 0.1,
        seed,
    })
}

impl DatasetSplitPlan {
    pub fn classes_of(&self, split: usize) -> Vec<usize> {
        (0..self.class_to_split.len())
            .filter(|&c| self.class_to_split[c] == split)
            .collect()
    }

    pub fn is_meta_val(&self, split: usize) -> bool {
        split >= self.train_splits
    }

    /// Relabelled data of one split, with a per-class stratified train/validation partition.
    pub fn materialize(&self, dataset: &Dataset, split: usize) -> Result<TaskData> {
        if split >= self.num_splits {
            return Err(Error::Dataset(format!("split {split} out of range")));
        }
        let classes = self.classes_of(split);
        let mut rng = rng::seeded(rng::derive_seed(self.seed, &format!("examples/{split}")));
        let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
        for &c in &classes {
            let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let nval = ((idx.len() as f64 * self.val_fraction).round() as usize)
                .clamp(usize::from(idx.len() > 1), idx.len().saturating_sub(1));
            val_idx.extend_from_slice(&idx[..nval]);
            train_idx.extend_from_slice(&idx[nval..]);
        }
        let relabel = |idx: &[usize]| {
            let (images, labels) = dataset.select(idx);
            let labels = labels
                .into_iter()
                .map(|l| classes.iter().position(|&c| c == l).unwrap())
                .collect();
            Dataset { images, labels, num_classes: classes.len() }
        };
        let (train, val) = (relabel(&train_idx), relabel(&val_idx));
        if train.is_empty() || val.is_empty() {
            return Err(Error::Dataset(format!("split {split} has an empty partition")));
        }
        Ok(TaskData { split, classes, train, val })
    }
}

/// Standard-normal tensor of the given shape.
pub fn gaussian(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng))
}

/// Image at index `i` as a batch of one.
pub fn single(images: &Array4<f32>, i: usize) -> Array4<f32> {
    images.slice(s![i..i + 1, .., .., ..]).to_owned()
}
