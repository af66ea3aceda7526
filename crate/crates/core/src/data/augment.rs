use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train-time data treatment. Flip and shift only apply to `C×H×W` samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub normalize: bool,
    pub hflip: bool,
    pub shift_px: usize,
}

impl Augmentation {
    pub fn validate_for(&self, sample_shape: &[usize]) -> Result<()> {
        if (self.hflip || self.shift_px > 0) && sample_shape.len() != 3 {
            return Err(Error::Config(format!(
                "hflip/shift need image-shaped samples (C×H×W), got {sample_shape:?}"
            )));
        }
        Ok(())
    }

    fn is_random(&self) -> bool {
        self.hflip || self.shift_px > 0
    }
}

/// Per-channel standardization statistics. For flat feature vectors each
/// feature is its own channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of one split, normally the training split.
    pub fn fit(split: &DatasetSplit) -> Result<Self> {
        split.require_non_empty("cannot fit normalization")?;
        let (n, c, m) = crate::engine::ops::channel_layout(split.inputs.shape());
        let d = split.inputs.data();
        let count = (n * m) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = || (0..n).flat_map(move |b| d[(b * c + ch) * m..(b * c + ch + 1) * m].iter());
            let mu = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean[ch] = mu;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, split: &DatasetSplit) -> Result<DatasetSplit> {
        let (_, c, _) = crate::engine::ops::channel_layout(split.inputs.shape());
        if c != self.mean.len() {
            return Err(Error::shape(
                "normalization",
                format!("{} channels, statistics for {}", c, self.mean.len()),
            ));
        }
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        Ok(DatasetSplit {
            inputs: crate::engine::ops::channel_affine(&split.inputs, &scale, &shift),
            labels: split.labels.clone(),
            classes: split.classes,
            normalization: Some(self.clone()),
        })
    }
}

/// Mirrors the selected images along their width axis.
pub fn hflip(batch: &mut Tensor, mask: &[bool]) {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let item = c * h * w;
    let data = batch.data_mut();
    for (b, _) in mask.iter().enumerate().filter(|(_, &f)| f) {
        for row in data[b * item..(b + 1) * item].chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Translates each image by `(dy, dx)` pixels, filling with zeros.
pub fn shift(batch: &mut Tensor, offsets: &[(isize, isize)]) {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let item = c * h * w;
    let data = batch.data_mut();
    for (b, &(dy, dx)) in offsets.iter().enumerate() {
        if dy == 0 && dx == 0 {
            continue;
        }
        let src = data[b * item..(b + 1) * item].to_vec();
        let dst = &mut data[b * item..(b + 1) * item];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = (i as isize - dy, j as isize - dx);
                    dst[(ch * h + i) * w + j] = if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        src[(ch * h + si as usize) * w + sj as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Applies random flip/shift to a batch, drawing from `rng`.
pub fn augment_batch(batch: &mut Tensor, cfg: &Augmentation, rng: &mut ChaCha8Rng) {
    let n = batch.batch();
    if cfg.hflip {
        let mask: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        hflip(batch, &mask);
    }
    if cfg.shift_px > 0 {
        let k = cfg.shift_px as i64;
        let offsets: Vec<(isize, isize)> = (0..n)
            .map(|_| {
                let dy = rng.random_range(-k..=k) as isize;
                let dx = rng.random_range(-k..=k) as isize;
                (dy, dx)
            })
            .collect();
        shift(batch, &offsets);
    }
}

/// One epoch of shuffled (and optionally augmented) mini-batches.
///
/// The order is a Fisher–Yates permutation seeded from `(seed, epoch)`;
/// augmentation draws from a separate stream with the same derivation.
pub struct BatchStream<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Option<&'a Augmentation>,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        split: &'a DatasetSplit,
        batch_size: usize,
        augment: Option<&'a Augmentation>,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if let Some(a) = augment {
            a.validate_for(split.sample_shape())?;
        }
        let epoch_seed = crate::mix_seed(seed, crate::stream::SHUFFLE ^ epoch as u64);
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        Ok(BatchStream {
            split,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
            augment: augment.filter(|a| a.is_random()),
            rng: ChaCha8Rng::seed_from_u64(crate::mix_seed(epoch_seed, crate::stream::AUGMENT)),
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut x = self.split.inputs.select(idx);
        let y = idx.iter().map(|&i| self.split.labels[i]).collect();
        if let Some(cfg) = self.augment {
            augment_batch(&mut x, cfg, &mut self.rng);
        }
        Some((x, y))
    }
}
