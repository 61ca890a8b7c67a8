//! Agreement between heatmaps and expert masks.
//!
//! The soft Dice loss treats the heatmap as a fuzzy set (intersection is the
//! elementwise product) and is differentiable; hard Dice and IoU binarize
//! the heatmap first and count cells.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{grad_cam_batch, Heatmap, Target};
use crate::autodiff::{Graph, Var};
use crate::backbone::Encoder;
use crate::error::{Error, Result};
use crate::fewshot::{PrototypeSet, Sample};
use crate::tensor::Tensor;

/// Binary region-of-interest mask, one byte (0 or 1) per cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Config(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.to_f64()).expect("mask dims are nonzero")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub smoothing_eps: f64,
    pub binarize_threshold: f64,
    pub tau: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            smoothing_eps: 1.0,
            binarize_threshold: 0.5,
            tau: 0.4,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_eps > 0.0) {
            return Err(Error::Config("smoothing_eps must be positive".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn check_len(values: &[f64], mask: &Mask) -> Result<()> {
    if values.len() != mask.data.len() {
        return Err(Error::shape("heatmap vs mask", &[mask.height, mask.width], &[values.len()]));
    }
    Ok(())
}

/// `1 - (2·Σ(G⊙M) + ε) / (ΣG + ΣM + ε)`.
pub fn soft_dice_loss(heatmap: &[f64], mask: &Mask, eps: f64) -> Result<f64> {
    check_len(heatmap, mask)?;
    let inter: f64 = heatmap.iter().zip(&mask.data).map(|(g, &m)| g * f64::from(m)).sum();
    let total: f64 = heatmap.iter().sum();
    Ok(1.0 - (2.0 * inter + eps) / (total + mask.count() as f64 + eps))
}

/// Graph version of [`soft_dice_loss`]; `heatmap` may have any shape with
/// `H·W` elements.
pub fn soft_dice_loss_node(g: &mut Graph, heatmap: Var, mask: &Mask, eps: f64) -> Result<Var> {
    let n = mask.height * mask.width;
    let flat = g.reshape(heatmap, &[n])?;
    let m = g.constant(Tensor::vector(mask.to_f64()));
    let prod = g.mul(flat, m)?;
    let inter = g.sum(prod);
    let total = g.sum(flat);
    let twice = g.scalar_mul(inter, 2.0);
    let num = g.add_scalar(twice, eps);
    let den = g.add_scalar(total, mask.count() as f64 + eps);
    let ratio = g.div(num, den)?;
    let neg = g.scalar_mul(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Binarization used by every hard metric.
pub fn binarize(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold).collect()
}

/// `(|A ∩ B|, |A|, |B|)` for a binarized heatmap against a mask.
pub fn overlap_counts(heatmap: &[f64], mask: &Mask, threshold: f64) -> Result<(usize, usize, usize)> {
    check_len(heatmap, mask)?;
    let bin = binarize(heatmap, threshold);
    let inter = bin.iter().zip(&mask.data).filter(|(&b, &m)| b && m == 1).count();
    let a = bin.iter().filter(|&&b| b).count();
    Ok((inter, a, mask.count()))
}

fn dice_from_counts(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

fn iou_from_counts(inter: usize, a: usize, b: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|G∩M| / (|G| + |M|)` after binarizing at `threshold`; two empty sets
/// score 1.
pub fn hard_dice(heatmap: &[f64], mask: &Mask, threshold: f64) -> Result<f64> {
    let (i, a, b) = overlap_counts(heatmap, mask, threshold)?;
    Ok(dice_from_counts(i, a, b))
}

/// `|G∩M| / |G∪M|` after binarizing at `threshold`; two empty sets score 1.
pub fn binary_iou(heatmap: &[f64], mask: &Mask, threshold: f64) -> Result<f64> {
    let (i, a, b) = overlap_counts(heatmap, mask, threshold)?;
    Ok(iou_from_counts(i, a, b))
}

/// Fraction of `samples` whose detached Grad-CAM at the true class reaches a
/// hard Dice of at least `tau` against the mask.
pub fn h_aligned_fraction(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    samples: &[Sample],
    tau: f64,
    threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("h_aligned_fraction over an empty dataset".into()));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cams = grad_cam_batch(encoder, prototypes, &images, &Target::Given(labels))?;
    let mut hits = 0usize;
    for (sample, cam) in samples.iter().zip(&cams) {
        if hard_dice(&cam.heatmap.values, sample.mask_or_err()?, threshold)? >= tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Seeded uniform permutation of `0..n` (Fisher-Yates).
pub fn cell_permutation(n: usize, rng_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    idx
}

/// Heatmap with its cells shuffled uniformly at random.
pub fn permute_heatmap(heatmap: &Heatmap, rng_seed: u64) -> Heatmap {
    let perm = cell_permutation(heatmap.values.len(), rng_seed);
    Heatmap {
        values: perm.iter().map(|&i| heatmap.values[i]).collect(),
        ..heatmap.clone()
    }
}
