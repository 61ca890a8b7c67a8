//! Spatial attribution maps under the prototypical model.
//!
//! The class score for attribution is the pre-softmax logit
//! `-‖f(x) - c_target‖²`. Grad-CAM weights each channel of the last conv
//! block by the spatial mean of the score gradient, sums, applies ReLU,
//! upsamples bilinearly to the input grid and min-max normalizes.
//!
//! In differentiable mode ([`grad_cam_node`]) the channel weights and the
//! min/max normalization constants are computed from the current values and
//! baked into the graph as constants, so gradients reach the encoder only
//! through the activations. Backpropagating through the weights themselves
//! would need second-order derivatives.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Graph, Var};
use crate::backbone::{Encoded, Encoder};
use crate::error::{Error, Result};
use crate::fewshot::{ProbVector, PrototypeSet};
use crate::kernels;
use crate::synthdata::pgm;
use crate::tensor::Tensor;

/// Maps whose max − min falls at or below this are treated as flat.
const DEGENERATE_SPAN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    MinMaxUnit,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`.
    pub values: Vec<f64>,
    pub normalization: Normalization,
    /// Set when the map was flat before normalization; values are then all 0.
    pub degenerate: bool,
}

impl Heatmap {
    /// Min-max normalizes `values` into `[0, 1]`.
    pub fn normalized(height: usize, width: usize, values: &[f64]) -> Heatmap {
        let (min, max) = min_max(values);
        if max - min <= DEGENERATE_SPAN {
            return Heatmap {
                height,
                width,
                values: vec![0.0; values.len()],
                normalization: Normalization::MinMaxUnit,
                degenerate: true,
            };
        }
        let inv = 1.0 / (max - min);
        Heatmap {
            height,
            width,
            values: values.iter().map(|v| (v + -min) * inv).collect(),
            normalization: Normalization::MinMaxUnit,
            degenerate: false,
        }
    }

    /// Row-major index of the largest value (first on ties).
    pub fn peak(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionMethod {
    GradCam,
    IntegratedGradients,
}

impl AttributionMethod {
    /// Short name used in heatmap file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            AttributionMethod::GradCam => "gradcam",
            AttributionMethod::IntegratedGradients => "ig",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionMode {
    Differentiable,
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributionRequest {
    pub target_class: usize,
    pub method: AttributionMethod,
    pub mode: AttributionMode,
    pub ig_steps: usize,
}

/// An encoded image plus its class-score node.
#[derive(Debug)]
pub struct ScoreGraph {
    pub encoded: Encoded,
    pub score: Var,
}

/// Builds `-‖f(x) - c_target‖²` for a single `[C, H, W]` image.
pub fn class_score(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    image: &Tensor,
    target_class: usize,
) -> Result<ScoreGraph> {
    if target_class >= prototypes.n_way() {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            n_classes: prototypes.n_way(),
        });
    }
    if prototypes.dim() != encoder.config().embedding_dim {
        return Err(Error::Dimension {
            expected: encoder.config().embedding_dim,
            actual: prototypes.dim(),
        });
    }
    let mut encoded = encoder.encode(image)?;
    let g = &mut encoded.graph;
    let protos = g.constant(prototypes.to_tensor()?);
    let logits = g.neg_sq_euclidean(encoded.output.embedding, protos)?;
    let score = g.gather(logits, &[target_class])?;
    Ok(ScoreGraph { encoded, score })
}

/// Per-channel spatial mean of an activation gradient laid out `[C, h·w]`.
pub fn channel_weights(grad: &[f64], channels: usize) -> Vec<f64> {
    let area = grad.len() / channels;
    grad.chunks(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect()
}

/// `ReLU(Σ_c w_c · A_c)` on the activation grid, upsampled to
/// `out_h × out_w` and normalized. `activations` is `[C, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn gradcam_map(
    activations: &[f64],
    weights: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Heatmap> {
    if activations.len() != channels * h * w || weights.len() != channels {
        return Err(Error::shape(
            "gradcam activations",
            &[channels, h, w],
            &[weights.len(), activations.len()],
        ));
    }
    let mut raw = vec![0.0; h * w];
    kernels::gemm(1, channels, h * w, weights, false, activations, false, &mut raw, 0.0);
    for v in &mut raw {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    let rows = kernels::bilinear_taps(h, out_h);
    let cols = kernels::bilinear_taps(w, out_w);
    let up = kernels::bilinear_forward(&raw, 1, &rows, &cols, w, h);
    Ok(Heatmap::normalized(out_h, out_w, &up))
}

/// A differentiable Grad-CAM map inside a training graph.
#[derive(Clone, Copy, Debug)]
pub struct CamNode {
    /// `[H, W]`, values in `[0, 1]`.
    pub map: Var,
    pub degenerate: bool,
}

/// Differentiable Grad-CAM for row `row` of the batched activations `acts`
/// (`[B, C, h, w]`) with respect to the scalar `score`.
pub fn grad_cam_node(
    g: &mut Graph,
    acts: Var,
    row: usize,
    score: Var,
    out_h: usize,
    out_w: usize,
) -> Result<CamNode> {
    let shape = g.shape(acts).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("grad_cam_node activations", &[0, 0, 0, 0], &shape));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = c * h * w;
    let grads = g.grad_of(score, &[acts])?;
    let weights = channel_weights(&grads[0][row * plane..(row + 1) * plane], c);

    let a_row = g.select_rows(acts, &[row])?;
    let a_mat = g.reshape(a_row, &[c, h * w])?;
    let w_const = g.constant(Tensor::new(&[1, c], weights)?);
    let raw = g.matmul(w_const, a_mat)?;
    let raw = g.reshape(raw, &[h, w])?;
    let cam = g.relu(raw);
    let up = g.bilinear_upsample(cam, out_h, out_w)?;
    let (min, max) = min_max(g.value(up));
    if max - min <= DEGENERATE_SPAN {
        let zero = g.scalar_mul(up, 0.0);
        return Ok(CamNode {
            map: zero,
            degenerate: true,
        });
    }
    let shifted = g.add_scalar(up, -min);
    let map = g.scalar_mul(shifted, 1.0 / (max - min));
    Ok(CamNode {
        map,
        degenerate: false,
    })
}

/// Which class each attribution targets.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Predicted,
    Given(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    pub probs: ProbVector,
    pub target: usize,
    pub heatmap: Heatmap,
}

/// Detached Grad-CAM over many images, batched through the encoder. Also
/// returns each image's class probabilities.
pub fn grad_cam_batch(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    images: &[&Tensor],
    target: &Target,
) -> Result<Vec<CamResult>> {
    if let Target::Given(t) = target {
        if t.len() != images.len() {
            return Err(Error::Dimension {
                expected: images.len(),
                actual: t.len(),
            });
        }
    }
    if prototypes.dim() != encoder.config().embedding_dim {
        return Err(Error::Dimension {
            expected: encoder.config().embedding_dim,
            actual: prototypes.dim(),
        });
    }
    let chunk = 16;
    let batches: Vec<Vec<CamResult>> = images
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, batch)| {
            let targets = match target {
                Target::Predicted => None,
                Target::Given(t) => Some(&t[ci * chunk..ci * chunk + batch.len()]),
            };
            grad_cam_chunk(encoder, prototypes, batch, targets)
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

fn grad_cam_chunk(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    batch: &[&Tensor],
    targets: Option<&[usize]>,
) -> Result<Vec<CamResult>> {
    let n_way = prototypes.n_way();
    let (_, out_h, out_w) = encoder.config().input_size;
    let (c, h, w) = encoder.activation_shape();
    let plane = c * h * w;
    let mut g = Graph::new();
    let params = encoder.bind(&mut g, false);
    let x = g.constant(Tensor::stack(batch)?);
    let out = encoder.forward(&mut g, &params, x)?;
    let protos = g.constant(prototypes.to_tensor()?);
    let logits = g.neg_sq_euclidean(out.embedding, protos)?;
    let mut results = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let row = &g.value(logits)[b * n_way..(b + 1) * n_way];
        let probs = ProbVector {
            probs: softmax_row(row),
        };
        let t = targets.map_or_else(|| probs.argmax(), |t| t[b]);
        if t >= n_way {
            return Err(Error::LabelOutOfRange {
                label: t,
                n_classes: n_way,
            });
        }
        let score = g.gather(logits, &[b * n_way + t])?;
        let grads = g.grad_of(score, &[out.last_conv_activations])?;
        let weights = channel_weights(&grads[0][b * plane..(b + 1) * plane], c);
        let acts = &g.value(out.last_conv_activations)[b * plane..(b + 1) * plane];
        let heatmap = gradcam_map(acts, &weights, c, h, w, out_h, out_w)?;
        results.push(CamResult {
            probs,
            target: t,
            heatmap,
        });
    }
    Ok(results)
}

/// Detached Grad-CAM for one image.
pub fn grad_cam(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    image: &Tensor,
    target_class: usize,
) -> Result<Heatmap> {
    let mut out = grad_cam_batch(encoder, prototypes, &[image], &Target::Given(vec![target_class]))?;
    Ok(out.remove(0).heatmap)
}

/// Signed per-element attributions plus the channel-summed heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    pub signed: Vec<f64>,
    pub heatmap: Heatmap,
}

/// Integrated Gradients from the all-zero baseline with a midpoint Riemann
/// sum: `IG_i = x_i · mean_j ∂f/∂x_i(((j - 1/2) / steps) · x)`.
/// `score_grad` returns the score and its input gradient at a point.
pub fn integrated_gradients_with<F>(mut score_grad: F, image: &Tensor, steps: usize) -> Result<IgResult>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("integrated gradients image", &[1, 0, 0], shape));
    }
    let mut acc = vec![0.0; image.len()];
    for j in 1..=steps {
        let alpha = (j as f64 - 0.5) / steps as f64;
        let point = Tensor::new(shape, image.data().iter().map(|v| v * alpha).collect())?;
        let (_, grad) = score_grad(&point)?;
        if let Some((i, &v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                coordinate: i,
                value: v,
            });
        }
        for (a, gv) in acc.iter_mut().zip(&grad) {
            *a += gv;
        }
    }
    let signed: Vec<f64> = acc
        .iter()
        .zip(image.data())
        .map(|(a, x)| x * (a / steps as f64))
        .collect();
    let (h, w) = (shape[1], shape[2]);
    let mut grid = vec![0.0; h * w];
    for channel in signed.chunks(h * w) {
        for (g, v) in grid.iter_mut().zip(channel) {
            *g += v.abs();
        }
    }
    Ok(IgResult {
        signed,
        heatmap: Heatmap::normalized(h, w, &grid),
    })
}

/// Integrated Gradients of the class score for one image.
pub fn integrated_gradients_full(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    image: &Tensor,
    target_class: usize,
    steps: usize,
) -> Result<IgResult> {
    let mut sg = class_score(encoder, prototypes, image, target_class)?;
    let input = sg.encoded.image;
    let in_shape = sg.encoded.graph.shape(input).to_vec();
    integrated_gradients_with(
        |point| {
            let fed = point.clone().reshape(&in_shape)?;
            let g = &mut sg.encoded.graph;
            g.evaluate(&[(input, &fed)])?;
            let grads = g.grad_of(sg.score, &[input])?;
            Ok((g.scalar(sg.score), grads.into_iter().next().unwrap()))
        },
        image,
        steps,
    )
}

pub fn integrated_gradients(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    image: &Tensor,
    target_class: usize,
    steps: usize,
) -> Result<Heatmap> {
    Ok(integrated_gradients_full(encoder, prototypes, image, target_class, steps)?.heatmap)
}

/// Dispatches a request. Differentiable Grad-CAM returns the values of the
/// graph-built map; Integrated Gradients has no differentiable mode.
pub fn attribute(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    image: &Tensor,
    request: &AttributionRequest,
) -> Result<Heatmap> {
    match (request.method, request.mode) {
        (AttributionMethod::IntegratedGradients, AttributionMode::Differentiable) => Err(Error::Config(
            "integrated gradients is only available in detached mode".into(),
        )),
        (AttributionMethod::IntegratedGradients, AttributionMode::Detached) => {
            integrated_gradients(encoder, prototypes, image, request.target_class, request.ig_steps)
        }
        (AttributionMethod::GradCam, AttributionMode::Detached) => {
            grad_cam(encoder, prototypes, image, request.target_class)
        }
        (AttributionMethod::GradCam, AttributionMode::Differentiable) => {
            let mut sg = class_score(encoder, prototypes, image, request.target_class)?;
            let (_, h, w) = encoder.config().input_size;
            let acts = sg.encoded.output.last_conv_activations;
            let node = grad_cam_node(&mut sg.encoded.graph, acts, 0, sg.score, h, w)?;
            Ok(Heatmap {
                height: h,
                width: w,
                values: sg.encoded.graph.value(node.map).to_vec(),
                normalization: Normalization::MinMaxUnit,
                degenerate: node.degenerate,
            })
        }
    }
}

/// Writes `<dir>/<sample_id>.<method>.pgm`.
pub fn write_heatmap_pgm(
    dir: &Path,
    sample_id: &str,
    method: AttributionMethod,
    heatmap: &Heatmap,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{sample_id}.{}.pgm", method.file_tag()));
    pgm::write_pgm_unit(&path, heatmap.height, heatmap.width, &heatmap.values)?;
    Ok(path)
}
