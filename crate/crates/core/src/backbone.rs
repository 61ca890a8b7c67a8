//! Compact convolutional encoder.
//!
//! Each block is conv ("same" padding) → ReLU → max-pool. The output of the
//! last block is kept as the attribution target; it is global-average-pooled
//! and projected to the embedding by a dense layer. There is no batch
//! normalization, so an embedding depends only on the parameters and the
//! image.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XFSLCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
}

impl ConvBlock {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        ConvBlock {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `(channels, height, width)`.
    pub input_size: (usize, usize, usize),
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: (1, 64, 64),
            conv_blocks: vec![
                ConvBlock::new(16, 3, 1, 2),
                ConvBlock::new(32, 3, 1, 2),
                ConvBlock::new(64, 3, 1, 2),
            ],
            embedding_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Shape `(C, h, w)` of the last block's output; errors if any block
    /// collapses the spatial extent below 1×1.
    pub fn activation_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input size {:?} has a zero extent", self.input_size)));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one conv block".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.out_channels == 0 || block.kernel == 0 || block.stride == 0 || block.pool == 0 {
                return Err(Error::Config(format!("block {i} has a zero field: {block:?}")));
            }
            let pad = block.kernel / 2;
            if h + 2 * pad < block.kernel || w + 2 * pad < block.kernel {
                return Err(Error::Config(format!("block {i}: kernel larger than {h}x{w} input")));
            }
            h = (h + 2 * pad - block.kernel) / block.stride + 1;
            w = (w + 2 * pad - block.kernel) / block.stride + 1;
            h /= block.pool;
            w /= block.pool;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "block {i} collapses the spatial extent below 1x1"
                )));
            }
            c = block.out_channels;
        }
        Ok((c, h, w))
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_c = self.input_size.0;
        for block in &self.conv_blocks {
            shapes.push(vec![block.out_channels, in_c, block.kernel, block.kernel]);
            shapes.push(vec![block.out_channels]);
            in_c = block.out_channels;
        }
        shapes.push(vec![self.embedding_dim, in_c]);
        shapes.push(vec![self.embedding_dim]);
        shapes
    }
}

/// Encoder parameters bound into a particular graph.
#[derive(Clone, Debug)]
pub struct BoundParams(pub Vec<Var>);

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, d]`.
    pub embedding: Var,
    /// `[B, C, h, w]`, the input of the global average pool.
    pub last_conv_activations: Var,
}

/// A single image encoded in its own graph.
#[derive(Debug)]
pub struct Encoded {
    pub graph: Graph,
    pub params: BoundParams,
    pub image: Var,
    pub output: EncoderOutput,
}

impl Encoded {
    pub fn embedding(&self) -> &[f64] {
        self.graph.value(self.output.embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_encoder(config: EncoderConfig) -> Result<Encoder> {
    config.activation_shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = config
        .param_shapes()
        .iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            t
        })
        .collect();
    Ok(Encoder { config, params })
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut self.params {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn activation_shape(&self) -> (usize, usize, usize) {
        self.config
            .activation_shape()
            .expect("validated at construction")
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| g.input(p.clone(), requires_grad))
                .collect(),
        )
    }

    /// Runs a `[B, C, H, W]` batch through the encoder inside `g`.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, images: Var) -> Result<EncoderOutput> {
        let (c, h, w) = self.config.input_size;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            let batch = shape.first().copied().unwrap_or(1);
            return Err(Error::shape("encoder input", &[batch, c, h, w], &shape));
        }
        let mut x = images;
        for (i, block) in self.config.conv_blocks.iter().enumerate() {
            let (wt, b) = (params.0[2 * i], params.0[2 * i + 1]);
            x = g.conv2d(x, wt, b, block.stride, block.kernel / 2)?;
            x = g.relu(x);
            if block.pool > 1 {
                x = g.maxpool2d(x, block.pool, block.pool)?;
            }
        }
        let last_conv_activations = x;
        let pooled = g.global_avg_pool(x)?;
        let n = params.0.len();
        let embedding = g.dense_affine(pooled, params.0[n - 2], params.0[n - 1])?;
        Ok(EncoderOutput {
            embedding,
            last_conv_activations,
        })
    }

    /// Encodes one `[C, H, W]` image in a fresh graph whose parameters and
    /// image both require gradients.
    pub fn encode(&self, image: &Tensor) -> Result<Encoded> {
        let (c, h, w) = self.config.input_size;
        if image.shape() != [c, h, w] {
            return Err(Error::shape("encode image", &[c, h, w], image.shape()));
        }
        let mut graph = Graph::new();
        let params = self.bind(&mut graph, true);
        let x = graph.input(image.clone().reshape(&[1, c, h, w])?, true);
        let output = self.forward(&mut graph, &params, x)?;
        Ok(Encoded {
            graph,
            params,
            image: x,
            output,
        })
    }

    /// Embeddings of a list of `[C, H, W]` images without gradient tracking.
    pub fn embed(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let x = g.constant(Tensor::stack(chunk)?);
            let enc = self.forward(&mut g, &params, x)?;
            let d = self.config.embedding_dim;
            out.extend(g.value(enc.embedding).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let flat = self.flat_params();
        let mut payload = Vec::with_capacity(flat.len() * 8);
        for v in &flat {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(16 + payload.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(config: EncoderConfig, bytes: &[u8]) -> Result<Encoder> {
        let mut encoder = init_encoder(config)?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing XFSLCKPT magic".into()));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if count != encoder.param_count() {
            return Err(Error::Checkpoint(format!(
                "holds {count} parameters, encoder config needs {}",
                encoder.param_count()
            )));
        }
        let end = 16 + count * 8;
        if bytes.len() != end + 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes, found {}",
                end + 4,
                bytes.len()
            )));
        }
        let payload = &bytes[16..end];
        let crc = u32::from_le_bytes(bytes[end..].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checkpoint("payload CRC mismatch".into()));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        encoder.set_flat_params(&flat)?;
        Ok(encoder)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(config: EncoderConfig, path: &Path) -> Result<Encoder> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Encoder::from_checkpoint_bytes(config, &bytes)
    }
}
