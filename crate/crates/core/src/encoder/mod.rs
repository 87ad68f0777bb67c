//! Self-supervised convolutional autoencoder over fused depth-segmentation
//! maps. Only the encoder half is used at tracking time; its bottleneck is
//! the per-object depth-segmentation embedding.

mod checkpoint;
mod kernels;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use kernels::{BnBatchStats, LayerStats};
pub use model::{
    AdamMoments, Batch, EncoderState, ForwardCache, ForwardOutput, Gradients, Mode, Param, ReluGates, RunningStats,
};
pub use train::{EpochLoss, Objective, TrainReport, TrainingPair};

use crate::fusion::FusedObjectMap;
use crate::io::TensorError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("train-mode batch norm needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("fused map has an empty mask and cannot be embedded")]
    EmptyMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side length of the square input map.
    pub resolution: usize,
    /// Output channels of each encoder conv; the input has one channel.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bottleneck: usize,
    pub learning_rate: f64,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Trailing epochs that optimize only the bottleneck consistency term.
    pub bottleneck_only_epochs: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: vec![32, 64, 128],
            kernel: 4,
            stride: 2,
            padding: 1,
            bottleneck: 2048,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 12,
            bottleneck_only_epochs: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// R = 16, channels 1 -> 2 -> 4 -> 8, bottleneck 32.
    pub fn tiny() -> Self {
        Self { resolution: 16, channels: vec![2, 4, 8], bottleneck: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel plan {:?}", self.channels));
        }
        if self.bottleneck == 0 {
            return bad("bottleneck dimension must be at least 1".into());
        }
        if self.kernel == 0 || self.stride == 0 {
            return bad(format!("kernel {} / stride {} / padding {}", self.kernel, self.stride, self.padding));
        }
        // every conv must map side -> side / stride exactly so the decoder mirrors it
        let mut side = self.resolution;
        for _ in &self.channels {
            if side == 0 || !side.is_multiple_of(self.stride) || side + 2 * self.padding < self.kernel {
                return bad(format!(
                    "resolution {} is not divisible through {} layers",
                    self.resolution,
                    self.channels.len()
                ));
            }
            let out = (side + 2 * self.padding - self.kernel) / self.stride + 1;
            if out != side / self.stride || (out - 1) * self.stride + self.kernel != side + 2 * self.padding {
                return bad(format!(
                    "kernel {} / stride {} / padding {} does not halve side {side} exactly",
                    self.kernel, self.stride, self.padding
                ));
            }
            side = out;
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.bottleneck_only_epochs > self.epochs {
            return bad(format!(
                "{} bottleneck-only epochs exceed {} epochs",
                self.bottleneck_only_epochs, self.epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum)
            || self.bn_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return bad("batch-norm momentum must lie in [0, 1] and eps must be positive".into());
        }
        Ok(())
    }
}

/// Reconstruction, bottleneck-consistency and total loss of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub recon: f64,
    pub bottleneck: f64,
    pub total: f64,
}

/// `recon` is the batch mean of per-sample squared error sums, `bottleneck`
/// the pair mean of squared bottleneck distances, `total` their sum.
pub fn loss_total(
    f: &[f64],
    f_hat: &[f64],
    sample_len: usize,
    b_prev: &[f64],
    b_curr: &[f64],
    dim: usize,
) -> Result<Losses, EncoderError> {
    if f.len() != f_hat.len() || sample_len == 0 || !f.len().is_multiple_of(sample_len) {
        return Err(EncoderError::ShapeMismatch(format!("maps of {} and {} values", f.len(), f_hat.len())));
    }
    if b_prev.len() != b_curr.len() || dim == 0 || !b_prev.len().is_multiple_of(dim) {
        return Err(EncoderError::ShapeMismatch(format!(
            "bottlenecks of {} and {} values",
            b_prev.len(),
            b_curr.len()
        )));
    }
    if f.iter().chain(f_hat).any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite("reconstruction loss input"));
    }
    if b_prev.iter().chain(b_curr).any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite("bottleneck loss input"));
    }
    let samples = f.len() / sample_len;
    let pairs = b_prev.len() / dim;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let recon = if samples == 0 {
        0.0
    } else {
        f.chunks_exact(sample_len).zip(f_hat.chunks_exact(sample_len)).map(|(a, b)| sq(a, b)).sum::<f64>()
            / samples as f64
    };
    let bottleneck = if pairs == 0 {
        0.0
    } else {
        b_prev.chunks_exact(dim).zip(b_curr.chunks_exact(dim)).map(|(a, b)| sq(a, b)).sum::<f64>() / pairs as f64
    };
    Ok(Losses { recon, bottleneck, total: recon + bottleneck })
}

/// Depth-segmentation embedding: the encoder bottleneck of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.0, &other.0)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

impl EncoderState {
    /// Adam with bias-corrected moments. Parameters whose gradient is `None`
    /// keep their values and moments.
    pub fn adam_step(&mut self, grads: &Gradients) {
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let lr = self.config().learning_rate;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.adam.m[i], &mut self.adam.v[i]);
            for (((p, g), m), v) in self.params[i].value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Eval-mode bottleneck of one fused map.
    pub fn embed(&self, map: &FusedObjectMap) -> Result<Embedding, EncoderError> {
        Ok(self.embed_many(std::slice::from_ref(map))?.pop().unwrap())
    }

    /// Eval-mode bottlenecks; samples do not interact in eval mode.
    pub fn embed_many(&self, maps: &[FusedObjectMap]) -> Result<Vec<Embedding>, EncoderError> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        if maps.iter().any(|m| m.empty_mask) {
            return Err(EncoderError::EmptyMask);
        }
        let res = self.config().resolution;
        let batch = Batch::from_images(res, maps.iter().map(|m| m.values.data()))?;
        let b = self.encode_batch(&batch, Mode::Eval)?;
        let dim = self.config().bottleneck;
        Ok(b.chunks_exact(dim).map(|c| Embedding(c.to_vec())).collect())
    }
}
