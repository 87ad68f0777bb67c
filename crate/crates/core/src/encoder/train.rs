use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::LayerStats;
use super::model::{Batch, EncoderState, Gradients, Mode, ReluGates};
use super::{loss_total, EncoderError, Losses};

/// Fused maps of the same object in consecutive frames (`t-1`, `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub prev: Vec<f64>,
    pub curr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruction plus bottleneck consistency.
    Total,
    /// Bottleneck consistency alone; the decoder is frozen.
    BottleneckOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub objective: Objective,
    /// Pair-weighted means over the epoch's batches, measured on the
    /// forward pass preceding each update.
    pub recon: f64,
    pub bottleneck: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,objective,recon,bottleneck,total\n");
        for e in &self.epochs {
            let obj = match e.objective {
                Objective::Total => "total",
                Objective::BottleneckOnly => "bottleneck_only",
            };
            out.push_str(&format!("{},{obj},{},{},{}\n", e.epoch, e.recon, e.bottleneck, e.total));
        }
        out
    }
}

impl EncoderState {
    /// Loss of a pair batch and its gradients under `objective`. Both halves
    /// go through the shared network as one batch of `2n` samples.
    pub fn loss_and_gradients(
        &self,
        prev: &Batch,
        curr: &Batch,
        objective: Objective,
    ) -> Result<(Losses, Gradients, LayerStats), EncoderError> {
        let (losses, grads, stats, _) = self.pair_pass(prev, curr, objective, None)?;
        Ok((losses, grads, stats))
    }

    /// ReLU pattern of the joint pair batch at the current parameters.
    pub fn pair_relu_gates(&self, prev: &Batch, curr: &Batch) -> Result<ReluGates, EncoderError> {
        Ok(self.pair_pass(prev, curr, Objective::Total, None)?.3)
    }

    /// Pair loss with every ReLU held at `gates`.
    pub fn pair_loss_gated(&self, prev: &Batch, curr: &Batch, gates: &ReluGates) -> Result<Losses, EncoderError> {
        Ok(self.pair_pass(prev, curr, Objective::BottleneckOnly, Some(gates))?.0)
    }

    fn pair_pass(
        &self,
        prev: &Batch,
        curr: &Batch,
        objective: Objective,
        gates: Option<&ReluGates>,
    ) -> Result<(Losses, Gradients, LayerStats, ReluGates), EncoderError> {
        if prev.n != curr.n || prev.res != curr.res {
            return Err(EncoderError::ShapeMismatch(format!("pair halves of {} and {} samples", prev.n, curr.n)));
        }
        let n = prev.n;
        let mut data = prev.data.clone();
        data.extend_from_slice(&curr.data);
        let joint = Batch::new(2 * n, prev.res, data)?;
        let (out, cache, stats) = self.forward_gated(&joint, Mode::Train, gates)?;
        let cache = cache.expect("train mode yields a cache");
        let dim = self.config().bottleneck;
        let (b_prev, b_curr) = out.bottleneck.split_at(n * dim);
        let sample = prev.res * prev.res;
        let losses = loss_total(&joint.data, &out.reconstruction, sample, b_prev, b_curr, dim)?;

        let mut d_b = vec![0.0; 2 * n * dim];
        let kb = 2.0 / n as f64;
        for i in 0..n * dim {
            let d = kb * (b_prev[i] - b_curr[i]);
            d_b[i] = d;
            d_b[n * dim + i] = -d;
        }
        let d_recon = match objective {
            Objective::Total => {
                let kr = 2.0 / (2 * n) as f64;
                Some(out.reconstruction.iter().zip(&joint.data).map(|(r, f)| kr * (r - f)).collect::<Vec<_>>())
            }
            Objective::BottleneckOnly => None,
        };
        let grads = self.backward(&cache, &d_b, d_recon.as_deref());
        Ok((losses, grads, stats, cache.relu_gates()))
    }

    /// One optimizer step on a pair batch; returns the pre-update losses.
    pub fn train_step(&mut self, prev: &Batch, curr: &Batch, objective: Objective) -> Result<Losses, EncoderError> {
        let (losses, grads, stats) = self.loss_and_gradients(prev, curr, objective)?;
        self.update_running(&stats);
        self.adam_step(&grads);
        Ok(losses)
    }

    /// Full schedule: `epochs - bottleneck_only_epochs` epochs on the total
    /// loss, then the bottleneck term alone. Pair order is reshuffled every
    /// epoch from a generator seeded with `seed`.
    pub fn train(&mut self, pairs: &[TrainingPair], seed: u64) -> Result<TrainReport, EncoderError> {
        if pairs.is_empty() {
            return Err(EncoderError::EmptyDataset);
        }
        let cfg = self.config().clone();
        let res = cfg.resolution;
        for p in pairs {
            if p.prev.len() != res * res || p.curr.len() != res * res {
                return Err(EncoderError::ShapeMismatch(format!("training pair is not {res} x {res}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut report = TrainReport::default();
        for epoch in 1..=cfg.epochs {
            let objective = if epoch > cfg.epochs - cfg.bottleneck_only_epochs {
                Objective::BottleneckOnly
            } else {
                Objective::Total
            };
            order.shuffle(&mut rng);
            let mut acc = Losses { recon: 0.0, bottleneck: 0.0, total: 0.0 };
            for chunk in order.chunks(cfg.batch_size) {
                let prev = Batch::from_images(res, chunk.iter().map(|&i| pairs[i].prev.as_slice()))?;
                let curr = Batch::from_images(res, chunk.iter().map(|&i| pairs[i].curr.as_slice()))?;
                let l = self.train_step(&prev, &curr, objective)?;
                let w = chunk.len() as f64;
                acc.recon += l.recon * w;
                acc.bottleneck += l.bottleneck * w;
                acc.total += l.total * w;
            }
            let n = pairs.len() as f64;
            report.epochs.push(EpochLoss {
                epoch,
                objective,
                recon: acc.recon / n,
                bottleneck: acc.bottleneck / n,
                total: acc.total / n,
            });
        }
        Ok(report)
    }
}
