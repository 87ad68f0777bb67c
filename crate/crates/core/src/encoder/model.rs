use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, BnBatchStats, BnCache, ConvGeom, LayerStats};
use super::{EncoderConfig, EncoderError};

/// Reconstruction, per-layer inputs, norm caches and batch stats of the decoder.
type DecodePass = (Vec<f64>, Vec<Vec<f64>>, Vec<Option<BnCache>>, LayerStats);

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `n` single-channel `res x res` images, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub res: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, res: usize, data: Vec<f64>) -> Result<Self, EncoderError> {
        if data.len() != n * res * res {
            return Err(EncoderError::ShapeMismatch(format!("{} values for {n} x {res} x {res}", data.len())));
        }
        Ok(Self { n, res, data })
    }

    pub fn from_images<'a>(res: usize, images: impl IntoIterator<Item = &'a [f64]>) -> Result<Self, EncoderError> {
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.len() != res * res {
                return Err(EncoderError::ShapeMismatch(format!(
                    "image of {} values, expected {}",
                    img.len(),
                    res * res
                )));
            }
            data.extend_from_slice(img);
            n += 1;
        }
        Ok(Self { n, res, data })
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.res * self.res;
        &self.data[i * len..(i + 1) * len]
    }
}

/// Gradients aligned with [`EncoderState::params`]. `None` marks a
/// parameter outside the current objective; the optimizer leaves it alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnLayer>,
    cin: usize,
    cout: usize,
    /// Geometry on the high-resolution side.
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearLayer {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Fixed wiring of parameter indices, derived from the config.
#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<ConvLayer>,
    enc_fc: LinearLayer,
    dec_fc: LinearLayer,
    /// Applied in order, lowest resolution first.
    dec: Vec<ConvLayer>,
    feat_channels: usize,
    feat_side: usize,
}

/// Autoencoder weights, batch-norm running statistics and optimizer state.
///
/// Encoder: `[conv 4x4/2 -> BN -> ReLU] x L -> flatten -> linear -> bottleneck`.
/// Decoder: `linear -> ReLU -> [deconv 4x4/2 -> BN -> ReLU] x (L-1) -> deconv`.
/// Convolutions followed by batch norm carry no bias since the norm removes it.
#[derive(Debug, Clone)]
pub struct EncoderState {
    config: EncoderConfig,
    layout: Layout,
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
    pub adam: AdamMoments,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Everything the backward pass needs from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    /// Input of every encoder conv, then the flattened features.
    enc_inputs: Vec<Vec<f64>>,
    enc_bn: Vec<BnCache>,
    bottleneck: Vec<f64>,
    /// Post-ReLU output of the decoder linear layer, then the input of every
    /// subsequent deconv.
    dec_inputs: Vec<Vec<f64>>,
    dec_bn: Vec<Option<BnCache>>,
}

/// Open/closed state of every ReLU unit of one forward pass, in network
/// order: encoder convs, decoder linear, normalized decoder deconvs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluGates(pub Vec<Vec<bool>>);

impl ForwardCache {
    pub fn relu_gates(&self) -> ReluGates {
        let open = |v: &Vec<f64>| v.iter().map(|&x| x > 0.0).collect();
        ReluGates(self.enc_inputs[1..].iter().chain(&self.dec_inputs).map(open).collect())
    }
}

fn relu(x: &mut [f64], gates: Option<&ReluGates>, slot: usize) {
    match gates {
        None => kernels::relu_inplace(x),
        Some(g) => {
            let g = &g.0[slot];
            assert_eq!(g.len(), x.len(), "gate pattern does not match the batch");
            x.iter_mut().zip(g).for_each(|(v, &open)| {
                if !open {
                    *v = 0.0
                }
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub n: usize,
    /// `n x bottleneck_dim`
    pub bottleneck: Vec<f64>,
    /// `n x 1 x res x res`
    pub reconstruction: Vec<f64>,
}

impl EncoderState {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, s, p) = (config.kernel, config.stride, config.padding);

        // uniform in +-1/sqrt(fan_in)
        let mut add = |params: &mut Vec<Param>, name: String, shape: Vec<usize>, fan_in: usize| -> usize {
            let len = shape.iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let value = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
            params.push(Param { name, shape, value });
            params.len() - 1
        };
        let bn = |params: &mut Vec<Param>, running: &mut Vec<RunningStats>, name: &str, c: usize| -> BnLayer {
            let gamma = params.len();
            params.push(Param { name: format!("{name}.gamma"), shape: vec![c], value: vec![1.0; c] });
            params.push(Param { name: format!("{name}.beta"), shape: vec![c], value: vec![0.0; c] });
            running.push(RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
            BnLayer { gamma, beta: gamma + 1, stats: running.len() - 1 }
        };

        let mut enc = Vec::new();
        let mut side = config.resolution;
        let mut cin = 1;
        for (l, &cout) in config.channels.iter().enumerate() {
            let geom = ConvGeom::new(cin, side, side, k, s, p);
            let weight = add(&mut params, format!("enc.conv{l}.weight"), vec![cout, cin, k, k], cin * k * k);
            let bn = bn(&mut params, &mut running, &format!("enc.bn{l}"), cout);
            enc.push(ConvLayer { weight, bias: None, bn: Some(bn), cin, cout, geom });
            side = geom.ho;
            cin = cout;
        }
        let feat_channels = cin;
        let flat = feat_channels * side * side;
        let b = config.bottleneck;
        let enc_fc = LinearLayer {
            weight: add(&mut params, "enc.fc.weight".into(), vec![b, flat], flat),
            bias: add(&mut params, "enc.fc.bias".into(), vec![b], flat),
            fan_in: flat,
            fan_out: b,
        };
        let dec_fc = LinearLayer {
            weight: add(&mut params, "dec.fc.weight".into(), vec![flat, b], b),
            bias: add(&mut params, "dec.fc.bias".into(), vec![flat], b),
            fan_in: b,
            fan_out: flat,
        };

        // mirror: deconv l maps channels[l] -> channels[l-1] (or 1 for l = 0)
        let mut dec = Vec::new();
        for l in (0..config.channels.len()).rev() {
            let cin = config.channels[l];
            let cout = if l == 0 { 1 } else { config.channels[l - 1] };
            let geom = enc[l].geom;
            let weight = add(&mut params, format!("dec.deconv{l}.weight"), vec![cin, cout, k, k], cout * k * k);
            let (bias, bn) = if l == 0 {
                (Some(add(&mut params, format!("dec.deconv{l}.bias"), vec![cout], cout * k * k)), None)
            } else {
                (None, Some(bn(&mut params, &mut running, &format!("dec.bn{l}"), cout)))
            };
            let geom = ConvGeom::new(cout, geom.h, geom.w, k, s, p);
            dec.push(ConvLayer { weight, bias, bn, cin, cout, geom });
        }

        let adam = AdamMoments {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
        };
        let layout = Layout { enc, enc_fc, dec_fc, dec, feat_channels, feat_side: side };
        Ok(Self { config, layout, params, running, adam })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Shape of the last encoder feature map: `(channels, side, side)`.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.layout.feat_channels, self.layout.feat_side, self.layout.feat_side)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].value
    }

    fn check_batch(&self, batch: &Batch, mode: Mode) -> Result<(), EncoderError> {
        if batch.res != self.config.resolution || batch.data.len() != batch.n * batch.res * batch.res {
            return Err(EncoderError::ShapeMismatch(format!(
                "batch of {} x {} x {} for resolution {}",
                batch.n, batch.res, batch.res, self.config.resolution
            )));
        }
        if mode == Mode::Train && batch.n < 2 {
            return Err(EncoderError::BatchTooSmall(batch.n));
        }
        Ok(())
    }

    fn bn_forward(
        &self,
        bn: &BnLayer,
        x: &[f64],
        channels: usize,
        plane: usize,
        mode: Mode,
    ) -> (Vec<f64>, Option<(BnCache, BnBatchStats)>) {
        let (gamma, beta) = (self.p(bn.gamma), self.p(bn.beta));
        match mode {
            Mode::Train => {
                let (y, cache, stats) = kernels::bn_forward_train(x, channels, plane, gamma, beta, self.config.bn_eps);
                (y, Some((cache, stats)))
            }
            Mode::Eval => {
                let rs = &self.running[bn.stats];
                (kernels::bn_forward_eval(x, channels, plane, gamma, beta, &rs.mean, &rs.var, self.config.bn_eps), None)
            }
        }
    }

    /// Encoder half only.
    fn encode(
        &self,
        batch: &Batch,
        mode: Mode,
        gates: Option<&ReluGates>,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<BnCache>, LayerStats) {
        let n = batch.n;
        let mut inputs = Vec::with_capacity(self.layout.enc.len() + 1);
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        let mut x = batch.data.clone();
        for (slot, layer) in self.layout.enc.iter().enumerate() {
            let g = &layer.geom;
            let y = kernels::conv_forward(g, layer.cout, self.p(layer.weight), None, &x, n);
            let bn = layer.bn.as_ref().expect("encoder convs are normalized");
            let (mut a, c) = self.bn_forward(bn, &y, layer.cout, g.col_cols(), mode);
            if let Some((cache, s)) = c {
                caches.push(cache);
                stats.push((bn.stats, s));
            }
            relu(&mut a, gates, slot);
            inputs.push(std::mem::replace(&mut x, a));
        }
        let fc = &self.layout.enc_fc;
        let b = kernels::linear_forward(&x, n, fc.fan_in, fc.fan_out, self.p(fc.weight), self.p(fc.bias));
        inputs.push(x);
        (b, inputs, caches, stats)
    }

    fn decode(&self, bottleneck: &[f64], n: usize, mode: Mode, gates: Option<&ReluGates>) -> DecodePass {
        let fc = &self.layout.dec_fc;
        let mut x = kernels::linear_forward(bottleneck, n, fc.fan_in, fc.fan_out, self.p(fc.weight), self.p(fc.bias));
        let first = self.layout.enc.len();
        relu(&mut x, gates, first);
        let mut inputs = Vec::with_capacity(self.layout.dec.len());
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        for (idx, layer) in self.layout.dec.iter().enumerate() {
            let g = &layer.geom;
            let bias = layer.bias.map(|i| self.p(i));
            let y = kernels::deconv_forward(g, layer.cin, self.p(layer.weight), bias, &x, n);
            let next = match &layer.bn {
                Some(bn) => {
                    let (mut a, c) = self.bn_forward(bn, &y, layer.cout, g.h * g.w, mode);
                    match c {
                        Some((cache, s)) => {
                            caches.push(Some(cache));
                            stats.push((bn.stats, s));
                        }
                        None => caches.push(None),
                    }
                    relu(&mut a, gates, first + 1 + idx);
                    a
                }
                None => {
                    caches.push(None);
                    y
                }
            };
            inputs.push(std::mem::replace(&mut x, next));
        }
        (x, inputs, caches, stats)
    }

    /// Forward pass without side effects. In train mode also returns the
    /// cache for [`EncoderState::backward`] and the batch statistics of
    /// every normalization, keyed by running-stats slot.
    pub fn forward_pure(
        &self,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(ForwardOutput, Option<ForwardCache>, LayerStats), EncoderError> {
        self.forward_gated(batch, mode, None)
    }

    /// [`EncoderState::forward_pure`] with every ReLU held at a given
    /// open/closed pattern, which makes the network smooth in its
    /// parameters around the point the pattern was taken from.
    pub fn forward_gated(
        &self,
        batch: &Batch,
        mode: Mode,
        gates: Option<&ReluGates>,
    ) -> Result<(ForwardOutput, Option<ForwardCache>, LayerStats), EncoderError> {
        self.check_batch(batch, mode)?;
        let n = batch.n;
        let (bottleneck, enc_inputs, enc_bn, mut stats) = self.encode(batch, mode, gates);
        let (reconstruction, dec_inputs, dec_bn, dec_stats) = self.decode(&bottleneck, n, mode, gates);
        stats.extend(dec_stats);
        let out = ForwardOutput { n, bottleneck: bottleneck.clone(), reconstruction };
        let cache =
            (mode == Mode::Train).then_some(ForwardCache { n, enc_inputs, enc_bn, bottleneck, dec_inputs, dec_bn });
        Ok((out, cache, stats))
    }

    /// Forward pass. Train mode folds the batch statistics into the running
    /// estimates with the configured momentum.
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<ForwardOutput, EncoderError> {
        let (out, _, stats) = self.forward_pure(batch, mode)?;
        self.update_running(&stats);
        Ok(out)
    }

    /// Bottleneck vectors only, no decoder work.
    pub fn encode_batch(&self, batch: &Batch, mode: Mode) -> Result<Vec<f64>, EncoderError> {
        self.check_batch(batch, mode)?;
        Ok(self.encode(batch, mode, None).0)
    }

    pub(crate) fn update_running(&mut self, stats: &[(usize, BnBatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, s) in stats {
            let rs = &mut self.running[*slot];
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..s.mean.len() {
                rs.mean[c] = (1.0 - m) * rs.mean[c] + m * s.mean[c];
                rs.var[c] = (1.0 - m) * rs.var[c] + m * s.var[c] * unbias;
            }
        }
    }

    /// Gradients of a scalar loss given its gradients with respect to the
    /// bottleneck and the reconstruction. `d_recon = None` means the loss
    /// does not depend on the decoder, whose parameters then get `None`.
    pub fn backward(&self, cache: &ForwardCache, d_bottleneck: &[f64], d_recon: Option<&[f64]>) -> Gradients {
        let n = cache.n;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let zero = |i: usize| vec![0.0; self.params[i].value.len()];
        let mut d_b = d_bottleneck.to_vec();

        if let Some(d_recon) = d_recon {
            let mut dy = d_recon.to_vec();
            for (idx, layer) in self.layout.dec.iter().enumerate().rev() {
                let g = &layer.geom;
                if let (Some(bn), Some(bcache)) = (&layer.bn, &cache.dec_bn[idx]) {
                    // dy is w.r.t. the post-ReLU output, which is the next layer's input
                    kernels::relu_backward_inplace(&mut dy, &cache.dec_inputs[idx + 1]);
                    let (mut dg, mut db) = (zero(bn.gamma), zero(bn.beta));
                    dy = kernels::bn_backward(&dy, bcache, layer.cout, g.h * g.w, self.p(bn.gamma), &mut dg, &mut db);
                    grads[bn.gamma] = Some(dg);
                    grads[bn.beta] = Some(db);
                }
                let mut dw = zero(layer.weight);
                let mut dbias = layer.bias.map(zero);
                dy = kernels::deconv_backward(
                    g,
                    layer.cin,
                    self.p(layer.weight),
                    &cache.dec_inputs[idx],
                    &dy,
                    n,
                    &mut dw,
                    dbias.as_deref_mut(),
                );
                grads[layer.weight] = Some(dw);
                if let (Some(i), Some(d)) = (layer.bias, dbias) {
                    grads[i] = Some(d);
                }
            }
            // dy is now w.r.t. the post-ReLU decoder linear output
            kernels::relu_backward_inplace(&mut dy, &cache.dec_inputs[0]);
            let fc = &self.layout.dec_fc;
            let (mut dw, mut db) = (zero(fc.weight), zero(fc.bias));
            let dx = kernels::linear_backward(
                &cache.bottleneck,
                &dy,
                n,
                fc.fan_in,
                fc.fan_out,
                self.p(fc.weight),
                &mut dw,
                &mut db,
            );
            grads[fc.weight] = Some(dw);
            grads[fc.bias] = Some(db);
            d_b.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }

        let fc = &self.layout.enc_fc;
        let (mut dw, mut db) = (zero(fc.weight), zero(fc.bias));
        let last = cache.enc_inputs.len() - 1;
        let mut dy = kernels::linear_backward(
            &cache.enc_inputs[last],
            &d_b,
            n,
            fc.fan_in,
            fc.fan_out,
            self.p(fc.weight),
            &mut dw,
            &mut db,
        );
        grads[fc.weight] = Some(dw);
        grads[fc.bias] = Some(db);

        for (idx, layer) in self.layout.enc.iter().enumerate().rev() {
            let g = &layer.geom;
            kernels::relu_backward_inplace(&mut dy, &cache.enc_inputs[idx + 1]);
            let bn = layer.bn.as_ref().unwrap();
            let (mut dg, mut dbeta) = (zero(bn.gamma), zero(bn.beta));
            dy = kernels::bn_backward(
                &dy,
                &cache.enc_bn[idx],
                layer.cout,
                g.col_cols(),
                self.p(bn.gamma),
                &mut dg,
                &mut dbeta,
            );
            grads[bn.gamma] = Some(dg);
            grads[bn.beta] = Some(dbeta);
            let mut dw = zero(layer.weight);
            dy = kernels::conv_backward(
                g,
                layer.cout,
                self.p(layer.weight),
                &cache.enc_inputs[idx],
                &dy,
                n,
                &mut dw,
                None,
            );
            grads[layer.weight] = Some(dw);
        }
        Gradients { grads }
    }
}
