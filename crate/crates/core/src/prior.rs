//! Denoising variational auto-encoder shape prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{shift_values, LogTsdfGrid, OccupancyGrid, LOG_TSDF_MAX};
use crate::model::{decode, encode, Architecture, DecoderOutput, LatentDistribution, ShapeSample};
use crate::nn::{AdamConfig, AdamState, Checkpoint, Mode, Network, Real, Tensor};
use crate::seed::derive_seed;

/// Occupancy probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionParams {
    pub flip_prob: f64,
    pub noise_var: f64,
}

impl CorruptionParams {
    pub const NONE: CorruptionParams = CorruptionParams { flip_prob: 0.0, noise_var: 0.0 };

    pub fn new(flip_prob: f64, noise_var: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_prob) || !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::Config(format!("invalid corruption p={flip_prob} var={noise_var}")));
        }
        Ok(CorruptionParams { flip_prob, noise_var })
    }
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams { flip_prob: 0.1, noise_var: 0.05 }
    }
}

/// A corrupted shape. The noisy logTSDF channel may leave the truncation
/// range, so it is kept as raw values rather than a [`LogTsdfGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSample {
    pub occupancy: OccupancyGrid,
    pub log_tsdf: Vec<f32>,
}

impl CorruptedSample {
    pub fn to_input<T: Real>(&self) -> Tensor<T> {
        let d = self.occupancy.dims();
        let mut data: Vec<T> =
            self.occupancy.values().iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        data.extend(self.log_tsdf.iter().map(|&v| T::from_f64(v as f64)));
        Tensor::from_vec(&[2, d.h, d.w, d.d], data).expect("sized from dims")
    }
}

/// Flips occupancy bits with probability `flip_prob` and adds zero-mean
/// Gaussian noise of variance `noise_var` to the logTSDF channel.
pub fn corrupt(y: &ShapeSample, cp: CorruptionParams, seed: u64) -> CorruptedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = cp.noise_var.sqrt();
    let occ = y
        .occupancy
        .values()
        .iter()
        .map(|&v| if cp.flip_prob > 0.0 && rng.random_bool(cp.flip_prob) { !v } else { v })
        .collect();
    let log_tsdf = y
        .log_tsdf
        .values()
        .iter()
        .map(|&v| {
            if std > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                (v as f64 + std * e) as f32
            } else {
                v
            }
        })
        .collect();
    CorruptedSample { occupancy: OccupancyGrid::from_values(y.dims(), occ).expect("same dims"), log_tsdf }
}

/// Shifts both channels by an integer offset; vacated voxels become empty
/// space (occupancy 0, logTSDF `ln 6`).
pub fn translate(y: &ShapeSample, offset: [i64; 3]) -> ShapeSample {
    let dims = y.dims();
    let occ = shift_values(dims, y.occupancy.values(), offset, false);
    let ltsdf = shift_values(dims, y.log_tsdf.values(), offset, LOG_TSDF_MAX as f32);
    ShapeSample {
        occupancy: OccupancyGrid::from_values(dims, occ).expect("same dims"),
        log_tsdf: LogTsdfGrid::from_values(dims, ltsdf).expect("values copied from a valid grid"),
    }
}

/// `z = mean + eps * exp(log_var / 2)`, `eps ~ N(0, I)`.
pub fn reparameterize(d: &LatentDistribution, seed: u64) -> Vec<f64> {
    let eps = standard_normal(d.len(), seed);
    reparameterize_with(d, &eps)
}

pub fn reparameterize_with(d: &LatentDistribution, eps: &[f64]) -> Vec<f64> {
    d.mean.iter().zip(&d.log_var).zip(eps).map(|((m, lv), e)| m + e * (0.5 * lv).exp()).collect()
}

pub fn standard_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `KL(N(mean, diag(exp(log_var))) || N(0, I))` in closed form.
pub fn kl_unit_gaussian(d: &LatentDistribution) -> f64 {
    0.5 * d.mean.iter().zip(&d.log_var).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Binary cross-entropy of a clamped probability.
#[inline]
pub fn bce(p: f64, target: bool) -> f64 {
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if target {
        -pc.ln()
    } else {
        -(1.0 - pc).ln()
    }
}

/// Derivative of [`bce`] w.r.t. `p`; zero where the clamp is active.
#[inline]
pub fn bce_grad(p: f64, target: bool) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    if target {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Summed occupancy BCE plus `1 / (2 sigma2)`-scaled squared logTSDF error.
pub fn reconstruction_loss(y: &ShapeSample, out: &DecoderOutput, sigma2: f64) -> Result<f64> {
    y.dims().ensure_same(&out.dims)?;
    if out.theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidInput("occupancy probability outside [0, 1]".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("decoder variance must be positive, got {sigma2}")));
    }
    let bce_sum: f64 = out.theta.iter().zip(y.occupancy.values()).map(|(&t, &o)| bce(t, o)).sum();
    let sse: f64 = out.mu.iter().zip(y.log_tsdf.values()).map(|(&m, &t)| (m - t as f64).powi(2)).sum();
    Ok(bce_sum + sse / (2.0 * sigma2))
}

/// Reconstruction loss of one raw decoder sample (`[logits, means]`) and its
/// gradient, scaled by `scale`.
fn reconstruction_grad<T: Real>(y: &ShapeSample, raw: &[T], sigma2: f64, scale: f64, grad: &mut [T]) -> f64 {
    let n = y.dims().len();
    let mut loss = 0.0;
    for (i, &o) in y.occupancy.values().iter().enumerate() {
        let theta = crate::model::sigmoid(raw[i].as_f64());
        loss += bce(theta, o);
        let g = bce_grad(theta, o) * theta * (1.0 - theta);
        grad[i] = T::from_f64(scale * g);
    }
    for (i, &t) in y.log_tsdf.values().iter().enumerate() {
        let r = raw[n + i].as_f64() - t as f64;
        loss += r * r / (2.0 * sigma2);
        grad[n + i] = T::from_f64(scale * r / sigma2);
    }
    loss
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Batch-mean DVAE loss: encode `inputs`, reparameterize with the given
/// standard-normal draws, decode and score against the clean `targets`.
/// With `backprop`, gradients are accumulated into both networks.
#[allow(clippy::too_many_arguments)]
pub fn dvae_loss<T: Real>(
    encoder: &mut Network<T>,
    decoder: &mut Network<T>,
    inputs: Tensor<T>,
    targets: &[ShapeSample],
    eps: &[Vec<f64>],
    lambda: f64,
    sigma2: f64,
    backprop: bool,
) -> Result<LossParts> {
    let n = targets.len();
    if inputs.batch() != n || eps.len() != n {
        return Err(Error::Shape(format!("{} inputs, {n} targets, {} noise draws", inputs.batch(), eps.len())));
    }
    let dims = targets[0].dims();
    let dists = encode(encoder, inputs, Mode::Train)?;
    let q = decoder.input_shape()[0];
    let mut z = Vec::with_capacity(n * q);
    for (d, e) in dists.iter().zip(eps) {
        z.extend(reparameterize_with(d, e).into_iter().map(T::from_f64));
    }
    let raw = decoder.forward(Tensor::from_vec(&[n, q], z)?, Mode::Train)?;
    let mut g_dec = Tensor::zeros(raw.shape());
    let sl = raw.sample_len();
    let scale = 1.0 / n as f64;
    let mut parts = LossParts::default();
    for (b, y) in targets.iter().enumerate() {
        y.dims().ensure_same(&dims)?;
        parts.recon += scale * reconstruction_grad(y, raw.sample(b), sigma2, scale, &mut g_dec.data_mut()[b * sl..(b + 1) * sl]);
        parts.kl += scale * kl_unit_gaussian(&dists[b]);
    }
    parts.total = parts.recon + lambda * parts.kl;
    if !parts.total.is_finite() {
        return Ok(parts);
    }
    if backprop {
        let dz = decoder.backward(&g_dec)?;
        let mut g_enc = Tensor::zeros(&[n, 2 * q]);
        for (b, d) in dists.iter().enumerate() {
            let row = &mut g_enc.data_mut()[b * 2 * q..(b + 1) * 2 * q];
            for k in 0..q {
                let dzk = dz.sample(b)[k].as_f64();
                let s = (0.5 * d.log_var[k]).exp();
                row[k] = T::from_f64(dzk + scale * lambda * d.mean[k]);
                row[q + k] = T::from_f64(dzk * eps[b][k] * 0.5 * s + scale * lambda * 0.5 * (d.log_var[k].exp() - 1.0));
            }
        }
        encoder.backward_params(&g_enc)?;
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// KL weight.
    pub lambda: f64,
    /// Decoder variance of the logTSDF channel.
    pub sigma2: f64,
    pub corruption: CorruptionParams,
    /// Maximum random translation per axis, in voxels.
    pub max_shift: i64,
    pub adam: AdamConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            widths: vec![8, 16, 32],
            convs_per_stage: 1,
            latent: 10,
            epochs: 400,
            batch_size: 16,
            lambda: 2.0,
            sigma2: (-2.0f64).exp(),
            corruption: CorruptionParams::default(),
            max_shift: 3,
            adam: AdamConfig::default(),
        }
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub recon: f64,
    pub reg: f64,
    pub total: f64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} step={} lr={:.6e} recon={:.6} reg={:.6} total={:.6}",
            self.epoch, self.step, self.lr, self.recon, self.reg, self.total
        )
    }
}

/// Training log, one entry per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn first_total(&self) -> Option<f64> {
        self.entries.first().map(|e| e.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.entries.last().map(|e| e.total)
    }

    /// Mean total loss of each epoch present in the log, in order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == e.epoch => {
                    last.1 += e.total;
                    last.2 += 1;
                }
                _ => out.push((e.epoch, e.total, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    pub fn append(&mut self, other: TrainLog) {
        self.entries.extend(other.entries);
    }

    /// Parses text written by [`TrainLog::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::InvalidInput(format!("log line {}: {line:?}", n + 1));
            let mut fields = std::collections::HashMap::new();
            for kv in line.split_whitespace() {
                let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
            entries.push(LogEntry {
                epoch: get("epoch")?.parse().map_err(|_| bad())?,
                step: get("step")?.parse().map_err(|_| bad())?,
                lr: get("lr")?.parse().map_err(|_| bad())?,
                recon: get("recon")?.parse().map_err(|_| bad())?,
                reg: get("reg")?.parse().map_err(|_| bad())?,
                total: get("total")?.parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainLog { entries })
    }
}

/// Splits `0..n` into minibatches, folding a trailing singleton into the
/// previous batch (train-mode batchnorm needs two samples).
pub(crate) fn minibatches(order: &[usize], batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch.max(2)).collect();
    if out.len() > 1 && out[out.len() - 1].len() == 1 {
        let last = out.len() - 1;
        let start = order.len() - out[last - 1].len() - 1;
        out[last - 1] = &order[start..];
        out.pop();
    }
    out
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// An encoder/decoder pair with its optimizer state.
pub struct ShapeModel {
    pub arch: Architecture,
    pub encoder: Network<f32>,
    pub decoder: Network<f32>,
    pub adam: AdamState<f32>,
    /// Completed training epochs.
    pub epochs: usize,
}

impl ShapeModel {
    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), kind.into());
        ck.meta.insert("latent".into(), self.arch.latent.to_string());
        ck.meta.insert("epochs".into(), self.epochs.to_string());
        ck.step = self.adam.step;
        ck.networks.push(("encoder".into(), clone_net(&self.encoder)));
        ck.networks.push(("decoder".into(), clone_net(&self.decoder)));
        let (m, v) = self.adam.moments();
        for (i, (a, b)) in m.iter().zip(v).enumerate() {
            ck.tensors.push((format!("adam.m.{i}"), a.clone()));
            ck.tensors.push((format!("adam.v.{i}"), b.clone()));
        }
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let missing = |n: &str| Error::InvalidInput(format!("checkpoint has no {n} network"));
        let encoder = ck.take_network("encoder").ok_or_else(|| missing("encoder"))?;
        let decoder = ck.take_network("decoder").ok_or_else(|| missing("decoder"))?;
        let arch = Architecture::from_networks(&encoder, &decoder)?;
        let epochs = match ck.meta.get("epochs") {
            Some(e) => e.parse().map_err(|_| Error::InvalidInput(format!("bad epoch count {e:?}")))?,
            None => 0,
        };
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step = ck.step;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for i in 0.. {
            match (ck.tensor(&format!("adam.m.{i}")), ck.tensor(&format!("adam.v.{i}"))) {
                (Some(a), Some(b)) => {
                    m.push(a.clone());
                    v.push(b.clone());
                }
                _ => break,
            }
        }
        adam.set_moments(m, v)?;
        Ok(ShapeModel { arch, encoder, decoder, adam, epochs })
    }
}

pub(crate) fn clone_net(net: &Network<f32>) -> Network<f32> {
    net.cast::<f32>()
}

pub(crate) fn check_step(adam: &AdamState<f32>, total: f64, nets: &[&Network<f32>], what: &str) -> Result<()> {
    if !total.is_finite() {
        return Err(Error::Divergence { step: adam.step, detail: format!("{what} loss {total}") });
    }
    if nets.iter().any(|n| !n.is_finite()) {
        return Err(Error::Divergence { step: adam.step, detail: "non-finite parameters".into() });
    }
    Ok(())
}

/// Freshly initialized prior for shapes of size `dims`.
pub fn init_prior(dims: crate::grid::GridDims, cfg: &PriorConfig, seed: u64) -> Result<ShapeModel> {
    let arch = Architecture::new(dims, cfg.widths.clone(), cfg.convs_per_stage, cfg.latent)?;
    Ok(ShapeModel {
        encoder: arch.encoder::<f32>(2, derive_seed(seed, &[1]))?,
        decoder: arch.decoder::<f32>(derive_seed(seed, &[2]))?,
        adam: AdamState::new(cfg.adam.clone()),
        arch,
        epochs: 0,
    })
}

/// Minibatch Adam on the DVAE loss with translation augmentation and
/// corruption. Returns the trained prior and a per-step log.
pub fn train_prior(shapes: &[ShapeSample], cfg: &PriorConfig, seed: u64) -> Result<(ShapeModel, TrainLog)> {
    let first = shapes.first().ok_or_else(|| Error::InvalidInput("prior training needs shapes".into()))?;
    let mut model = init_prior(first.dims(), cfg, seed)?;
    let log = continue_prior(&mut model, shapes, cfg, seed)?;
    Ok((model, log))
}

/// Runs `cfg.epochs` further epochs on `model`; step and epoch numbering
/// continue from the model's counters.
pub fn continue_prior(model: &mut ShapeModel, shapes: &[ShapeSample], cfg: &PriorConfig, seed: u64) -> Result<TrainLog> {
    if shapes.len() < 2 {
        return Err(Error::InvalidInput(format!("prior training needs at least 2 shapes, got {}", shapes.len())));
    }
    for s in shapes {
        s.dims().ensure_same(&model.arch.dims)?;
    }
    model.adam.config = cfg.adam.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, model.adam.step]));
    let mut log = TrainLog::default();
    let ShapeModel { encoder, decoder, adam, .. } = model;
    for _ in 0..cfg.epochs {
        let order = shuffled(shapes.len(), &mut rng);
        for idx in minibatches(&order, cfg.batch_size) {
            let mut targets = Vec::with_capacity(idx.len());
            let mut inputs = Vec::with_capacity(idx.len());
            let mut eps = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = cfg.max_shift;
                let off = [rng.random_range(-s..=s), rng.random_range(-s..=s), rng.random_range(-s..=s)];
                let y = translate(&shapes[i], off);
                inputs.push(corrupt(&y, cfg.corruption, rng.random()).to_input::<f32>());
                eps.push(standard_normal(cfg.latent, rng.random()));
                targets.push(y);
            }
            encoder.zero_grads();
            decoder.zero_grads();
            let lr = adam.current_lr();
            let parts = dvae_loss(encoder, decoder, Tensor::stack(&inputs)?, &targets, &eps, cfg.lambda, cfg.sigma2, true)?;
            check_step(adam, parts.total, &[], "prior")?;
            adam.step(&mut [&mut *encoder, &mut *decoder])?;
            check_step(adam, parts.total, &[encoder, decoder], "prior")?;
            log.entries.push(LogEntry { epoch: model.epochs, step: adam.step, lr, recon: parts.recon, reg: parts.kl, total: parts.total });
        }
        model.epochs += 1;
    }
    encoder.clear_cache();
    decoder.clear_cache();
    Ok(log)
}

/// Decodes `n` standard-normal latent draws.
pub fn sample_prior(n: usize, decoder: &mut Network<f32>, dims: crate::grid::GridDims, seed: u64) -> Result<Vec<DecoderOutput>> {
    let q = decoder.input_shape()[0];
    let z: Vec<Vec<f64>> = (0..n).map(|i| standard_normal(q, derive_seed(seed, &[i as u64]))).collect();
    decode(decoder, dims, &z, Mode::Eval)
}

/// Decodes the recognition mean of `y` (no sampling).
pub fn reconstruct(y: &ShapeSample, encoder: &mut Network<f32>, decoder: &mut Network<f32>) -> Result<DecoderOutput> {
    let input = y.to_input::<f32>().reshaped(&[1, 2, y.dims().h, y.dims().w, y.dims().d])?;
    let d = encode(encoder, input, Mode::Eval)?;
    let mut out = decode(decoder, y.dims(), &[d[0].mean.clone()], Mode::Eval)?;
    Ok(out.remove(0))
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::grid::{GridDims, OccupancyGrid};
    use crate::nn::{grad_check_many, jitter_params};

    #[test]
    fn dvae_loss_gradients_match_differences() {
        let dims = GridDims::cube(4).unwrap();
        let arch = Architecture::new(dims, vec![2, 3], 1, 3).unwrap();
        let shapes: Vec<ShapeSample> = (0..2)
            .map(|s| {
                let occ = OccupancyGrid::from_fn(dims, |i, j, k| (i + j + k + s) % 3 == 0 && i > 0 && i < 3);
                ShapeSample::from_filled(crate::grid::fill_interior(&occ)).unwrap()
            })
            .collect();
        for seed in 0..3 {
            let mut enc = arch.encoder::<f64>(2, seed).unwrap();
            let mut dec = arch.decoder::<f64>(seed + 100).unwrap();
            jitter_params(&mut enc, seed, 0.1);
            jitter_params(&mut dec, seed + 1, 0.1);
            let inputs: Vec<Tensor<f64>> =
                shapes.iter().enumerate().map(|(i, y)| corrupt(y, CorruptionParams::default(), seed * 10 + i as u64).to_input()).collect();
            let input = Tensor::stack(&inputs).unwrap();
            let eps: Vec<Vec<f64>> = (0..2).map(|i| standard_normal(3, seed + i)).collect();
            let err = grad_check_many(&mut [&mut enc, &mut dec], 1e-5, |nets, bp| {
                let (a, b) = nets.split_at_mut(1);
                Ok(dvae_loss(a[0], b[0], input.clone(), &shapes, &eps, 2.0, (-2.0f64).exp(), bp)?.total)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
