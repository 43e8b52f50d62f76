//! Amortized maximum likelihood: an encoder trained to map partial
//! observations onto latent codes of a frozen shape prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{GridDims, Observation, OccupancyGrid, SdfGrid, VoxelState, WeightGrid};
use crate::model::{decode, encode, observation_input, sigmoid, Architecture, DecoderOutput};
use crate::nn::{AdamConfig, AdamState, Mode, Network, Real, Tensor};
use crate::prior::{
    bce, bce_grad, check_step, clone_net, kl_unit_gaussian, minibatches, reparameterize_with, shuffled,
    standard_normal, CorruptionParams, LogEntry, LossParts, ShapeModel, TrainLog,
};
use crate::seed::derive_seed;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Probability that a Gaussian `N(mu, sigma^2)` is non-positive.
pub fn gaussian_to_bernoulli(mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(0.5 * libm::erfc(mu / (sigma * SQRT_2)))
}

/// Derivative of [`gaussian_to_bernoulli`] with respect to `mu`.
pub fn gaussian_to_bernoulli_grad(mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let t = mu / sigma;
    Ok(-(-0.5 * t * t).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("standard deviation must be positive, got {sigma}")))
    }
}

/// Network input of a corrupted observation: each observed voxel flips
/// between occupied and free with `flip_prob`, then Gaussian noise is added
/// to both channels of observed voxels. Unknown voxels stay zero.
pub fn corrupt_observation_input<T: Real>(x: &Observation, cp: CorruptionParams, seed: u64) -> Tensor<T> {
    let mut input = observation_input::<f64>(x);
    let n = x.dims().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = cp.noise_var.sqrt();
    let data = input.data_mut();
    for (i, s) in x.states().iter().enumerate() {
        if *s == VoxelState::Unknown {
            continue;
        }
        if cp.flip_prob > 0.0 && rng.random_bool(cp.flip_prob) {
            data.swap(i, n + i);
        }
        if std > 0.0 {
            for c in [i, n + i] {
                let e: f64 = StandardNormal.sample(&mut rng);
                data[c] += std * e;
            }
        }
    }
    input.cast()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmlConfig {
    /// Weight of the latent regularizer.
    pub lambda: f64,
    /// Extra factor on free-space terms.
    pub free_multiplier: f64,
    /// Use the recognition mean instead of a sample (dAML).
    pub deterministic: bool,
    pub corruption: CorruptionParams,
    /// Standard deviation of the logTSDF head.
    pub sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for AmlConfig {
    fn default() -> Self {
        AmlConfig {
            lambda: 2.0,
            free_multiplier: 1.0,
            deterministic: false,
            corruption: CorruptionParams::default(),
            sigma: (-1.0f64).exp(),
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig { decay: 0.9, ..AdamConfig::default() },
        }
    }
}

impl AmlConfig {
    /// Settings for noisy observations: free space counts a quarter.
    pub fn noisy() -> Self {
        AmlConfig { free_multiplier: 0.25, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.free_multiplier > 0.0 && self.free_multiplier <= 1.0) {
            return Err(Error::Config(format!("free-space multiplier must lie in (0, 1], got {}", self.free_multiplier)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Weighting of the observation likelihood.
#[derive(Clone, Copy, Debug)]
pub struct DataTerm<'a> {
    pub kappa: &'a WeightGrid,
    pub free_multiplier: f64,
    pub sigma: f64,
}

impl DataTerm<'_> {
    /// Negative log-likelihood of `x` under one raw decoder sample
    /// (`[logits, means]`); writes `scale` times its gradient into `grad`.
    pub(crate) fn eval<T: Real>(&self, x: &Observation, raw: &[T], scale: f64, grad: &mut [T]) -> Result<f64> {
        let n = x.dims().len();
        let kappa = self.kappa.values();
        let mut loss = 0.0;
        for (i, s) in x.states().iter().enumerate() {
            let (target, w) = match s {
                VoxelState::Unknown => continue,
                VoxelState::Occupied => (true, 1.0),
                VoxelState::Free => (false, kappa[i] as f64 * self.free_multiplier),
            };
            if w == 0.0 {
                continue;
            }
            let theta = sigmoid(raw[i].as_f64());
            loss += w * bce(theta, target);
            grad[i] = T::from_f64(scale * w * bce_grad(theta, target) * theta * (1.0 - theta));
            let mu = raw[n + i].as_f64();
            let p = gaussian_to_bernoulli(mu, self.sigma)?;
            loss += w * bce(p, target);
            grad[n + i] = T::from_f64(scale * w * bce_grad(p, target) * gaussian_to_bernoulli_grad(mu, self.sigma)?);
        }
        Ok(loss)
    }

    /// Negative log-likelihood of `x` under a decoded prediction.
    pub fn value(&self, x: &Observation, out: &DecoderOutput) -> Result<f64> {
        x.dims().ensure_same(&out.dims)?;
        self.kappa.dims().ensure_same(&out.dims)?;
        let logits = out.theta.iter().map(|&t| {
            let t = t.clamp(1e-300, 1.0 - 1e-16);
            (t / (1.0 - t)).ln()
        });
        let raw: Vec<f64> = logits.chain(out.mu.iter().copied()).collect();
        let mut scratch = vec![0.0; raw.len()];
        self.eval(x, &raw, 0.0, &mut scratch)
    }
}

fn check_observations(xs: &[Observation], kappa: &WeightGrid) -> Result<GridDims> {
    let dims = kappa.dims();
    for x in xs {
        x.dims().ensure_same(&dims)?;
        if x.observed_count() == 0 {
            return Err(Error::InvalidInput("observation without observed voxels".into()));
        }
    }
    Ok(dims)
}

/// Batch-mean AML loss: data term plus `lambda` times the KL divergence
/// (or `0.5 |z|^2` in deterministic mode). `inputs` are the (possibly
/// corrupted) encoder inputs for `xs`; the data term always scores the
/// clean observations. The decoder must be frozen; with `backprop`,
/// gradients reach only the encoder.
#[allow(clippy::too_many_arguments)]
pub fn aml_loss<T: Real>(
    encoder: &mut Network<T>,
    decoder: &mut Network<T>,
    inputs: Tensor<T>,
    xs: &[Observation],
    kappa: &WeightGrid,
    cfg: &AmlConfig,
    eps: &[Vec<f64>],
    backprop: bool,
) -> Result<LossParts> {
    if decoder.trainable() {
        return Err(Error::InvalidInput("AML requires a frozen decoder".into()));
    }
    let n = xs.len();
    if inputs.batch() != n || eps.len() != n {
        return Err(Error::Shape(format!("{} inputs, {n} observations, {} noise draws", inputs.batch(), eps.len())));
    }
    check_observations(xs, kappa)?;
    let dists = encode(encoder, inputs, Mode::Train)?;
    let q = decoder.input_shape()[0];
    let mut z = Vec::with_capacity(n * q);
    for (d, e) in dists.iter().zip(eps) {
        let code = if cfg.deterministic { d.mean.clone() } else { reparameterize_with(d, e) };
        z.extend(code.into_iter().map(T::from_f64));
    }
    let raw = decoder.forward(Tensor::from_vec(&[n, q], z)?, Mode::Eval)?;
    let mut g_dec = Tensor::zeros(raw.shape());
    let sl = raw.sample_len();
    let scale = 1.0 / n as f64;
    let term = DataTerm { kappa, free_multiplier: cfg.free_multiplier, sigma: cfg.sigma };
    let mut parts = LossParts::default();
    for (b, x) in xs.iter().enumerate() {
        parts.recon += scale * term.eval(x, raw.sample(b), scale, &mut g_dec.data_mut()[b * sl..(b + 1) * sl])?;
        parts.kl += scale
            * if cfg.deterministic {
                0.5 * dists[b].mean.iter().map(|m| m * m).sum::<f64>()
            } else {
                kl_unit_gaussian(&dists[b])
            };
    }
    parts.total = parts.recon + cfg.lambda * parts.kl;
    if backprop && parts.total.is_finite() {
        let dz = decoder.backward(&g_dec)?;
        let lam = scale * cfg.lambda;
        let mut g_enc = Tensor::zeros(&[n, 2 * q]);
        for (b, d) in dists.iter().enumerate() {
            let row = &mut g_enc.data_mut()[b * 2 * q..(b + 1) * 2 * q];
            for k in 0..q {
                let dzk = dz.sample(b)[k].as_f64();
                if cfg.deterministic {
                    row[k] = T::from_f64(dzk + lam * d.mean[k]);
                } else {
                    let s = (0.5 * d.log_var[k]).exp();
                    row[k] = T::from_f64(dzk + lam * d.mean[k]);
                    row[q + k] = T::from_f64(dzk * eps[b][k] * 0.5 * s + lam * 0.5 * (d.log_var[k].exp() - 1.0));
                }
            }
        }
        encoder.backward_params(&g_enc)?;
    }
    Ok(parts)
}

/// Copy of `decoder` with its parameters frozen.
pub fn freeze(decoder: &Network<f32>) -> Network<f32> {
    let mut d = clone_net(decoder);
    d.set_trainable(false);
    d
}

/// Fresh AML model: a new encoder over observation inputs and a frozen
/// copy of the prior's decoder.
pub fn init_aml(prior_decoder: &Network<f32>, dims: GridDims, widths: &[usize], convs_per_stage: usize, seed: u64, cfg: &AmlConfig) -> Result<ShapeModel> {
    let decoder = freeze(prior_decoder);
    let latent = decoder.input_shape()[0];
    let arch = Architecture::new(dims, widths.to_vec(), convs_per_stage, latent)?;
    let encoder = arch.encoder::<f32>(2, derive_seed(seed, &[1]))?;
    let arch = Architecture::from_networks(&encoder, &decoder)?;
    Ok(ShapeModel { arch, encoder, decoder, adam: AdamState::new(cfg.adam.clone()), epochs: 0 })
}

/// Trains a freshly initialized encoder against the frozen decoder of a
/// prior.
pub fn train_aml(xs: &[Observation], kappa: &WeightGrid, prior: &ShapeModel, cfg: &AmlConfig, seed: u64) -> Result<(ShapeModel, TrainLog)> {
    let mut model = init_aml(&prior.decoder, kappa.dims(), &prior.arch.widths, prior.arch.convs_per_stage, seed, cfg)?;
    let log = continue_aml(&mut model, xs, kappa, cfg, seed)?;
    Ok((model, log))
}

/// Runs `cfg.epochs` further AML epochs; counters continue from the model.
pub fn continue_aml(model: &mut ShapeModel, xs: &[Observation], kappa: &WeightGrid, cfg: &AmlConfig, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    if xs.len() < 2 {
        return Err(Error::InvalidInput(format!("AML training needs at least 2 observations, got {}", xs.len())));
    }
    check_observations(xs, kappa)?;
    model.decoder.set_trainable(false);
    model.adam.config = cfg.adam.clone();
    let q = model.arch.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, model.adam.step]));
    let mut log = TrainLog::default();
    let ShapeModel { encoder, decoder, adam, .. } = model;
    for _ in 0..cfg.epochs {
        let order = shuffled(xs.len(), &mut rng);
        for idx in minibatches(&order, cfg.batch_size) {
            let batch: Vec<Observation> = idx.iter().map(|&i| xs[i].clone()).collect();
            let inputs: Vec<Tensor<f32>> =
                batch.iter().map(|x| corrupt_observation_input(x, cfg.corruption, rng.random())).collect();
            let eps: Vec<Vec<f64>> = batch.iter().map(|_| standard_normal(q, rng.random())).collect();
            encoder.zero_grads();
            let lr = adam.current_lr();
            let parts = aml_loss(encoder, decoder, Tensor::stack(&inputs)?, &batch, kappa, cfg, &eps, true)?;
            check_step(adam, parts.total, &[], "AML")?;
            adam.step(&mut [&mut *encoder])?;
            check_step(adam, parts.total, &[encoder], "AML")?;
            log.entries.push(LogEntry { epoch: model.epochs, step: adam.step, lr, recon: parts.recon, reg: parts.kl, total: parts.total });
        }
        model.epochs += 1;
    }
    encoder.clear_cache();
    decoder.clear_cache();
    Ok(log)
}

/// A shape completion in grid form.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub occupancy: OccupancyGrid,
    pub sdf: SdfGrid,
    pub output: DecoderOutput,
}

impl Completion {
    pub fn from_output(output: DecoderOutput) -> Self {
        Completion { occupancy: output.occupancy(), sdf: output.sdf(), output }
    }
}

/// Decodes the recognition mean of each observation in one forward pass.
pub fn complete_batch(xs: &[Observation], encoder: &mut Network<f32>, decoder: &mut Network<f32>) -> Result<Vec<Completion>> {
    let Some(first) = xs.first() else { return Ok(Vec::new()) };
    let dims = first.dims();
    let inputs: Vec<Tensor<f32>> = xs
        .iter()
        .map(|x| {
            x.dims().ensure_same(&dims)?;
            Ok(observation_input(x))
        })
        .collect::<Result<_>>()?;
    let dists = encode(encoder, Tensor::stack(&inputs)?, Mode::Eval)?;
    let z: Vec<Vec<f64>> = dists.into_iter().map(|d| d.mean).collect();
    let out = decode(decoder, dims, &z, Mode::Eval)?;
    encoder.clear_cache();
    decoder.clear_cache();
    Ok(out.into_iter().map(Completion::from_output).collect())
}

pub fn complete(x: &Observation, encoder: &mut Network<f32>, decoder: &mut Network<f32>) -> Result<Completion> {
    Ok(complete_batch(std::slice::from_ref(x), encoder, decoder)?.remove(0))
}
