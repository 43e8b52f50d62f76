//! Comparison methods: per-instance latent optimization, a fully supervised
//! network, the mean shape and the prior applied to raw observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aml::{Completion, DataTerm};
use crate::error::{Error, Result};
use crate::grid::{GridDims, LogTsdfGrid, Observation, OccupancyGrid, VoxelState, WeightGrid};
use crate::model::{observation_input, DecoderOutput, ShapeSample};
use crate::nn::{Mode, Network, Tensor};
use crate::prior::{
    check_step, dvae_loss, minibatches, reconstruct, shuffled, LogEntry, PriorConfig, ShapeModel, TrainLog,
};
use crate::seed::derive_seed;

/// Gradient descent with momentum on the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct MlConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Both schedules step every `decay_interval` iterations.
    pub decay_interval: usize,
    pub lr_decay: f64,
    pub lr_floor: f64,
    /// Momentum is multiplied by this rate until it reaches `momentum_limit`.
    pub momentum_rate: f64,
    pub momentum_limit: f64,
    pub lambda: f64,
    pub free_multiplier: f64,
    pub sigma: f64,
    /// Initial latent code; `None` starts at zero.
    pub z0: Option<Vec<f64>>,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig {
            iterations: 5000,
            lr: 0.05,
            momentum: 0.5,
            decay_interval: 50,
            lr_decay: 0.85,
            lr_floor: 1e-5,
            momentum_rate: 1.0,
            momentum_limit: 0.9,
            lambda: 2.0,
            free_multiplier: 1.0,
            sigma: (-1.0f64).exp(),
            z0: None,
        }
    }
}

impl MlConfig {
    /// Learning rate and momentum used at iteration `it`.
    pub fn schedule(&self, it: usize) -> (f64, f64) {
        let periods = (it / self.decay_interval.max(1)) as i32;
        let lr = (self.lr * self.lr_decay.powi(periods)).max(self.lr_floor);
        let m = self.momentum * self.momentum_rate.powi(periods);
        let m = if self.momentum_rate >= 1.0 { m.min(self.momentum_limit.max(self.momentum)) } else { m.max(self.momentum_limit.min(self.momentum)) };
        (lr, m)
    }
}

#[derive(Clone, Debug)]
pub struct MlResult {
    /// Best latent code found.
    pub z: Vec<f64>,
    pub output: DecoderOutput,
    pub loss: f64,
    /// Objective at each evaluated iterate, starting with `z0`.
    pub trace: Vec<f64>,
}

/// Per-instance maximum likelihood over the latent code of a frozen
/// decoder, returning the best iterate.
pub fn ml_baseline(x: &Observation, kappa: &WeightGrid, decoder: &mut Network<f32>, cfg: &MlConfig) -> Result<MlResult> {
    Ok(ml_baseline_batch(std::slice::from_ref(x), kappa, decoder, cfg)?.remove(0))
}

/// [`ml_baseline`] for several observations at once. The objective is
/// separable, so every instance follows exactly its own trajectory.
pub fn ml_baseline_batch(xs: &[Observation], kappa: &WeightGrid, decoder: &mut Network<f32>, cfg: &MlConfig) -> Result<Vec<MlResult>> {
    let dims = kappa.dims();
    let q = decoder.input_shape()[0];
    for x in xs {
        x.dims().ensure_same(&dims)?;
    }
    let z0 = cfg.z0.clone().unwrap_or_else(|| vec![0.0; q]);
    if z0.len() != q {
        return Err(Error::Shape(format!("initial code of length {} for latent size {q}", z0.len())));
    }
    let n = xs.len();
    let trainable = decoder.trainable();
    decoder.set_trainable(false);
    let term = DataTerm { kappa, free_multiplier: cfg.free_multiplier, sigma: cfg.sigma };
    let mut z: Vec<Vec<f64>> = vec![z0; n];
    let mut velocity = vec![vec![0.0; q]; n];
    let mut best: Vec<(f64, Vec<f64>)> = vec![(f64::INFINITY, Vec::new()); n];
    let mut traces = vec![Vec::with_capacity(cfg.iterations + 1); n];
    let result = (|| -> Result<()> {
        for it in 0..=cfg.iterations {
            let flat: Vec<f32> = z.iter().flatten().map(|&v| v as f32).collect();
            let raw = decoder.forward(Tensor::from_vec(&[n, q], flat)?, Mode::Eval)?;
            let mut g = Tensor::<f32>::zeros(raw.shape());
            let sl = raw.sample_len();
            for b in 0..n {
                let data = term.eval(&xs[b], raw.sample(b), 1.0, &mut g.data_mut()[b * sl..(b + 1) * sl])?;
                let loss = data + cfg.lambda * 0.5 * z[b].iter().map(|v| v * v).sum::<f64>();
                traces[b].push(loss);
                if loss < best[b].0 {
                    best[b] = (loss, z[b].clone());
                }
            }
            if it == cfg.iterations {
                break;
            }
            let dz = decoder.backward(&g)?;
            let (lr, mom) = cfg.schedule(it);
            for b in 0..n {
                for k in 0..q {
                    let grad = dz.sample(b)[k] as f64 + cfg.lambda * z[b][k];
                    velocity[b][k] = mom * velocity[b][k] - lr * grad;
                    z[b][k] += velocity[b][k];
                }
                if z[b].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step: it as u64, detail: "latent code left the reals".into() });
                }
            }
        }
        Ok(())
    })();
    decoder.set_trainable(trainable);
    decoder.clear_cache();
    result?;
    let codes: Vec<Vec<f64>> = best.iter().map(|b| b.1.clone()).collect();
    let outputs = crate::model::decode(decoder, dims, &codes, Mode::Eval)?;
    decoder.clear_cache();
    Ok(best
        .into_iter()
        .zip(outputs)
        .zip(traces)
        .map(|(((loss, z), output), trace)| MlResult { z, output, loss, trace })
        .collect())
}

/// Trains encoder and decoder end to end from observations to the ground
/// truth shapes with the reconstruction loss alone.
pub fn train_supervised(xs: &[Observation], targets: &[ShapeSample], cfg: &PriorConfig, seed: u64) -> Result<(ShapeModel, TrainLog)> {
    let first = targets.first().ok_or_else(|| Error::InvalidInput("supervised training needs targets".into()))?;
    let mut model = crate::prior::init_prior(first.dims(), cfg, seed)?;
    let log = continue_supervised(&mut model, xs, targets, cfg, seed)?;
    Ok((model, log))
}

pub fn continue_supervised(model: &mut ShapeModel, xs: &[Observation], targets: &[ShapeSample], cfg: &PriorConfig, seed: u64) -> Result<TrainLog> {
    if xs.len() != targets.len() {
        return Err(Error::Shape(format!("{} observations for {} targets", xs.len(), targets.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(format!("supervised training needs at least 2 pairs, got {}", xs.len())));
    }
    for (x, y) in xs.iter().zip(targets) {
        x.dims().ensure_same(&model.arch.dims)?;
        y.dims().ensure_same(&model.arch.dims)?;
    }
    model.adam.config = cfg.adam.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, model.adam.step]));
    let zeros = vec![vec![0.0; model.arch.latent]; cfg.batch_size + 1];
    let mut log = TrainLog::default();
    let ShapeModel { encoder, decoder, adam, .. } = model;
    for _ in 0..cfg.epochs {
        let order = shuffled(xs.len(), &mut rng);
        for idx in minibatches(&order, cfg.batch_size) {
            let inputs: Vec<Tensor<f32>> = idx.iter().map(|&i| observation_input(&xs[i])).collect();
            let ys: Vec<ShapeSample> = idx.iter().map(|&i| targets[i].clone()).collect();
            encoder.zero_grads();
            decoder.zero_grads();
            let lr = adam.current_lr();
            let parts = dvae_loss(encoder, decoder, Tensor::stack(&inputs)?, &ys, &zeros[..idx.len()], 0.0, cfg.sigma2, true)?;
            check_step(adam, parts.total, &[], "supervised")?;
            adam.step(&mut [&mut *encoder, &mut *decoder])?;
            check_step(adam, parts.total, &[encoder, decoder], "supervised")?;
            log.entries.push(LogEntry { epoch: model.epochs, step: adam.step, lr, recon: parts.recon, reg: 0.0, total: parts.total });
        }
        model.epochs += 1;
        // Keep the generator advancing per epoch even though inputs are clean.
        let _: u64 = rng.random();
    }
    encoder.clear_cache();
    decoder.clear_cache();
    Ok(log)
}

/// Voxel-wise mean of the references: occupancy thresholded at 0.5 and the
/// mean logTSDF.
pub fn mean_baseline(references: &[ShapeSample]) -> Result<Completion> {
    let first = references.first().ok_or_else(|| Error::InvalidInput("mean shape of no references".into()))?;
    let dims = first.dims();
    let mut theta = vec![0.0; dims.len()];
    let mut mu = vec![0.0; dims.len()];
    for r in references {
        r.dims().ensure_same(&dims)?;
        for (t, &o) in theta.iter_mut().zip(r.occupancy.values()) {
            *t += o as u8 as f64;
        }
        for (m, &v) in mu.iter_mut().zip(r.log_tsdf.values()) {
            *m += v as f64;
        }
    }
    let n = references.len() as f64;
    theta.iter_mut().for_each(|t| *t /= n);
    mu.iter_mut().for_each(|m| *m /= n);
    let output = DecoderOutput { dims, theta, mu };
    let occupancy = OccupancyGrid::from_values(dims, output.theta.iter().map(|&t| t >= 0.5).collect())?;
    Ok(Completion { occupancy, sdf: output.sdf(), output })
}

/// The observation's occupied voxels read as a complete shape.
pub fn observation_as_shape(x: &Observation) -> Result<ShapeSample> {
    let dims: GridDims = x.dims();
    let occ = OccupancyGrid::from_values(dims, x.states().iter().map(|&s| s == VoxelState::Occupied).collect())?;
    if occ.count() == 0 {
        return ShapeSample::new(occ, LogTsdfGrid::outside(dims));
    }
    ShapeSample::from_filled(occ)
}

/// Prior reconstruction of the observation treated as a shape.
pub fn naive_baseline(x: &Observation, prior: &mut ShapeModel) -> Result<Completion> {
    let y = observation_as_shape(x)?;
    Ok(Completion::from_output(reconstruct(&y, &mut prior.encoder, &mut prior.decoder)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn block(dims: GridDims, lo: usize, hi: usize) -> ShapeSample {
        ShapeSample::from_filled(OccupancyGrid::from_fn(dims, |i, j, k| [i, j, k].iter().all(|&c| (lo..hi).contains(&c)))).unwrap()
    }

    #[test]
    fn mean_of_one_is_that_shape() {
        let dims = GridDims::cube(8).unwrap();
        let s = block(dims, 2, 6);
        let m = mean_baseline(std::slice::from_ref(&s)).unwrap();
        assert_eq!(m.occupancy, s.occupancy);
        assert_eq!(crate::grid::occupancy_from_sdf(&m.sdf), s.occupancy);
        let m2 = mean_baseline(&[s.clone(), block(dims, 3, 7), block(dims, 0, 1)]).unwrap();
        assert_eq!(m2.occupancy.count(), 3 * 3 * 3);
        assert!(mean_baseline(&[]).is_err());
    }

    #[test]
    fn schedule_follows_decay() {
        let c = MlConfig::default();
        assert_eq!(c.schedule(0), (0.05, 0.5));
        assert_eq!(c.schedule(49), (0.05, 0.5));
        assert!((c.schedule(50).0 - 0.05 * 0.85).abs() < 1e-15);
        assert_eq!(c.schedule(4999).0, 1e-5);
        let rising = MlConfig { momentum_rate: 1.1, ..MlConfig::default() };
        assert!((rising.schedule(50).1 - 0.55).abs() < 1e-12);
        assert_eq!(rising.schedule(4000).1, 0.9);
    }

    fn decoder(dims: GridDims, seed: u64) -> Network<f32> {
        let arch = Architecture::new(dims, vec![2, 4], 1, 4).unwrap();
        let mut d = arch.decoder::<f32>(seed).unwrap();
        crate::nn::jitter_params(&mut d, seed, 1.0);
        d
    }

    /// Observation of every voxel where both heads of a decoded shape agree.
    fn rendered(out: &DecoderOutput) -> Observation {
        let states = out
            .theta
            .iter()
            .zip(&out.mu)
            .map(|(&t, &m)| match (t > 0.5, m <= 0.0) {
                (true, true) => VoxelState::Occupied,
                (false, false) => VoxelState::Free,
                _ => VoxelState::Unknown,
            })
            .collect();
        Observation::from_states(out.dims, states).unwrap()
    }

    #[test]
    fn ml_best_iterate_and_self_consistency() {
        let dims = GridDims::cube(4).unwrap();
        let mut dec = decoder(dims, 3);
        let kappa = WeightGrid::uniform(dims, 1.0).unwrap();
        let target_z = vec![1.2, -0.8, 0.5, 1.5];
        let out = crate::model::decode(&mut dec, dims, &[target_z], Mode::Eval).unwrap().remove(0);
        let x = rendered(&out);
        let zero = ml_baseline(&x, &kappa, &mut dec, &MlConfig { iterations: 0, ..MlConfig::default() }).unwrap();
        assert_eq!(zero.z, vec![0.0; 4]);
        assert_eq!(zero.trace.len(), 1);
        let cfg = MlConfig { iterations: 1000, lambda: 0.01, ..MlConfig::default() };
        let res = ml_baseline(&x, &kappa, &mut dec, &cfg).unwrap();
        assert!(res.loss <= res.trace[0]);
        assert_eq!(res.loss, res.trace.iter().copied().fold(f64::INFINITY, f64::min));
        let term = DataTerm { kappa: &kappa, free_multiplier: 1.0, sigma: cfg.sigma };
        let d_end = term.value(&x, &res.output).unwrap();
        let d_start = term.value(&x, &zero.output).unwrap();
        let d_star = term.value(&x, &out).unwrap();
        assert!(d_end <= 0.5 * d_start, "{d_end} vs {d_start} (target {d_star})");
        assert!(dec.trainable());
    }

    #[test]
    fn batched_ml_matches_single() {
        let dims = GridDims::cube(4).unwrap();
        let mut dec = decoder(dims, 5);
        let kappa = WeightGrid::uniform(dims, 0.7).unwrap();
        let xs: Vec<Observation> = [vec![0.5, 0.1, -1.0, 0.3], vec![-1.0, 1.0, 0.2, 0.0]]
            .iter()
            .map(|z| rendered(&crate::model::decode(&mut dec, dims, &[z.clone()], Mode::Eval).unwrap()[0]))
            .collect();
        let cfg = MlConfig { iterations: 40, ..MlConfig::default() };
        let batch = ml_baseline_batch(&xs, &kappa, &mut dec, &cfg).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let single = ml_baseline(x, &kappa, &mut dec, &cfg).unwrap();
            assert_eq!(single.trace.len(), b.trace.len());
            for (s, t) in single.trace.iter().zip(&b.trace) {
                assert!((s - t).abs() <= 1e-6 * s.abs().max(1.0), "{s} vs {t}");
            }
        }
    }

    #[test]
    fn observation_as_shape_uses_occupied_voxels() {
        let dims = GridDims::cube(5).unwrap();
        let mut x = Observation::unknown(dims);
        assert_eq!(observation_as_shape(&x).unwrap().occupancy.count(), 0);
        x.set(dims.index(2, 2, 2), VoxelState::Occupied);
        x.set(dims.index(1, 2, 2), VoxelState::Free);
        let y = observation_as_shape(&x).unwrap();
        assert_eq!(y.occupancy.count(), 1);
        assert!(y.occupancy.get(2, 2, 2));
    }
}
