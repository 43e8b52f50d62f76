use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, LayerSpec, Mode};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A feed-forward chain of layers with a fixed per-sample input shape.
pub struct Network<T> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    trainable: bool,
}

impl<T: Real> Network<T> {
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid network input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        for s in &specs {
            shape = s.output_shape(&shape)?;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers: specs.into_iter().map(Layer::new).collect(),
            trainable: true,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Frozen networks still propagate input gradients but leave their
    /// parameter gradients untouched.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        self.layers.iter_mut().try_fold(x, |x, l| l.forward(x, mode))
    }

    /// Backpropagates `grad_out` and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_inner(grad_out, true)?
            .ok_or_else(|| Error::InvalidInput("input gradient unavailable".into()))
    }

    /// Backpropagates without forming the input gradient of the first layer.
    pub fn backward_params(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        self.backward_inner(grad_out, false).map(|_| ())
    }

    fn backward_inner(&mut self, grad_out: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let mut g = grad_out.clone();
        let trainable = self.trainable;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            match layer.backward(&g, trainable, i > 0 || want_input)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.grads.iter_mut().for_each(|g| g.fill(T::zero()));
        }
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    /// Trainable tensors named `<layer index>.<kind>.<param>`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.named(|l| (l.param_names(), l.params()))
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.named(|l| (l.buffer_names(), l.buffers()))
    }

    fn named<'a>(&'a self, pick: impl Fn(&'a Layer<T>) -> (&'static [&'static str], &'a [Tensor<T>])) -> Vec<(String, &'a Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (names, tensors) = pick(l);
            for (n, t) in names.iter().zip(tensors) {
                out.push((format!("{i}.{}.{n}", l.spec().kind()), t));
            }
        }
        out
    }

    /// Mutable access to every named parameter or buffer tensor.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let mut parts = name.splitn(3, '.');
        let idx: usize = parts.next()?.parse().ok()?;
        let kind = parts.next()?;
        let field = parts.next()?;
        let layer = self.layers.get_mut(idx)?;
        if layer.spec().kind() != kind {
            return None;
        }
        if let Some(p) = layer.param_names().iter().position(|n| *n == field) {
            return layer.params.get_mut(p);
        }
        let b = layer.buffer_names().iter().position(|n| *n == field)?;
        layer.buffers.get_mut(b)
    }

    /// Parameters paired with their accumulated gradients.
    pub(crate) fn param_grad_pairs(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut().zip(l.grads.iter()))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U> {
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            layers: self.specs().into_iter().map(Layer::new).collect(),
            trainable: self.trainable,
        };
        for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
            dst.params = src.params.iter().map(Tensor::cast).collect();
            dst.buffers = src.buffers.iter().map(Tensor::cast).collect();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().iter().chain(l.buffers()).all(Tensor::is_finite))
    }

    /// Glorot-uniform weights on `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`;
    /// zero biases; unit batchnorm scale.
    pub fn glorot_init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.layers {
            let fans = l.spec().fans();
            let fresh = Layer::<T>::new(l.spec().clone());
            l.params = fresh.params;
            l.buffers = fresh.buffers;
            if let Some((fan_in, fan_out)) = fans {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in l.params[0].data_mut() {
                    *w = T::from_f64(rng.random_range(-a..a));
                }
            }
        }
    }
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Adds uniform noise on `[-amplitude, amplitude]` to every parameter, so
/// that checks run at a generic point rather than on the exact ReLU kinks a
/// zero-bias initialization produces.
pub fn jitter_params<T: Real>(net: &mut Network<T>, seed: u64, amplitude: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut net.layers {
        for p in &mut l.params {
            for v in p.data_mut() {
                *v = *v + T::from_f64(rng.random_range(-amplitude..amplitude));
            }
        }
    }
}

/// Compares analytic gradients with central differences for every parameter
/// and every input element. `loss` maps the network output to a scalar loss
/// and its gradient. Returns the worst [`relative_error`].
pub fn grad_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    eps: f64,
    loss: impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {eps}")));
    }
    let trainable = net.trainable();
    net.set_trainable(true);
    net.zero_grads();
    let out = net.forward(input.clone(), mode)?;
    let (_, g) = loss(&out);
    let dx = net.backward(&g)?;
    let analytic: Vec<Vec<f64>> =
        net.layers().iter().flat_map(|l| l.grads().iter().map(|g| g.data().to_vec())).collect();

    // Train-mode batchnorm mutates running statistics on every forward pass;
    // they never feed back into train-mode outputs, so they are restored only
    // to leave the network as found.
    let saved: Vec<Tensor<f64>> = net.layers().iter().flat_map(|l| l.buffers().to_vec()).collect();
    let eval = |net: &mut Network<f64>, x: &Tensor<f64>| -> Result<f64> { Ok(loss(&net.forward(x.clone(), mode)?).0) };

    let mut worst: f64 = 0.0;
    let mut slot = 0;
    for li in 0..net.layers().len() {
        for pi in 0..net.layers()[li].params().len() {
            for e in 0..net.layers()[li].params()[pi].len() {
                let orig = net.layers()[li].params()[pi].data()[e];
                net.layers_mut()[li].params[pi].data_mut()[e] = orig + eps;
                let up = eval(net, input)?;
                net.layers_mut()[li].params[pi].data_mut()[e] = orig - eps;
                let down = eval(net, input)?;
                net.layers_mut()[li].params[pi].data_mut()[e] = orig;
                worst = worst.max(relative_error(analytic[slot][e], (up - down) / (2.0 * eps)));
            }
            slot += 1;
        }
    }
    let mut x = input.clone();
    for e in 0..x.len() {
        let orig = x.data()[e];
        x.data_mut()[e] = orig + eps;
        let up = eval(net, &x)?;
        x.data_mut()[e] = orig - eps;
        let down = eval(net, &x)?;
        x.data_mut()[e] = orig;
        worst = worst.max(relative_error(dx.data()[e], (up - down) / (2.0 * eps)));
    }

    let mut it = saved.into_iter();
    for l in net.layers_mut() {
        for b in &mut l.buffers {
            *b = it.next().expect("buffer count unchanged");
        }
    }
    net.set_trainable(trainable);
    net.clear_cache();
    Ok(worst)
}

/// Finite-difference check of a composite loss over several networks.
///
/// `loss(nets, backprop)` must evaluate the loss deterministically and, when
/// `backprop` is set, accumulate gradients into the networks. Parameters of
/// trainable networks are compared against central differences; the worst
/// relative error is returned as in [`grad_check`].
pub fn grad_check_many(
    nets: &mut [&mut Network<f64>],
    eps: f64,
    mut loss: impl FnMut(&mut [&mut Network<f64>], bool) -> Result<f64>,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {eps}")));
    }
    let saved: Vec<Vec<Tensor<f64>>> =
        nets.iter().map(|n| n.layers().iter().flat_map(|l| l.buffers().to_vec()).collect()).collect();
    let restore = |nets: &mut [&mut Network<f64>]| {
        for (net, bufs) in nets.iter_mut().zip(&saved) {
            let mut it = bufs.iter();
            for l in net.layers_mut() {
                for b in &mut l.buffers {
                    *b = it.next().expect("buffer count unchanged").clone();
                }
            }
        }
    };
    nets.iter_mut().for_each(|n| n.zero_grads());
    loss(nets, true)?;
    restore(nets);
    let mut worst: f64 = 0.0;
    for ni in 0..nets.len() {
        if !nets[ni].trainable() {
            continue;
        }
        for li in 0..nets[ni].layers().len() {
            for pi in 0..nets[ni].layers()[li].params().len() {
                for e in 0..nets[ni].layers()[li].params()[pi].len() {
                    let analytic = nets[ni].layers()[li].grads()[pi].data()[e];
                    let orig = nets[ni].layers()[li].params()[pi].data()[e];
                    nets[ni].layers_mut()[li].params[pi].data_mut()[e] = orig + eps;
                    let up = loss(nets, false)?;
                    nets[ni].layers_mut()[li].params[pi].data_mut()[e] = orig - eps;
                    let down = loss(nets, false)?;
                    nets[ni].layers_mut()[li].params[pi].data_mut()[e] = orig;
                    worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
                }
            }
        }
    }
    restore(nets);
    nets.iter_mut().for_each(|n| n.clear_cache());
    Ok(worst)
}

/// Half squared error `0.5 * sum (y - t)^2` and its gradient.
pub fn half_squared_error(out: &Tensor<f64>, target: &[f64]) -> (f64, Tensor<f64>) {
    let mut g = out.clone();
    let mut loss = 0.0;
    for (gv, &t) in g.data_mut().iter_mut().zip(target) {
        let d = *gv - t;
        loss += 0.5 * d * d;
        *gv = d;
    }
    (loss, g)
}
