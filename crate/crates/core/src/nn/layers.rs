//! Layer kinds with cached forward state and exact backward passes.
//!
//! Spatial tensors are laid out `[N, C, H, W, D]`; dense tensors `[N, F]`.

use std::fmt;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3x3x3 cross-correlation, stride 1, zero padding 1, per-channel bias.
    Conv3d { in_channels: usize, out_channels: usize },
    MaxPool3d { window: [usize; 3] },
    /// Nearest-neighbor upsampling.
    Upsample { factor: [usize; 3] },
    Relu,
    Sigmoid,
    BatchNorm { channels: usize },
    Dense { inputs: usize, outputs: usize },
    /// Per-sample target shape (the batch axis is kept).
    Reshape { shape: Vec<usize> },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::MaxPool3d { .. } => "maxpool3d",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut it = line.split_whitespace();
        let kind = it.next().ok_or_else(|| Error::Config("empty layer line".into()))?;
        let nums: Vec<usize> = it
            .map(|t| t.parse().map_err(|_| Error::Config(format!("bad layer argument {t:?}"))))
            .collect::<Result<_>>()?;
        let want = |n: usize| -> Result<()> {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("{kind} expects {n} arguments, got {}", nums.len())))
            }
        };
        let spec = match kind {
            "conv3d" => {
                want(2)?;
                LayerSpec::Conv3d { in_channels: nums[0], out_channels: nums[1] }
            }
            "maxpool3d" => {
                want(3)?;
                LayerSpec::MaxPool3d { window: [nums[0], nums[1], nums[2]] }
            }
            "upsample" => {
                want(3)?;
                LayerSpec::Upsample { factor: [nums[0], nums[1], nums[2]] }
            }
            "relu" => {
                want(0)?;
                LayerSpec::Relu
            }
            "sigmoid" => {
                want(0)?;
                LayerSpec::Sigmoid
            }
            "batchnorm" => {
                want(1)?;
                LayerSpec::BatchNorm { channels: nums[0] }
            }
            "dense" => {
                want(2)?;
                LayerSpec::Dense { inputs: nums[0], outputs: nums[1] }
            }
            "reshape" => {
                if nums.is_empty() {
                    return Err(Error::Config("reshape needs a target shape".into()));
                }
                LayerSpec::Reshape { shape: nums }
            }
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        };
        Ok(spec)
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("{self} cannot take input {input:?}"));
        match self {
            LayerSpec::Conv3d { in_channels, out_channels } => {
                if input.len() != 4 || input[0] != *in_channels {
                    return Err(bad());
                }
                Ok(vec![*out_channels, input[1], input[2], input[3]])
            }
            LayerSpec::MaxPool3d { window } => {
                if input.len() != 4 || (0..3).any(|a| window[a] == 0 || input[a + 1] % window[a] != 0) {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] / window[0], input[2] / window[1], input[3] / window[2]])
            }
            LayerSpec::Upsample { factor } => {
                if input.len() != 4 || factor.contains(&0) {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] * factor[0], input[2] * factor[1], input[3] * factor[2]])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != *channels {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.iter().product::<usize>() != *inputs || input.len() != 1 {
                    return Err(bad());
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad());
                }
                Ok(shape.clone())
            }
        }
    }

    /// `(fan_in, fan_out)` of weight-bearing layers.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv3d { in_channels, out_channels } => Some((in_channels * 27, out_channels * 27)),
            LayerSpec::Dense { inputs, outputs } => Some((*inputs, *outputs)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind())?;
        match self {
            LayerSpec::Conv3d { in_channels, out_channels } => write!(f, " {in_channels} {out_channels}"),
            LayerSpec::MaxPool3d { window: w } | LayerSpec::Upsample { factor: w } => {
                write!(f, " {} {} {}", w[0], w[1], w[2])
            }
            LayerSpec::BatchNorm { channels } => write!(f, " {channels}"),
            LayerSpec::Dense { inputs, outputs } => write!(f, " {inputs} {outputs}"),
            LayerSpec::Reshape { shape } => {
                shape.iter().try_for_each(|s| write!(f, " {s}"))
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(()),
        }
    }
}

enum Cache<T> {
    Empty,
    Input(Tensor<T>),
    Output(Tensor<T>),
    Pool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Norm { xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    Shape(Vec<usize>),
}

pub struct Layer<T> {
    spec: LayerSpec,
    pub(crate) params: Vec<Tensor<T>>,
    pub(crate) grads: Vec<Tensor<T>>,
    /// Non-trainable state (batchnorm running statistics).
    pub(crate) buffers: Vec<Tensor<T>>,
    cache: Cache<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(spec: LayerSpec) -> Self {
        let (params, buffers) = match &spec {
            LayerSpec::Conv3d { in_channels, out_channels } => (
                vec![
                    Tensor::zeros(&[*out_channels, *in_channels, 3, 3, 3]),
                    Tensor::zeros(&[*out_channels]),
                ],
                vec![],
            ),
            LayerSpec::Dense { inputs, outputs } => {
                (vec![Tensor::zeros(&[*outputs, *inputs]), Tensor::zeros(&[*outputs])], vec![])
            }
            LayerSpec::BatchNorm { channels } => (
                vec![Tensor::full(&[*channels], T::one()), Tensor::zeros(&[*channels])],
                vec![Tensor::zeros(&[*channels]), Tensor::full(&[*channels], T::one())],
            ),
            _ => (vec![], vec![]),
        };
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Layer { spec, params, grads, buffers, cache: Cache::Empty }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self.spec {
            LayerSpec::Conv3d { .. } | LayerSpec::Dense { .. } => &["weight", "bias"],
            LayerSpec::BatchNorm { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self.spec {
            LayerSpec::BatchNorm { .. } => &["running_mean", "running_var"],
            _ => &[],
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn clear_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out_sample = self.spec.output_shape(&x.shape()[1..])?;
        let n = x.batch();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out_sample);
        match self.spec.clone() {
            LayerSpec::Conv3d { in_channels, out_channels } => {
                let sp = [x.shape()[2], x.shape()[3], x.shape()[4]];
                let s = sp[0] * sp[1] * sp[2];
                let k = in_channels * 27;
                let mut out = Tensor::zeros(&out_shape);
                let mut col = vec![T::zero(); k * s];
                let (w, b) = (&self.params[0], &self.params[1]);
                for i in 0..n {
                    im2col(x.sample(i), in_channels, sp, &mut col);
                    let o = &mut out.data_mut()[i * out_channels * s..(i + 1) * out_channels * s];
                    for (c, row) in o.chunks_exact_mut(s).enumerate() {
                        row.fill(b.data()[c]);
                    }
                    gemm(false, false, out_channels, s, k, T::one(), w.data(), &col, T::one(), o);
                }
                self.cache = Cache::Input(x);
                Ok(out)
            }
            LayerSpec::MaxPool3d { window } => {
                let (c, sp) = (x.shape()[1], [x.shape()[2], x.shape()[3], x.shape()[4]]);
                let osp = [out_sample[1], out_sample[2], out_sample[3]];
                let mut out = Tensor::zeros(&out_shape);
                let mut argmax = vec![0u32; out.len()];
                let in_plane = sp[0] * sp[1] * sp[2];
                let out_plane = osp[0] * osp[1] * osp[2];
                for plane in 0..n * c {
                    let src = &x.data()[plane * in_plane..(plane + 1) * in_plane];
                    for oi in 0..osp[0] {
                        for oj in 0..osp[1] {
                            for ok in 0..osp[2] {
                                let mut best = T::neg_infinity();
                                let mut best_idx = 0usize;
                                for a in 0..window[0] {
                                    for b in 0..window[1] {
                                        let row = ((oi * window[0] + a) * sp[1] + oj * window[1] + b) * sp[2];
                                        for cc in 0..window[2] {
                                            let idx = row + ok * window[2] + cc;
                                            if src[idx] > best {
                                                best = src[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                }
                                let o = plane * out_plane + (oi * osp[1] + oj) * osp[2] + ok;
                                out.data_mut()[o] = best;
                                argmax[o] = (plane * in_plane + best_idx) as u32;
                            }
                        }
                    }
                }
                self.cache = Cache::Pool { argmax, in_shape: x.shape().to_vec() };
                Ok(out)
            }
            LayerSpec::Upsample { factor } => {
                let (c, sp) = (x.shape()[1], [x.shape()[2], x.shape()[3], x.shape()[4]]);
                let osp = [out_sample[1], out_sample[2], out_sample[3]];
                let mut out = Tensor::zeros(&out_shape);
                let in_plane = sp[0] * sp[1] * sp[2];
                let out_plane = osp[0] * osp[1] * osp[2];
                for plane in 0..n * c {
                    let src = &x.data()[plane * in_plane..(plane + 1) * in_plane];
                    let dst = &mut out.data_mut()[plane * out_plane..(plane + 1) * out_plane];
                    for i in 0..osp[0] {
                        for j in 0..osp[1] {
                            let srow = ((i / factor[0]) * sp[1] + j / factor[1]) * sp[2];
                            let drow = (i * osp[1] + j) * osp[2];
                            for k in 0..osp[2] {
                                dst[drow + k] = src[srow + k / factor[2]];
                            }
                        }
                    }
                }
                self.cache = Cache::Shape(x.shape().to_vec());
                Ok(out)
            }
            LayerSpec::Relu => {
                let mut out = x;
                out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                self.cache = Cache::Output(out.clone());
                Ok(out)
            }
            LayerSpec::Sigmoid => {
                let mut out = x;
                out.data_mut().iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
                self.cache = Cache::Output(out.clone());
                Ok(out)
            }
            LayerSpec::BatchNorm { channels } => self.batchnorm_forward(x, channels, mode),
            LayerSpec::Dense { inputs, outputs } => {
                let mut out = Tensor::zeros(&out_shape);
                let (w, b) = (&self.params[0], &self.params[1]);
                for row in out.data_mut().chunks_exact_mut(outputs) {
                    row.copy_from_slice(b.data());
                }
                gemm(false, true, n, outputs, inputs, T::one(), x.data(), w.data(), T::one(), out.data_mut());
                self.cache = Cache::Input(x);
                Ok(out)
            }
            LayerSpec::Reshape { .. } => {
                let in_shape = x.shape().to_vec();
                let out = x.reshaped(&out_shape)?;
                self.cache = Cache::Shape(in_shape);
                Ok(out)
            }
        }
    }

    fn batchnorm_forward(&mut self, x: Tensor<T>, channels: usize, mode: Mode) -> Result<Tensor<T>> {
        let n = x.batch();
        let s = x.sample_len() / channels;
        let eps = T::from_f64(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidInput("batchnorm in train mode needs a batch of at least 2".into()));
                }
                let m = T::from_f64((n * s) as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for i in 0..n {
                    for c in 0..channels {
                        let seg = &x.sample(i)[c * s..(c + 1) * s];
                        mean[c] = mean[c] + seg.iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                for i in 0..n {
                    for c in 0..channels {
                        let seg = &x.sample(i)[c * s..(c + 1) * s];
                        var[c] = var[c] + seg.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                let mom = T::from_f64(BN_MOMENTUM);
                for c in 0..channels {
                    let rm = &mut self.buffers[0].data_mut()[c];
                    *rm = (T::one() - mom) * *rm + mom * mean[c];
                    let rv = &mut self.buffers[1].data_mut()[c];
                    *rv = (T::one() - mom) * *rv + mom * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (self.buffers[0].data().to_vec(), self.buffers[1].data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x;
        let mut out = Tensor::zeros(xhat.shape());
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let sl = channels * s;
        for i in 0..n {
            for c in 0..channels {
                let range = i * sl + c * s..i * sl + (c + 1) * s;
                let xs = &mut xhat.data_mut()[range.clone()];
                let os = &mut out.data_mut()[range];
                for (xv, ov) in xs.iter_mut().zip(os.iter_mut()) {
                    *xv = (*xv - mean[c]) * inv_std[c];
                    *ov = gamma[c] * *xv + beta[c];
                }
            }
        }
        self.cache = Cache::Norm { xhat, inv_std, train: mode == Mode::Train };
        Ok(out)
    }

    /// Backward pass from the cached forward state. Parameter gradients are
    /// accumulated when `param_grads` is set; the input gradient is returned
    /// when `input_grad` is set.
    pub fn backward(&mut self, g: &Tensor<T>, param_grads: bool, input_grad: bool) -> Result<Option<Tensor<T>>> {
        let missing = || Error::InvalidInput(format!("{} backward without cached forward", self.spec.kind()));
        match (self.spec.clone(), &self.cache) {
            (LayerSpec::Conv3d { in_channels, out_channels }, Cache::Input(x)) => {
                let n = x.batch();
                let sp = [x.shape()[2], x.shape()[3], x.shape()[4]];
                let s = sp[0] * sp[1] * sp[2];
                let k = in_channels * 27;
                let mut col = vec![T::zero(); k * s];
                let mut dcol = vec![T::zero(); if input_grad { k * s } else { 0 }];
                let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
                let w = &self.params[0];
                for i in 0..n {
                    let gs = g.sample(i);
                    if param_grads {
                        im2col(x.sample(i), in_channels, sp, &mut col);
                        gemm(false, true, out_channels, k, s, T::one(), gs, &col, T::one(), self.grads[0].data_mut());
                        for (c, row) in gs.chunks_exact(s).enumerate() {
                            let db = &mut self.grads[1].data_mut()[c];
                            *db = *db + row.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(true, false, k, s, out_channels, T::one(), w.data(), gs, T::zero(), &mut dcol);
                        let len = in_channels * s;
                        col2im(&dcol, in_channels, sp, &mut dx.data_mut()[i * len..(i + 1) * len]);
                    }
                }
                Ok(dx)
            }
            (LayerSpec::MaxPool3d { .. }, Cache::Pool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                for (o, &src) in argmax.iter().enumerate() {
                    let v = &mut dx.data_mut()[src as usize];
                    *v = *v + g.data()[o];
                }
                Ok(Some(dx))
            }
            (LayerSpec::Upsample { factor }, Cache::Shape(in_shape)) => {
                let mut dx = Tensor::zeros(in_shape);
                let sp = [in_shape[2], in_shape[3], in_shape[4]];
                let osp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
                let in_plane = sp[0] * sp[1] * sp[2];
                let out_plane = osp[0] * osp[1] * osp[2];
                for plane in 0..in_shape[0] * in_shape[1] {
                    let src = &g.data()[plane * out_plane..(plane + 1) * out_plane];
                    let dst = &mut dx.data_mut()[plane * in_plane..(plane + 1) * in_plane];
                    for i in 0..osp[0] {
                        for j in 0..osp[1] {
                            let drow = ((i / factor[0]) * sp[1] + j / factor[1]) * sp[2];
                            let srow = (i * osp[1] + j) * osp[2];
                            for k in 0..osp[2] {
                                dst[drow + k / factor[2]] = dst[drow + k / factor[2]] + src[srow + k];
                            }
                        }
                    }
                }
                Ok(Some(dx))
            }
            (LayerSpec::Relu, Cache::Output(y)) => {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yv <= T::zero() {
                        *d = T::zero();
                    }
                }
                Ok(Some(dx))
            }
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d = *d * yv * (T::one() - yv);
                }
                Ok(Some(dx))
            }
            (LayerSpec::BatchNorm { channels }, Cache::Norm { xhat, inv_std, train }) => {
                let n = xhat.batch();
                let s = xhat.sample_len() / channels;
                let sl = channels * s;
                let gamma = self.params[0].data().to_vec();
                let mut dx = Tensor::zeros(xhat.shape());
                let m = T::from_f64((n * s) as f64);
                for c in 0..channels {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        let r = i * sl + c * s..i * sl + (c + 1) * s;
                        for (&gv, &xv) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            sum_g = sum_g + gv;
                            sum_gx = sum_gx + gv * xv;
                        }
                    }
                    if param_grads {
                        let dg = &mut self.grads[0].data_mut()[c];
                        *dg = *dg + sum_gx;
                        let db = &mut self.grads[1].data_mut()[c];
                        *db = *db + sum_g;
                    }
                    let scale = gamma[c] * inv_std[c];
                    for i in 0..n {
                        let r = i * sl + c * s..i * sl + (c + 1) * s;
                        for ((d, &gv), &xv) in dx.data_mut()[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&xhat.data()[r]) {
                            *d = if *train {
                                scale * (gv - sum_g / m - xv * sum_gx / m)
                            } else {
                                scale * gv
                            };
                        }
                    }
                }
                Ok(Some(dx))
            }
            (LayerSpec::Dense { inputs, outputs }, Cache::Input(x)) => {
                let n = x.batch();
                if param_grads {
                    gemm(true, false, outputs, inputs, n, T::one(), g.data(), x.data(), T::one(), self.grads[0].data_mut());
                    for row in g.data().chunks_exact(outputs) {
                        for (db, &gv) in self.grads[1].data_mut().iter_mut().zip(row) {
                            *db = *db + gv;
                        }
                    }
                }
                if !input_grad {
                    return Ok(None);
                }
                let mut dx = Tensor::zeros(x.shape());
                gemm(false, false, n, inputs, outputs, T::one(), g.data(), self.params[0].data(), T::zero(), dx.data_mut());
                Ok(Some(dx))
            }
            (LayerSpec::Reshape { .. }, Cache::Shape(in_shape)) => Ok(Some(g.clone().reshaped(in_shape)?)),
            _ => Err(missing()),
        }
    }
}

/// Unfolds 3x3x3 neighborhoods (zero padded) into a `[C*27, H*W*D]` matrix.
fn im2col<T: Real>(x: &[T], channels: usize, sp: [usize; 3], col: &mut [T]) {
    let [h, w, d] = sp;
    let s = h * w * d;
    for c in 0..channels {
        let src = &x[c * s..(c + 1) * s];
        for di in 0..3 {
            for dj in 0..3 {
                for dk in 0..3 {
                    let row = ((c * 3 + di) * 3 + dj) * 3 + dk;
                    let dst = &mut col[row * s..(row + 1) * s];
                    let k_lo = 1usize.saturating_sub(dk);
                    let k_hi = (d + 1 - dk).min(d);
                    for i in 0..h {
                        let si = i as isize + di as isize - 1;
                        for j in 0..w {
                            let sj = j as isize + dj as isize - 1;
                            let drow = &mut dst[(i * w + j) * d..(i * w + j + 1) * d];
                            if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                drow.fill(T::zero());
                                continue;
                            }
                            let srow = (si as usize * w + sj as usize) * d;
                            drow[..k_lo].fill(T::zero());
                            drow[k_hi..].fill(T::zero());
                            let off = srow + k_lo + dk - 1;
                            drow[k_lo..k_hi].copy_from_slice(&src[off..off + (k_hi - k_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(col: &[T], channels: usize, sp: [usize; 3], dx: &mut [T]) {
    let [h, w, d] = sp;
    let s = h * w * d;
    for c in 0..channels {
        let dst = &mut dx[c * s..(c + 1) * s];
        for di in 0..3 {
            for dj in 0..3 {
                for dk in 0..3 {
                    let row = ((c * 3 + di) * 3 + dj) * 3 + dk;
                    let src = &col[row * s..(row + 1) * s];
                    let k_lo = 1usize.saturating_sub(dk);
                    let k_hi = (d + 1 - dk).min(d);
                    for i in 0..h {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + dj as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let srow = &src[(i * w + j) * d..(i * w + j + 1) * d];
                            let off = (si as usize * w + sj as usize) * d + k_lo + dk - 1;
                            for (o, &v) in dst[off..off + (k_hi - k_lo)].iter_mut().zip(&srow[k_lo..k_hi]) {
                                *o = *o + v;
                            }
                        }
                    }
                }
            }
        }
    }
}
