//! Shape samples, the encoder/decoder architecture and the glue between
//! grids and network tensors.

use crate::error::{Error, Result};
use crate::grid::{
    inverse_log_tsdf_value, log_tsdf, signed_distance_transform, GridDims, LogTsdfGrid, Observation,
    OccupancyGrid, SdfGrid, VoxelState,
};
use crate::nn::{LayerSpec, Mode, Network, Real, Tensor};

/// Occupancy plus logTSDF of one reference shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub occupancy: OccupancyGrid,
    pub log_tsdf: LogTsdfGrid,
}

impl ShapeSample {
    /// Builds both channels from a filled occupancy grid.
    pub fn from_filled(filled: OccupancyGrid) -> Result<Self> {
        let sdf = signed_distance_transform(&filled)?;
        Ok(ShapeSample { log_tsdf: log_tsdf(&sdf), occupancy: filled })
    }

    pub fn new(occupancy: OccupancyGrid, log_tsdf: LogTsdfGrid) -> Result<Self> {
        occupancy.dims().ensure_same(&log_tsdf.dims())?;
        Ok(ShapeSample { occupancy, log_tsdf })
    }

    pub fn dims(&self) -> GridDims {
        self.occupancy.dims()
    }

    /// Two-channel network input `[occupancy, logTSDF]`.
    pub fn to_input<T: Real>(&self) -> Tensor<T> {
        let dims = self.dims();
        let mut data: Vec<T> = self.occupancy.values().iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        data.extend(self.log_tsdf.values().iter().map(|&v| T::from_f64(v as f64)));
        Tensor::from_vec(&[2, dims.h, dims.w, dims.d], data).expect("sized from dims")
    }
}

/// Two-channel network encoding of an observation: occupied mask, free mask.
/// Unknown voxels are zero in both.
pub fn observation_input<T: Real>(obs: &Observation) -> Tensor<T> {
    let dims = obs.dims();
    let n = dims.len();
    let mut data = vec![T::zero(); 2 * n];
    for (i, s) in obs.states().iter().enumerate() {
        match s {
            VoxelState::Occupied => data[i] = T::one(),
            VoxelState::Free => data[n + i] = T::one(),
            VoxelState::Unknown => {}
        }
    }
    Tensor::from_vec(&[2, dims.h, dims.w, dims.d], data).expect("sized from dims")
}

/// Encoder/decoder layout: per stage `convs_per_stage` convolutions (each
/// followed by ReLU and batchnorm) and a pooling step; the decoder mirrors it
/// with nearest-neighbor upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub dims: GridDims,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub latent: usize,
}

impl Architecture {
    pub fn new(dims: GridDims, widths: Vec<usize>, convs_per_stage: usize, latent: usize) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || convs_per_stage == 0 || latent == 0 {
            return Err(Error::Config(format!(
                "invalid architecture: widths {widths:?}, {convs_per_stage} conv(s) per stage, latent {latent}"
            )));
        }
        let arch = Architecture { dims, widths, convs_per_stage, latent };
        arch.pool_windows()?;
        Ok(arch)
    }

    /// Pooling window per stage and axis: 2 where the extent is even,
    /// otherwise 3 where divisible by 3, otherwise 1.
    pub fn pool_windows(&self) -> Result<Vec<[usize; 3]>> {
        let mut ext = self.dims.extents();
        let mut out = Vec::new();
        for _ in &self.widths {
            let mut win = [1; 3];
            for a in 0..3 {
                win[a] = if ext[a] % 2 == 0 {
                    2
                } else if ext[a] % 3 == 0 {
                    3
                } else {
                    1
                };
                ext[a] /= win[a];
            }
            out.push(win);
        }
        if ext.iter().product::<usize>() * self.widths[self.widths.len() - 1] > 4096 {
            return Err(Error::Config(format!("grid {} does not pool down far enough", self.dims)));
        }
        Ok(out)
    }

    pub fn bottleneck(&self) -> [usize; 3] {
        let mut ext = self.dims.extents();
        for w in self.pool_windows().expect("validated on construction") {
            for a in 0..3 {
                ext[a] /= w[a];
            }
        }
        ext
    }

    fn flat_features(&self) -> usize {
        self.bottleneck().iter().product::<usize>() * self.widths[self.widths.len() - 1]
    }

    pub fn encoder_specs(&self, in_channels: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c = in_channels;
        for (w, win) in self.widths.iter().zip(self.pool_windows().expect("validated")) {
            for _ in 0..self.convs_per_stage {
                specs.push(LayerSpec::Conv3d { in_channels: c, out_channels: *w });
                specs.push(LayerSpec::Relu);
                specs.push(LayerSpec::BatchNorm { channels: *w });
                c = *w;
            }
            specs.push(LayerSpec::MaxPool3d { window: win });
        }
        let f = self.flat_features();
        specs.push(LayerSpec::Reshape { shape: vec![f] });
        // mean and log-variance heads side by side
        specs.push(LayerSpec::Dense { inputs: f, outputs: 2 * self.latent });
        specs
    }

    /// Decoder from `Q` latents to `[2, H, W, D]`: occupancy logits and
    /// logTSDF means.
    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let f = self.flat_features();
        let b = self.bottleneck();
        let last = self.widths[self.widths.len() - 1];
        let mut specs = vec![
            LayerSpec::Dense { inputs: self.latent, outputs: f },
            LayerSpec::Relu,
            LayerSpec::BatchNorm { channels: f },
            LayerSpec::Reshape { shape: vec![last, b[0], b[1], b[2]] },
        ];
        let windows = self.pool_windows().expect("validated");
        let mut c = last;
        for s in (0..self.widths.len()).rev() {
            specs.push(LayerSpec::Upsample { factor: windows[s] });
            let target = if s > 0 { self.widths[s - 1] } else { self.widths[0] };
            for _ in 0..self.convs_per_stage {
                specs.push(LayerSpec::Conv3d { in_channels: c, out_channels: target });
                specs.push(LayerSpec::Relu);
                specs.push(LayerSpec::BatchNorm { channels: target });
                c = target;
            }
        }
        specs.push(LayerSpec::Conv3d { in_channels: c, out_channels: 2 });
        specs
    }

    pub fn encoder<T: Real>(&self, in_channels: usize, seed: u64) -> Result<Network<T>> {
        let d = self.dims;
        let mut net = Network::new(&[in_channels, d.h, d.w, d.d], self.encoder_specs(in_channels))?;
        net.glorot_init(seed);
        Ok(net)
    }

    pub fn decoder<T: Real>(&self, seed: u64) -> Result<Network<T>> {
        let mut net = Network::new(&[self.latent], self.decoder_specs())?;
        net.glorot_init(seed);
        Ok(net)
    }

    /// Recovers the architecture of a loaded encoder/decoder pair.
    pub fn from_networks<T: Real>(encoder: &Network<T>, decoder: &Network<T>) -> Result<Self> {
        let s = encoder.input_shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("encoder input {s:?} is not volumetric")));
        }
        let dims = GridDims::new(s[1], s[2], s[3])?;
        let specs = encoder.specs();
        let pools = specs.iter().filter(|l| matches!(l, LayerSpec::MaxPool3d { .. })).count();
        let convs = specs.iter().filter(|l| matches!(l, LayerSpec::Conv3d { .. })).count();
        if pools == 0 || convs % pools != 0 {
            return Err(Error::Shape("encoder does not follow the staged layout".into()));
        }
        let outs: Vec<usize> = specs
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv3d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        let widths = outs.chunks(convs / pools).map(|c| c[0]).collect();
        let latent = decoder.input_shape()[0];
        let arch = Architecture::new(dims, widths, convs / pools, latent)?;
        if arch.encoder_specs(s[0]) != specs || arch.decoder_specs() != decoder.specs() {
            return Err(Error::Shape("networks do not match a staged architecture".into()));
        }
        Ok(arch)
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentDistribution {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(Error::Shape(format!("latent mean {} vs log-variance {}", mean.len(), log_var.len())));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite latent distribution".into()));
        }
        Ok(LatentDistribution { mean, log_var })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Splits encoder outputs `[N, 2Q]` into per-sample distributions.
    pub fn from_encoder_output<T: Real>(out: &Tensor<T>) -> Vec<LatentDistribution> {
        let q = out.sample_len() / 2;
        (0..out.batch())
            .map(|n| {
                let s = out.sample(n);
                LatentDistribution {
                    mean: s[..q].iter().map(|v| v.as_f64()).collect(),
                    log_var: s[q..].iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect()
    }
}

/// Per-voxel decoder prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub dims: GridDims,
    /// Occupancy probabilities.
    pub theta: Vec<f64>,
    /// Predicted logTSDF means.
    pub mu: Vec<f64>,
}

impl DecoderOutput {
    /// Splits raw decoder outputs `[N, 2, H, W, D]` (logits, means).
    pub fn from_decoder_output<T: Real>(dims: GridDims, out: &Tensor<T>) -> Vec<DecoderOutput> {
        let n = dims.len();
        (0..out.batch())
            .map(|b| {
                let s = out.sample(b);
                DecoderOutput {
                    dims,
                    theta: s[..n].iter().map(|&v| sigmoid(v.as_f64())).collect(),
                    mu: s[n..].iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect()
    }

    /// Occupancy head thresholded at 0.5.
    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid::from_values(self.dims, self.theta.iter().map(|&t| t > 0.5).collect()).expect("sized")
    }

    /// SDF recovered from the logTSDF head.
    pub fn sdf(&self) -> SdfGrid {
        let v = self.mu.iter().map(|&m| inverse_log_tsdf_value(m) as f32).collect();
        SdfGrid::from_values(self.dims, v).expect("sized")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Encodes a batch and returns the latent distributions.
pub fn encode<T: Real>(encoder: &mut Network<T>, input: Tensor<T>, mode: Mode) -> Result<Vec<LatentDistribution>> {
    let out = encoder.forward(input, mode)?;
    Ok(LatentDistribution::from_encoder_output(&out))
}

/// Decodes latent codes `[N, Q]`.
pub fn decode<T: Real>(decoder: &mut Network<T>, dims: GridDims, z: &[Vec<f64>], mode: Mode) -> Result<Vec<DecoderOutput>> {
    if z.is_empty() {
        return Ok(Vec::new());
    }
    let q = decoder.input_shape()[0];
    let mut data = Vec::with_capacity(z.len() * q);
    for code in z {
        if code.len() != q {
            return Err(Error::Shape(format!("latent code of length {} for decoder width {q}", code.len())));
        }
        data.extend(code.iter().map(|&v| T::from_f64(v)));
    }
    let out = decoder.forward(Tensor::from_vec(&[z.len(), q], data)?, mode)?;
    Ok(DecoderOutput::from_decoder_output(dims, &out))
}
