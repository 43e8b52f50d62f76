//! Voxel-grid value types and the deterministic grid math built on them:
//! flood filling, exact signed distance transforms, the logTSDF transform,
//! occupancy thresholding and free-space trust weights.
//!
//! All grids are stored row-major with the last axis (`D`) fastest, so the
//! flat index of voxel `(i, j, k)` is `(i * W + j) * D + k`. Voxel `(i, j, k)`
//! covers the box `[i, i+1) x [j, j+1) x [k, k+1)` in voxel coordinates and
//! has its center at `(i + 0.5, j + 0.5, k + 0.5)`.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};

/// Truncation bound of the logTSDF transform, `ln(1 + 5)`.
pub const LOG_TSDF_MAX: f64 = 1.791_759_469_228_055;

/// Largest accepted extent along any axis.
pub const MAX_EXTENT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl GridDims {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 || h > MAX_EXTENT || w > MAX_EXTENT || d > MAX_EXTENT {
            return Err(Error::InvalidDims(h, w, d));
        }
        Ok(GridDims { h, w, d })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    /// Total voxel count `R = H * W * D`.
    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    /// Longest axis; the normalized grid frame maps this extent to 1.0.
    pub fn max_extent(&self) -> usize {
        self.h.max(self.w).max(self.d)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.h && j < self.w && k < self.d);
        (i * self.w + j) * self.d + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.d;
        let j = (idx / self.d) % self.w;
        let i = idx / (self.d * self.w);
        [i, j, k]
    }

    /// Flat index of a signed voxel coordinate, `None` outside the grid.
    #[inline]
    pub fn checked_index(&self, c: [i64; 3]) -> Option<usize> {
        if c[0] < 0 || c[1] < 0 || c[2] < 0 {
            return None;
        }
        let (i, j, k) = (c[0] as usize, c[1] as usize, c[2] as usize);
        (i < self.h && j < self.w && k < self.d).then(|| self.index(i, j, k))
    }

    pub fn center(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5]
    }

    pub(crate) fn ensure_same(&self, other: &GridDims) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch(self.to_string(), other.to_string()));
        }
        Ok(())
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// Parses `HxWxD`, or a single extent for a cube.
impl std::str::FromStr for GridDims {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|t| t.trim().parse().map_err(|_| Error::InvalidInput(format!("bad grid dimensions {s:?}"))))
            .collect::<Result<_>>()?;
        match parts[..] {
            [n] => GridDims::cube(n),
            [h, w, d] => GridDims::new(h, w, d),
            _ => Err(Error::InvalidInput(format!("bad grid dimensions {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: GridDims,
    values: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(dims: GridDims) -> Self {
        OccupancyGrid { dims, values: vec![false; dims.len()] }
    }

    pub fn from_values(dims: GridDims, values: Vec<bool>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!("{} values for grid {dims}", values.len())));
        }
        Ok(OccupancyGrid { dims, values })
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let values = (0..dims.len())
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        OccupancyGrid { dims, values }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.values[self.dims.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.dims.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn set_index(&mut self, idx: usize, v: bool) {
        self.values[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn complement(&self) -> Self {
        OccupancyGrid { dims: self.dims, values: self.values.iter().map(|v| !v).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    dims: GridDims,
    values: Vec<f32>,
}

impl SdfGrid {
    pub fn from_values(dims: GridDims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!("{} values for grid {dims}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite SDF value".into()));
        }
        Ok(SdfGrid { dims, values })
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let values = (0..dims.len()).map(|idx| f(dims.center(idx)) as f32).collect();
        SdfGrid { dims, values }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.dims.index(i, j, k)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogTsdfGrid {
    dims: GridDims,
    values: Vec<f32>,
}

impl LogTsdfGrid {
    pub fn from_values(dims: GridDims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!("{} values for grid {dims}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || v.abs() > LOG_TSDF_MAX as f32) {
            return Err(Error::InvalidInput("logTSDF value outside [-ln 6, ln 6]".into()));
        }
        Ok(LogTsdfGrid { dims, values })
    }

    /// Grid filled with the truncation value, i.e. "far outside" everywhere.
    pub fn outside(dims: GridDims) -> Self {
        LogTsdfGrid { dims, values: vec![LOG_TSDF_MAX as f32; dims.len()] }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// State of one observed voxel. The discriminants are the on-disk encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VoxelState {
    Free = 0,
    Occupied = 1,
    Unknown = 2,
}

impl VoxelState {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(VoxelState::Free),
            1 => Some(VoxelState::Occupied),
            2 => Some(VoxelState::Unknown),
            _ => None,
        }
    }
}

/// Ternary observation grid: occupied, free, or unknown per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    dims: GridDims,
    states: Vec<VoxelState>,
}

impl Observation {
    pub fn unknown(dims: GridDims) -> Self {
        Observation { dims, states: vec![VoxelState::Unknown; dims.len()] }
    }

    pub fn from_states(dims: GridDims, states: Vec<VoxelState>) -> Result<Self> {
        if states.len() != dims.len() {
            return Err(Error::Shape(format!("{} states for grid {dims}", states.len())));
        }
        Ok(Observation { dims, states })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn states(&self) -> &[VoxelState] {
        &self.states
    }

    pub fn get(&self, idx: usize) -> VoxelState {
        self.states[idx]
    }

    pub fn set(&mut self, idx: usize, s: VoxelState) {
        self.states[idx] = s;
    }

    pub fn count(&self, s: VoxelState) -> usize {
        self.states.iter().filter(|&&x| x == s).count()
    }

    pub fn observed_count(&self) -> usize {
        self.dims.len() - self.count(VoxelState::Unknown)
    }

    /// Centers of all occupied voxels, in voxel coordinates.
    pub fn occupied_points(&self) -> Vec<[f64; 3]> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == VoxelState::Occupied)
            .map(|(idx, _)| self.dims.center(idx))
            .collect()
    }
}

/// Per-voxel trust weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrid {
    dims: GridDims,
    values: Vec<f32>,
}

impl WeightGrid {
    pub fn uniform(dims: GridDims, value: f32) -> Result<Self> {
        Self::from_values(dims, vec![value; dims.len()])
    }

    pub fn from_values(dims: GridDims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!("{} weights for grid {dims}", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("weight outside [0, 1]".into()));
        }
        Ok(WeightGrid { dims, values })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

const NEIGHBORS6: [[i64; 3]; 6] =
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Marks every voxel that cannot be reached from the grid boundary through
/// 6-connected unoccupied voxels as occupied.
pub fn fill_interior(surface: &OccupancyGrid) -> OccupancyGrid {
    let dims = surface.dims;
    let mut outside = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for idx in 0..dims.len() {
        let [i, j, k] = dims.coords(idx);
        let on_boundary =
            i == 0 || j == 0 || k == 0 || i == dims.h - 1 || j == dims.w - 1 || k == dims.d - 1;
        if on_boundary && !surface.values[idx] {
            outside[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let [i, j, k] = dims.coords(idx);
        for n in NEIGHBORS6 {
            let c = [i as i64 + n[0], j as i64 + n[1], k as i64 + n[2]];
            if let Some(nidx) = dims.checked_index(c) {
                if !outside[nidx] && !surface.values[nidx] {
                    outside[nidx] = true;
                    queue.push_back(nidx);
                }
            }
        }
    }
    OccupancyGrid { dims, values: outside.into_iter().map(|o| !o).collect() }
}

const EDT_INF: f64 = 1e20;

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas rooted at each sample).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel center
/// to the nearest center with `site[idx] == true`.
pub(crate) fn squared_distance_to_sites(dims: GridDims, site: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { EDT_INF }).collect();
    let n = dims.max_extent();
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let [h, w, d] = dims.extents();

    // along D
    for i in 0..h {
        for j in 0..w {
            let base = dims.index(i, j, 0);
            f[..d].copy_from_slice(&grid[base..base + d]);
            edt_1d(&f[..d], &mut out[..d], &mut v, &mut z);
            grid[base..base + d].copy_from_slice(&out[..d]);
        }
    }
    // along W
    for i in 0..h {
        for k in 0..d {
            for j in 0..w {
                f[j] = grid[dims.index(i, j, k)];
            }
            edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
            for j in 0..w {
                grid[dims.index(i, j, k)] = out[j];
            }
        }
    }
    // along H
    for j in 0..w {
        for k in 0..d {
            for i in 0..h {
                f[i] = grid[dims.index(i, j, k)];
            }
            edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
            for i in 0..h {
                grid[dims.index(i, j, k)] = out[i];
            }
        }
    }
    grid
}

/// Signed distance transform of a filled occupancy grid.
///
/// Unoccupied voxels get the distance to the nearest occupied center;
/// occupied voxels get `-(d - 1)` where `d` is the distance to the nearest
/// unoccupied center, so the surface voxel layer sits exactly at zero.
pub fn signed_distance_transform(filled: &OccupancyGrid) -> Result<SdfGrid> {
    let occupied = filled.count();
    if occupied == 0 {
        return Err(Error::Degenerate("signed distance transform of an empty grid".into()));
    }
    if occupied == filled.dims.len() {
        return Err(Error::Degenerate("signed distance transform of a full grid".into()));
    }
    let to_occupied = squared_distance_to_sites(filled.dims, &filled.values);
    let free: Vec<bool> = filled.values.iter().map(|v| !v).collect();
    let to_free = squared_distance_to_sites(filled.dims, &free);
    let values = filled
        .values
        .iter()
        .zip(to_occupied.iter().zip(&to_free))
        .map(|(&occ, (&d_occ, &d_free))| {
            if occ {
                -(d_free.sqrt() - 1.0) as f32
            } else {
                d_occ.sqrt() as f32
            }
        })
        .collect();
    Ok(SdfGrid { dims: filled.dims, values })
}

/// `sign(v) * ln(1 + min(5, |v|))`.
#[inline]
pub fn log_tsdf_value(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    v.signum() * (1.0 + v.abs().min(5.0)).ln()
}

/// Inverse of [`log_tsdf_value`] on the open range `(-ln 6, ln 6)`.
#[inline]
pub fn inverse_log_tsdf_value(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    v.signum() * (v.abs().exp() - 1.0)
}

pub fn log_tsdf(sdf: &SdfGrid) -> LogTsdfGrid {
    let values = sdf.values.iter().map(|&v| log_tsdf_value(v as f64) as f32).collect();
    LogTsdfGrid { dims: sdf.dims, values }
}

/// Maps predicted logTSDF values back to voxel-unit distances.
pub fn sdf_from_log_tsdf(dims: GridDims, values: &[f64]) -> Result<SdfGrid> {
    SdfGrid::from_values(dims, values.iter().map(|&v| inverse_log_tsdf_value(v) as f32).collect())
}

/// Voxel is occupied iff its signed distance is non-positive.
pub fn occupancy_from_sdf(sdf: &SdfGrid) -> OccupancyGrid {
    OccupancyGrid { dims: sdf.dims, values: sdf.values.iter().map(|&v| v <= 0.0).collect() }
}

/// `kappa_i = 1 - mean_m y_{m,i}` over the reference shapes.
pub fn free_space_weights(references: &[OccupancyGrid]) -> Result<WeightGrid> {
    let first = references
        .first()
        .ok_or_else(|| Error::InvalidInput("free-space weights need at least one reference".into()))?;
    let dims = first.dims;
    let mut counts = vec![0u32; dims.len()];
    for r in references {
        dims.ensure_same(&r.dims)?;
        for (c, &v) in counts.iter_mut().zip(&r.values) {
            *c += v as u32;
        }
    }
    let m = references.len() as f64;
    let values = counts.iter().map(|&c| (1.0 - c as f64 / m) as f32).collect();
    Ok(WeightGrid { dims, values })
}

/// Fraction of voxels that are observed (occupied or free).
pub fn supervision_fraction(obs: &Observation) -> f64 {
    obs.observed_count() as f64 / obs.dims.len() as f64
}

/// Shifts a grid by an integer offset, filling vacated voxels with `fill`.
pub(crate) fn shift_values<T: Copy>(dims: GridDims, values: &[T], offset: [i64; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; values.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let [i, j, k] = dims.coords(idx);
        let src = [i as i64 - offset[0], j as i64 - offset[1], k as i64 - offset[2]];
        if let Some(sidx) = dims.checked_index(src) {
            *o = values[sidx];
        }
    }
    out
}
