//! The `VOXG` binary voxel container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VOXG1"  u32 H  u32 W  u32 D  u32 channels  u8 kind  payload
//! ```
//!
//! `kind` is 0 for fp32, 1 for u8 binary and 2 for u8 ternary (`0` free,
//! `1` occupied, `2` unknown). The payload is channel-major, then row-major
//! with `D` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{
    GridDims, LogTsdfGrid, Observation, OccupancyGrid, SdfGrid, VoxelState, WeightGrid,
};

pub const MAGIC: &[u8; 5] = b"VOXG1";
const HEADER_LEN: usize = 5 + 4 * 4 + 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VoxgData {
    F32(Vec<f32>),
    Binary(Vec<u8>),
    Ternary(Vec<u8>),
}

impl VoxgData {
    fn kind(&self) -> u8 {
        match self {
            VoxgData::F32(_) => 0,
            VoxgData::Binary(_) => 1,
            VoxgData::Ternary(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            VoxgData::F32(v) => v.len(),
            VoxgData::Binary(v) | VoxgData::Ternary(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxgFile {
    pub dims: GridDims,
    pub channels: u32,
    pub data: VoxgData,
}

impl VoxgFile {
    pub fn new(dims: GridDims, channels: u32, data: VoxgData) -> Result<Self> {
        if channels == 0 || data.len() != dims.len() * channels as usize {
            return Err(Error::Shape(format!(
                "{} values for {channels} channel(s) of {dims}",
                data.len()
            )));
        }
        Ok(VoxgFile { dims, channels, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.dims.h, self.dims.w, self.dims.d] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.push(self.data.kind());
        match &self.data {
            VoxgData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxgData::Binary(v) | VoxgData::Ternary(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(origin, d);
        if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
            return Err(bad("missing VOXG1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let dims = GridDims::new(u32_at(5), u32_at(9), u32_at(13)).map_err(|e| bad(&e.to_string()))?;
        let channels = u32_at(17);
        let kind = bytes[21];
        let count = dims.len() * channels;
        let payload = &bytes[HEADER_LEN..];
        let data = match kind {
            0 => {
                if payload.len() != count * 4 {
                    return Err(bad("fp32 payload length mismatch"));
                }
                VoxgData::F32(
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )
            }
            1 | 2 => {
                if payload.len() != count {
                    return Err(bad("u8 payload length mismatch"));
                }
                let limit = if kind == 1 { 1 } else { 2 };
                if payload.iter().any(|&b| b > limit) {
                    return Err(bad("u8 payload value out of range"));
                }
                if kind == 1 {
                    VoxgData::Binary(payload.to_vec())
                } else {
                    VoxgData::Ternary(payload.to_vec())
                }
            }
            k => return Err(bad(&format!("unknown element kind {k}"))),
        };
        VoxgFile::new(dims, channels as u32, data).map_err(|e| bad(&e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(PathBuf::from(path))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::decode(&bytes, path)
    }

    fn single_f32(self, origin: &str) -> Result<(GridDims, Vec<f32>)> {
        match (self.channels, self.data) {
            (1, VoxgData::F32(v)) => Ok((self.dims, v)),
            _ => Err(Error::InvalidInput(format!("expected single-channel fp32 {origin}"))),
        }
    }
}

/// Conversion between grid value types and their `VOXG` representation.
pub trait VoxgCodec: Sized {
    fn to_voxg(&self) -> VoxgFile;
    fn from_voxg(file: VoxgFile) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_voxg().write(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_voxg(VoxgFile::read(path)?)
    }
}

impl VoxgCodec for OccupancyGrid {
    fn to_voxg(&self) -> VoxgFile {
        let data = VoxgData::Binary(self.values().iter().map(|&v| v as u8).collect());
        VoxgFile { dims: self.dims(), channels: 1, data }
    }

    fn from_voxg(file: VoxgFile) -> Result<Self> {
        match (file.channels, file.data) {
            (1, VoxgData::Binary(v)) => {
                OccupancyGrid::from_values(file.dims, v.into_iter().map(|b| b == 1).collect())
            }
            _ => Err(Error::InvalidInput("expected single-channel binary occupancy".into())),
        }
    }
}

impl VoxgCodec for Observation {
    fn to_voxg(&self) -> VoxgFile {
        let data = VoxgData::Ternary(self.states().iter().map(|&s| s as u8).collect());
        VoxgFile { dims: self.dims(), channels: 1, data }
    }

    fn from_voxg(file: VoxgFile) -> Result<Self> {
        match (file.channels, file.data) {
            (1, VoxgData::Ternary(v)) => Observation::from_states(
                file.dims,
                v.into_iter().map(|b| VoxelState::from_u8(b).expect("validated on decode")).collect(),
            ),
            _ => Err(Error::InvalidInput("expected single-channel ternary observation".into())),
        }
    }
}

impl VoxgCodec for SdfGrid {
    fn to_voxg(&self) -> VoxgFile {
        VoxgFile { dims: self.dims(), channels: 1, data: VoxgData::F32(self.values().to_vec()) }
    }

    fn from_voxg(file: VoxgFile) -> Result<Self> {
        let (dims, v) = file.single_f32("SDF")?;
        SdfGrid::from_values(dims, v)
    }
}

impl VoxgCodec for LogTsdfGrid {
    fn to_voxg(&self) -> VoxgFile {
        VoxgFile { dims: self.dims(), channels: 1, data: VoxgData::F32(self.values().to_vec()) }
    }

    fn from_voxg(file: VoxgFile) -> Result<Self> {
        let (dims, v) = file.single_f32("logTSDF")?;
        LogTsdfGrid::from_values(dims, v)
    }
}

impl VoxgCodec for WeightGrid {
    fn to_voxg(&self) -> VoxgFile {
        VoxgFile { dims: self.dims(), channels: 1, data: VoxgData::F32(self.values().to_vec()) }
    }

    fn from_voxg(file: VoxgFile) -> Result<Self> {
        let (dims, v) = file.single_f32("weights")?;
        WeightGrid::from_values(dims, v)
    }
}
