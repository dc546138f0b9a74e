//! Parameter-free patch-pooling codec between occupancy grids and dense latents.
//!
//! Channel 0 of each latent cell carries `2 * (occupied fraction of its patch) - 1`.
//! The remaining channels are fixed cosine features of the cell position so the
//! denoiser has spatial anchors. Every encoded value lies in `[-1, 1]`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::voxel::{Frame, OccupancyGrid};

const LAT_MAGIC: &[u8; 8] = b"LVGLAT1\0";

/// Dense `H x W x L x d` latent values in `(h, w, l, channel)` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    dims: [usize; 3],
    channels: usize,
    values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(dims: [usize; 3], channels: usize, values: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * channels;
        if dims.contains(&0) || channels == 0 {
            return Err(Error::Shape(format!("degenerate latent {dims:?}x{channels}")));
        }
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for latent {dims:?}x{channels}",
                values.len()
            )));
        }
        Ok(LatentGrid {
            dims,
            channels,
            values,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        LatentGrid {
            dims,
            channels,
            values: vec![0.0; dims.iter().product::<usize>() * channels],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of latent cells `N = H * W * L`.
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, cell: [usize; 3], channel: usize) -> f32 {
        let [h, w, l] = cell;
        let i = ((h * self.dims[1] + w) * self.dims[2] + l) * self.channels + channel;
        self.values[i]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `{LVGLAT1\0, u8 H, u8 W, u8 L, u8 d, f32 LE values}`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.dims.iter().any(|&d| d > u8::MAX as usize) || self.channels > u8::MAX as usize {
            return Err(Error::Format("latent dims exceed u8 header fields".into()));
        }
        w.write_all(LAT_MAGIC)?;
        w.write_all(&[
            self.dims[0] as u8,
            self.dims[1] as u8,
            self.dims[2] as u8,
            self.channels as u8,
        ])?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LAT_MAGIC {
            return Err(Error::Format("bad latent magic".into()));
        }
        let mut hdr = [0u8; 4];
        r.read_exact(&mut hdr)?;
        let dims = [hdr[0] as usize, hdr[1] as usize, hdr[2] as usize];
        let channels = hdr[3] as usize;
        let n = dims.iter().product::<usize>() * channels;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf));
        }
        LatentGrid::new(dims, channels, values)
    }
}

/// Fixed positional feature for `channel >= 1` at `cell` of a grid with `dims`.
///
/// Channel `j` uses axis `(j - 1) % 3` and frequency `(j - 1) / 3 + 1`:
/// `cos(pi * freq * u)` with `u` the normalized cell-center coordinate.
pub fn positional_feature(channel: usize, cell: [usize; 3], dims: [usize; 3]) -> f32 {
    debug_assert!(channel >= 1);
    let axis = (channel - 1) % 3;
    let freq = ((channel - 1) / 3 + 1) as f64;
    let u = (cell[axis] as f64 + 0.5) / dims[axis] as f64;
    (PI * freq * u).cos() as f32
}

/// Patch-pooling codec with patch size `P_e` and decode threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Codec {
    pub patch: usize,
    pub channels: usize,
    pub threshold: f32,
}

impl Default for Codec {
    fn default() -> Self {
        Codec {
            patch: 2,
            channels: 8,
            threshold: 0.0,
        }
    }
}

impl Codec {
    pub fn new(patch: usize, channels: usize, threshold: f32) -> Result<Self> {
        if patch == 0 || channels == 0 {
            return Err(Error::Invalid("codec patch and channels must be positive".into()));
        }
        Ok(Codec {
            patch,
            channels,
            threshold,
        })
    }

    /// Latent dims for an occupancy resolution.
    pub fn latent_dims(&self, resolution: usize) -> Result<[usize; 3]> {
        if !resolution.is_multiple_of(self.patch) {
            return Err(Error::Invalid(format!(
                "resolution {resolution} not divisible by patch {}",
                self.patch
            )));
        }
        let n = resolution / self.patch;
        Ok([n, n, n])
    }

    /// Latent with channel 0 at -1 (nothing occupied) and the positional channels.
    pub fn empty_latent(&self, resolution: usize) -> Result<LatentGrid> {
        self.encode(&OccupancyGrid::empty(resolution, Frame::Scene))
    }

    pub fn encode(&self, grid: &OccupancyGrid) -> Result<LatentGrid> {
        let dims = self.latent_dims(grid.resolution())?;
        let p = self.patch;
        let patch_volume = (p * p * p) as f32;
        let mut values = Vec::with_capacity(dims.iter().product::<usize>() * self.channels);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for l in 0..dims[2] {
                    let mut occupied = 0usize;
                    for dh in 0..p {
                        for dw in 0..p {
                            for dl in 0..p {
                                occupied +=
                                    grid.get(h * p + dh, w * p + dw, l * p + dl) as usize;
                            }
                        }
                    }
                    values.push(2.0 * occupied as f32 / patch_volume - 1.0);
                    for c in 1..self.channels {
                        values.push(positional_feature(c, [h, w, l], dims));
                    }
                }
            }
        }
        LatentGrid::new(dims, self.channels, values)
    }

    pub fn decode(&self, latent: &LatentGrid, resolution: usize) -> Result<OccupancyGrid> {
        let dims = latent.dims();
        if dims.iter().any(|&d| d * self.patch != resolution) {
            return Err(Error::Shape(format!(
                "latent {dims:?} with patch {} cannot decode to resolution {resolution}",
                self.patch
            )));
        }
        let p = self.patch;
        let mut grid = OccupancyGrid::empty(resolution, Frame::Scene);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for l in 0..dims[2] {
                    if latent.get([h, w, l], 0) > self.threshold {
                        for dh in 0..p {
                            for dw in 0..p {
                                for dl in 0..p {
                                    grid.set(h * p + dh, w * p + dw, l * p + dl, true);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grid)
    }

    /// `decode(encode(grid))`, keeping the input frame.
    pub fn round_trip(&self, grid: &OccupancyGrid) -> Result<OccupancyGrid> {
        Ok(self
            .decode(&self.encode(grid)?, grid.resolution())?
            .with_frame(grid.frame()))
    }
}
