//! Grid types shared by every stage of the pipeline.
//!
//! All grids are stored row-major with x fastest. Multi-channel grids
//! ([`FlowField`], [`Planes`]) are channel-planar: every value of channel 0,
//! then every value of channel 1, and so on.

mod codec;

pub use codec::{
    decode_depth_map, decode_flow, decode_volume, encode_depth_map, encode_flow, encode_volume,
    read_depth_map, read_flow, read_volume, sniff_magic, write_depth_map, write_flow,
    write_volume, FileKind, DEPTH_MAGIC, FLOW_MAGIC, VOLUME_MAGIC,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default isotropic voxel edge length in micrometers.
pub const DEFAULT_VOXEL_PITCH_UM: f64 = 6.0;

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::domain(format!("zero dimension in {dims:?}")));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::domain(format!(
            "{what}: expected {expected} elements, got {got}"
        )));
    }
    Ok(())
}

/// Single-channel scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&[width, height])?;
        check_len(width * height, data.len(), "grid")?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        check_dims(&[width, height])?;
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Rank-3 intensity volume, x fastest then y then depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    width: usize,
    height: usize,
    depth: usize,
    voxels: Vec<T>,
    voxel_pitch_um: T,
}

impl<T: Scalar> Volume<T> {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        voxels: Vec<T>,
        voxel_pitch_um: T,
    ) -> Result<Self> {
        check_dims(&[width, height, depth])?;
        check_len(width * height * depth, voxels.len(), "volume")?;
        if !(voxel_pitch_um > T::zero() && voxel_pitch_um.is_finite()) {
            return Err(Error::domain(format!(
                "voxel pitch must be positive, got {voxel_pitch_um}"
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self {
            width,
            height,
            depth,
            voxels,
            voxel_pitch_um,
        })
    }

    pub fn zeros(width: usize, height: usize, depth: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            depth,
            vec![T::zero(); width * height * depth],
            T::of(DEFAULT_VOXEL_PITCH_UM),
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        depth: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        check_dims(&[width, height, depth])?;
        let mut voxels = Vec::with_capacity(width * height * depth);
        for z in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(width, height, depth, voxels, T::of(DEFAULT_VOXEL_PITCH_UM))
    }

    pub fn with_pitch(mut self, voxel_pitch_um: T) -> Result<Self> {
        if !(voxel_pitch_um > T::zero() && voxel_pitch_um.is_finite()) {
            return Err(Error::domain("voxel pitch must be positive"));
        }
        self.voxel_pitch_um = voxel_pitch_um;
        Ok(self)
    }

    /// Flat offset of voxel `(x, y, z)`: `x + width * (y + height * z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.index(x, y, z)]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn voxel_pitch_um(&self) -> T {
        self.voxel_pitch_um
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    /// Applies `f` to every voxel.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.depth,
            self.voxels.iter().map(|&v| f(v)).collect(),
            self.voxel_pitch_um,
        )
    }
}

/// En-face depth map with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        check_dims(&[width, height])?;
        check_len(width * height, values.len(), "depth map values")?;
        check_len(width * height, valid.len(), "depth map mask")?;
        if let Some(i) = values
            .iter()
            .zip(&valid)
            .position(|(v, &ok)| ok && !v.is_finite())
        {
            return Err(Error::domain(format!(
                "non-finite depth at valid pixel {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Map with every pixel valid.
    pub fn from_values(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(width, height, values, vec![true; n])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let grid = Grid::from_fn(width, height, f)?;
        Self::from_values(width, height, grid.into_data())
    }

    pub fn from_grid(grid: Grid<T>) -> Result<Self> {
        let (w, h) = (grid.width(), grid.height());
        Self::from_values(w, h, grid.into_data())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Copy of the values as a plain grid (invalid pixels keep their stored value).
    pub fn to_grid(&self) -> Grid<T> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.values.clone(),
        }
    }

    /// Adds `c` to every value, keeping the mask.
    pub fn offset(&self, c: T) -> Self {
        self.map_values(|v| v + c)
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Same values, mask replaced by `self.valid & other`.
    pub fn restrict(&self, mask: &[bool]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.clone(),
            valid: self.valid.iter().zip(mask).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| U::of(v)).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// One 8-bit census descriptor per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusMap {
    width: usize,
    height: usize,
    codes: Vec<u8>,
    valid: Vec<bool>,
}

impl CensusMap {
    pub fn new(width: usize, height: usize, codes: Vec<u8>, valid: Vec<bool>) -> Result<Self> {
        check_dims(&[width, height])?;
        check_len(width * height, codes.len(), "census codes")?;
        check_len(width * height, valid.len(), "census mask")?;
        Ok(Self {
            width,
            height,
            codes,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn code(&self, x: usize, y: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Multi-channel planar grid (network inputs, census bit planes).
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Planes<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&[width, height, channels])?;
        check_len(width * height * channels, data.len(), "planes")?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![T::zero(); width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Per-pixel displacement field in voxels, channel order (Δx, Δy[, Δz]).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    /// `data` is channel-planar: all Δx, then all Δy, then all Δz.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        check_dims(&[width, height])?;
        if channels != 2 && channels != 3 {
            return Err(Error::domain(format!(
                "flow must have 2 or 3 channels, got {channels}"
            )));
        }
        check_len(width * height * channels, data.len(), "flow")?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite flow component at {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![T::zero(); width * height * channels],
        )
    }

    /// Field with the same vector at every pixel; `vector.len()` is the channel count.
    pub fn constant(width: usize, height: usize, vector: &[T]) -> Result<Self> {
        let n = width * height;
        let data = vector
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        Self::new(width, height, vector.len(), data)
    }

    /// Builds a field from a per-pixel closure returning `channels` components.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        check_dims(&[width, height])?;
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn same_grid(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// Lateral (Δx, Δy) part of the field.
    pub fn lateral(&self) -> FlowField<T> {
        let n = self.width * self.height;
        FlowField {
            width: self.width,
            height: self.height,
            channels: 2,
            data: self.data[..2 * n].to_vec(),
        }
    }

    /// Δz channel of a 3-channel field.
    pub fn depth_channel(&self) -> Option<Grid<T>> {
        (self.channels == 3).then(|| Grid {
            width: self.width,
            height: self.height,
            data: self.channel(2).to_vec(),
        })
    }

    /// Per-pixel Euclidean norm over all channels.
    pub fn magnitudes(&self) -> Vec<T> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.data[c * n + i].powi(2))
                    .fold(T::zero(), |a, b| a + b)
                    .sqrt()
            })
            .collect()
    }

    pub fn mean_magnitude(&self) -> T {
        let m = self.magnitudes();
        m.iter().copied().sum::<T>() / T::of(m.len())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.width != other.width
            || self.height != other.height
            || self.channels != other.channels
        {
            return Err(Error::domain("flow fields differ in shape"));
        }
        Self::new(
            self.width,
            self.height,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::of(v)).collect(),
        }
    }
}

/// Pixels at least `margin` away from every image edge.
pub fn interior_mask(width: usize, height: usize, margin: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for y in margin..height.saturating_sub(margin) {
        for x in margin..width.saturating_sub(margin) {
            mask[y * width + x] = true;
        }
    }
    mask
}
