//! Dense 3D volumes with physical voxel spacing.
//!
//! All volumes use z,y,x axis order with x fastest: the linear index of voxel
//! `(z, y, x)` is `(z * H + y) * W + x`. Multi-channel volumes store `C`
//! planes of `D * H * W` values back to back.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("voxel spacing must be finite and strictly positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("volume shape must be strictly positive on every axis, got {0:?}")]
    EmptyShape([usize; 3]),
    #[error("volume must have at least one channel")]
    NoChannels,
    #[error("data length {actual} does not match shape {shape:?} x {channels} channels (expected {expected})")]
    LengthMismatch {
        shape: [usize; 3],
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error(
        "roi offset {offset:?} shape {shape:?} does not fit inside volume of shape {parent:?}"
    )]
    RoiOutOfBounds {
        offset: [usize; 3],
        shape: [usize; 3],
        parent: [usize; 3],
    },
    #[error("missing sidecar {0}")]
    MissingSidecar(String),
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    DtypeMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("unsupported {field} {value:?}")]
    UnsupportedLayout { field: &'static str, value: String },
    #[error("payload is {actual} bytes, sidecar implies {expected}")]
    PayloadSize { expected: u64, actual: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Physical edge length of a voxel along z, y and x, in nanometers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSpacing {
    pub z_nm: f64,
    pub y_nm: f64,
    pub x_nm: f64,
}

impl VoxelSpacing {
    pub fn new(z_nm: f64, y_nm: f64, x_nm: f64) -> Result<Self> {
        let all = [z_nm, y_nm, x_nm];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(Self { z_nm, y_nm, x_nm })
        } else {
            Err(VolumeError::InvalidSpacing(all))
        }
    }

    pub fn isotropic(nm: f64) -> Result<Self> {
        Self::new(nm, nm, nm)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z_nm, self.y_nm, self.x_nm]
    }

    pub fn max_component(&self) -> f64 {
        self.z_nm.max(self.y_nm).max(self.x_nm)
    }
}

impl Default for VoxelSpacing {
    fn default() -> Self {
        Self {
            z_nm: 1.0,
            y_nm: 1.0,
            x_nm: 1.0,
        }
    }
}

/// Element types that can live in a volume and round-trip through the raw
/// little-endian payload format.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Sidecar dtype tag.
    const DTYPE: &'static str;
    const SIZE: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl Voxel for u64 {
    const DTYPE: &'static str = "u64";
    const SIZE: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        u64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

/// A dense, immutable-shape 3D grid of `T`, optionally with several channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    shape: [usize; 3],
    channels: usize,
    spacing: VoxelSpacing,
    data: Vec<T>,
}

/// Instance-ID volume. ID 0 is background; other IDs need not be contiguous.
pub type LabelVolume = Volume3D<u64>;

impl<T: Voxel> Volume3D<T> {
    pub fn new(shape: [usize; 3], spacing: VoxelSpacing, data: Vec<T>) -> Result<Self> {
        Self::with_channels(shape, 1, spacing, data)
    }

    pub fn with_channels(
        shape: [usize; 3],
        channels: usize,
        spacing: VoxelSpacing,
        data: Vec<T>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyShape(shape));
        }
        if channels == 0 {
            return Err(VolumeError::NoChannels);
        }
        let expected = shape.iter().product::<usize>() * channels;
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                shape,
                channels,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            channels,
            spacing,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: VoxelSpacing, value: T) -> Result<Self> {
        Self::filled_channels(shape, 1, spacing, value)
    }

    pub fn filled_channels(
        shape: [usize; 3],
        channels: usize,
        spacing: VoxelSpacing,
        value: T,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyShape(shape));
        }
        let len = shape.iter().product::<usize>() * channels;
        Self::with_channels(shape, channels, spacing, vec![value; len])
    }

    /// Builds a single-channel volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        shape: [usize; 3],
        spacing: VoxelSpacing,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyShape(shape));
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, spacing, data)
    }

    /// Returns `[D, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }

    /// Voxels per channel.
    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn get_channel(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[c * self.voxel_count() + self.index(z, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies out the sub-block described by `roi`; spacing is preserved and
    /// every channel is cropped.
    pub fn crop(&self, roi: &Roi) -> Result<Self> {
        roi.check_within(self.shape)?;
        let [od, oh, ow] = roi.offset;
        let [d, h, w] = roi.shape;
        let mut data = Vec::with_capacity(d * h * w * self.channels);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for z in od..od + d {
                for y in oh..oh + h {
                    let start = self.index(z, y, ow);
                    data.extend_from_slice(&plane[start..start + w]);
                }
            }
        }
        Self::with_channels(roi.shape, self.channels, self.spacing, data)
    }
}

/// Axis-aligned region of interest in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub offset: [usize; 3],
    pub shape: [usize; 3],
}

impl Roi {
    pub fn new(offset: [usize; 3], shape: [usize; 3]) -> Self {
        Self { offset, shape }
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            offset: [0; 3],
            shape,
        }
    }

    pub fn check_within(&self, parent: [usize; 3]) -> Result<()> {
        let fits = (0..3).all(|a| {
            self.shape[a] > 0
                && self.offset[a]
                    .checked_add(self.shape[a])
                    .is_some_and(|end| end <= parent[a])
        });
        if fits {
            Ok(())
        } else {
            Err(VolumeError::RoiOutOfBounds {
                offset: self.offset,
                shape: self.shape,
                parent,
            })
        }
    }
}
