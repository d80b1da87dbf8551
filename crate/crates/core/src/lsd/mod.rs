//! Local shape descriptors.
//!
//! For every foreground voxel `v` the descriptor summarises the voxels of the
//! same segment that fall inside a ball of physical radius `sigma_nm` around
//! `v`: the (weighted) mean position relative to `v`, the coordinate
//! covariance, and the (weighted) voxel count. Background voxels get an
//! all-zero descriptor.
//!
//! Two engines produce the same descriptors: [`compute_lsd_oracle`] visits
//! every stencil offset for every voxel, [`compute_lsd_fast`] accumulates
//! per-segment moment sums along x rows.

mod fast;
mod normalize;
mod oracle;
mod stencil;

use std::path::Path;

use thiserror::Error;

use crate::io::{read_volume_with_sidecar, write_volume_named};
use crate::volume::{LabelVolume, Volume3D, VolumeError, VoxelSpacing};

pub use fast::{compute_lsd_fast, compute_lsd_fast_with_stats, FastStats};
pub use normalize::normalize_lsd;
pub use oracle::compute_lsd_oracle;
pub use stencil::{build_stencil, NeighborhoodStencil, StencilRow, DEFAULT_MAX_STENCIL};

#[derive(Debug, Error)]
pub enum LsdError {
    #[error("sigma must be finite and positive, got {0}")]
    InvalidSigma(f64),
    #[error("sigma {sigma_nm} nm is below the largest voxel edge {max_spacing_nm} nm")]
    SigmaBelowSpacing { sigma_nm: f64, max_spacing_nm: f64 },
    #[error("stencil would hold {count} offsets, cap is {cap}")]
    StencilTooLarge { count: u128, cap: usize },
    #[error("expected a {expected}-channel volume, got {actual}")]
    ChannelCount { expected: usize, actual: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Every voxel inside the ball counts once.
    #[default]
    Ball,
    /// Voxels are weighted by `exp(-|d|^2 / (2 sigma^2))`, still truncated to the ball.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    Oracle,
    #[default]
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsdParams {
    pub sigma_nm: f64,
    pub weighting: Weighting,
    pub normalize: bool,
    pub engine: Engine,
    /// Upper bound on stencil size before [`build_stencil`] refuses.
    pub max_stencil: usize,
}

impl LsdParams {
    pub fn new(sigma_nm: f64) -> Self {
        Self {
            sigma_nm,
            weighting: Weighting::Ball,
            normalize: false,
            engine: Engine::Fast,
            max_stencil: DEFAULT_MAX_STENCIL,
        }
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// Sigma must reach at least one voxel along every axis.
    pub fn validate(&self, spacing: VoxelSpacing) -> Result<(), LsdError> {
        if !(self.sigma_nm.is_finite() && self.sigma_nm > 0.0) {
            return Err(LsdError::InvalidSigma(self.sigma_nm));
        }
        let max_spacing_nm = spacing.max_component();
        if self.sigma_nm < max_spacing_nm {
            return Err(LsdError::SigmaBelowSpacing {
                sigma_nm: self.sigma_nm,
                max_spacing_nm,
            });
        }
        Ok(())
    }
}

pub const LSD_CHANNELS: usize = 10;

pub const CHANNEL_NAMES: [&str; LSD_CHANNELS] = [
    "off_z", "off_y", "off_x", "cov_zz", "cov_yy", "cov_xx", "cov_zy", "cov_zx", "cov_yx", "size",
];

/// Named slices of the descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelGroup {
    /// Mean position minus voxel position, nm (z, y, x).
    Offset,
    /// Covariance diagonal, nm^2 (zz, yy, xx).
    CovDiag,
    /// Covariance off-diagonals, nm^2 (zy, zx, yx).
    CovOffDiag,
    /// Weighted voxel count.
    Size,
}

impl ChannelGroup {
    pub const ALL: [ChannelGroup; 4] = [
        ChannelGroup::Offset,
        ChannelGroup::CovDiag,
        ChannelGroup::CovOffDiag,
        ChannelGroup::Size,
    ];

    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ChannelGroup::Offset => 0..3,
            ChannelGroup::CovDiag => 3..6,
            ChannelGroup::CovOffDiag => 6..9,
            ChannelGroup::Size => 9..10,
        }
    }
}

/// Ten-channel descriptor volume on the same grid as its label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LsdVolume(Volume3D<f32>);

impl LsdVolume {
    pub fn from_volume(vol: Volume3D<f32>) -> Result<Self, LsdError> {
        if vol.channels() != LSD_CHANNELS {
            return Err(LsdError::ChannelCount {
                expected: LSD_CHANNELS,
                actual: vol.channels(),
            });
        }
        Ok(Self(vol))
    }

    #[cfg(test)]
    pub(crate) fn zeros(shape: [usize; 3], spacing: VoxelSpacing) -> Self {
        Self(
            Volume3D::filled_channels(shape, LSD_CHANNELS, spacing, 0.0)
                .expect("shape comes from a valid volume"),
        )
    }

    pub(crate) fn from_raw(shape: [usize; 3], spacing: VoxelSpacing, data: Vec<f32>) -> Self {
        Self(
            Volume3D::with_channels(shape, LSD_CHANNELS, spacing, data)
                .expect("engine output matches its grid"),
        )
    }

    pub fn volume(&self) -> &Volume3D<f32> {
        &self.0
    }

    pub fn into_volume(self) -> Volume3D<f32> {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    /// The ten values at one voxel, in channel order.
    pub fn descriptor(&self, z: usize, y: usize, x: usize) -> [f32; LSD_CHANNELS] {
        std::array::from_fn(|c| self.0.get_channel(c, z, y, x))
    }

    /// Copies out one channel group as a multi-channel volume.
    pub fn channel_group(&self, which: ChannelGroup) -> Volume3D<f32> {
        let range = which.range();
        let n = self.0.voxel_count();
        let mut data = Vec::with_capacity(n * range.len());
        for c in range.clone() {
            data.extend_from_slice(self.0.channel(c));
        }
        Volume3D::with_channels(self.0.shape(), range.len(), self.0.spacing(), data)
            .expect("slice of a valid volume")
    }

    /// Largest absolute per-voxel difference over all channels.
    pub fn max_abs_diff(&self, other: &LsdVolume) -> f32 {
        assert_eq!(self.shape(), other.shape(), "descriptor grids differ");
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Per-channel maximum absolute difference.
    pub fn channel_max_abs_diff(&self, other: &LsdVolume) -> [f32; LSD_CHANNELS] {
        assert_eq!(self.shape(), other.shape(), "descriptor grids differ");
        std::array::from_fn(|c| {
            self.0
                .channel(c)
                .iter()
                .zip(other.0.channel(c))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max)
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), LsdError> {
        write_volume_named(&self.0, path, Some(&CHANNEL_NAMES))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, LsdError> {
        let (vol, _) = read_volume_with_sidecar::<f32>(path)?;
        Self::from_volume(vol)
    }
}

/// Alias kept for call sites that read better with a verb.
pub fn lsd_channel(lsd: &LsdVolume, which: ChannelGroup) -> Volume3D<f32> {
    lsd.channel_group(which)
}

/// Runs the engine selected in `params`, normalizing afterwards if requested.
pub fn compute_lsd(labels: &LabelVolume, params: &LsdParams) -> Result<LsdVolume, LsdError> {
    let raw = match params.engine {
        Engine::Oracle => compute_lsd_oracle(labels, params)?,
        Engine::Fast => compute_lsd_fast(labels, params)?,
    };
    if params.normalize {
        normalize_lsd(&raw, params)
    } else {
        Ok(raw)
    }
}
