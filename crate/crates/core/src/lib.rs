//! Volumetric EM segmentation toolkit.
//!
//! * [`volume`] and [`io`]: typed z,y,x volumes with physical spacing and the
//!   raw + JSON sidecar file format.
//! * [`lsd`]: ten-channel local shape descriptors from label volumes.
//! * [`metrics`]: instance Dice and IoU-averaged 3D detection AP.
//! * [`ssm`]: selective state-space scans, the Mamba block, and the
//!   volumetric adapter (layer norm + block + residual).
//! * [`fact`]: factorized weight increments shared across weight sites.
//! * [`tensor`]: on-disk parameter bundles for the last two.

pub mod fact;
pub mod io;
pub mod lsd;
pub mod metrics;
pub mod ssm;
pub mod tensor;
pub mod volume;

pub use volume::{LabelVolume, Roi, Volume3D, VolumeError, VoxelSpacing};
