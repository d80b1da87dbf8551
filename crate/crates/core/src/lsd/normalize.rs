use crate::volume::Volume3D;

use super::{build_stencil, LsdError, LsdParams, LsdVolume, LSD_CHANNELS};

/// Maps raw descriptors into `[0, 1]`.
///
/// Offsets go from `[-sigma, sigma]` and off-diagonal covariances from
/// `[-sigma^2, sigma^2]` affinely onto `[0, 1]`; diagonal covariances are
/// divided by `sigma^2`; size is divided by the total stencil weight.
/// Background voxels (size 0) stay all-zero.
pub fn normalize_lsd(lsd: &LsdVolume, params: &LsdParams) -> Result<LsdVolume, LsdError> {
    let vol = lsd.volume();
    let stencil = build_stencil(vol.spacing(), params)?;
    let sigma = params.sigma_nm;
    let sigma2 = sigma * sigma;
    let total = stencil.total_weight();
    let n = vol.voxel_count();

    let scale = |c: usize, v: f64| match c {
        0..=2 => (v + sigma) / (2.0 * sigma),
        3..=5 => v / sigma2,
        6..=8 => (v + sigma2) / (2.0 * sigma2),
        _ => v / total,
    };

    let size = vol.channel(LSD_CHANNELS - 1);
    let mut data = vec![0.0f32; n * LSD_CHANNELS];
    for c in 0..LSD_CHANNELS {
        let src = vol.channel(c);
        let dst = &mut data[c * n..(c + 1) * n];
        for i in 0..n {
            if size[i] > 0.0 {
                dst[i] = scale(c, src[i] as f64).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let out = Volume3D::with_channels(vol.shape(), LSD_CHANNELS, vol.spacing(), data)?;
    LsdVolume::from_volume(out)
}
