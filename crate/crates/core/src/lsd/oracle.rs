use rayon::prelude::*;

use crate::volume::LabelVolume;

use super::{build_stencil, LsdError, LsdParams, LsdVolume, LSD_CHANNELS};

/// Brute-force descriptors: every stencil offset is visited for every
/// foreground voxel, with a two-pass mean/covariance in `f64`.
pub fn compute_lsd_oracle(labels: &LabelVolume, params: &LsdParams) -> Result<LsdVolume, LsdError> {
    let spacing = labels.spacing();
    params.validate(spacing)?;
    let stencil = build_stencil(spacing, params)?;
    let [d, h, w] = labels.shape();
    let [sz, sy, sx] = spacing.as_array();
    let n = labels.voxel_count();

    let planes: Vec<Vec<[f32; LSD_CHANNELS]>> = (0..d)
        .into_par_iter()
        .map(|z| {
            let mut plane = vec![[0.0f32; LSD_CHANNELS]; h * w];
            let mut members: Vec<([f64; 3], f64)> = Vec::with_capacity(stencil.len());
            for y in 0..h {
                for x in 0..w {
                    let id = labels.get(z, y, x);
                    if id == 0 {
                        continue;
                    }
                    members.clear();
                    for (off, &wt) in stencil.offsets().iter().zip(stencil.weights()) {
                        let nz = z as i64 + off[0] as i64;
                        let ny = y as i64 + off[1] as i64;
                        let nx = x as i64 + off[2] as i64;
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d as i64
                            || ny >= h as i64
                            || nx >= w as i64
                        {
                            continue;
                        }
                        if labels.get(nz as usize, ny as usize, nx as usize) == id {
                            let p = [off[0] as f64 * sz, off[1] as f64 * sy, off[2] as f64 * sx];
                            members.push((p, wt));
                        }
                    }
                    plane[y * w + x] = descriptor_from_members(&members);
                }
            }
            plane
        })
        .collect();

    let mut data = vec![0.0f32; n * LSD_CHANNELS];
    for (z, plane) in planes.into_iter().enumerate() {
        for (i, desc) in plane.into_iter().enumerate() {
            let idx = z * h * w + i;
            for (c, v) in desc.into_iter().enumerate() {
                data[c * n + idx] = v;
            }
        }
    }
    Ok(LsdVolume::from_raw(labels.shape(), spacing, data))
}

/// `members` holds positions relative to the centre voxel.
fn descriptor_from_members(members: &[([f64; 3], f64)]) -> [f32; LSD_CHANNELS] {
    let size: f64 = members.iter().map(|(_, w)| w).sum();
    let mut mean = [0.0f64; 3];
    for (p, w) in members {
        for a in 0..3 {
            mean[a] += w * p[a];
        }
    }
    for m in &mut mean {
        *m /= size;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for (p, w) in members {
        let c = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in a..3 {
                cov[a][b] += w * c[a] * c[b];
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= size;
        }
    }
    [
        mean[0] as f32,
        mean[1] as f32,
        mean[2] as f32,
        cov[0][0] as f32,
        cov[1][1] as f32,
        cov[2][2] as f32,
        cov[0][1] as f32,
        cov[0][2] as f32,
        cov[1][2] as f32,
        size as f32,
    ]
}
