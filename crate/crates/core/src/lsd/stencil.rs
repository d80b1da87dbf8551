use crate::volume::VoxelSpacing;

use super::{LsdError, LsdParams, Weighting};

pub const DEFAULT_MAX_STENCIL: usize = 10_000_000;

// Points exactly on the sphere must survive rounding of d^2 * spacing^2.
const RADIUS_SLACK: f64 = 1e-12;

/// Lattice offsets inside the physical radius-sigma ball, with weights.
///
/// Offsets are ordered by `dz`, then `dy`, then `dx`, so each `(dz, dy)` pair
/// forms one contiguous x run `-k..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodStencil {
    offsets: Vec<[i32; 3]>,
    weights: Vec<f64>,
    rows: Vec<StencilRow>,
    /// Largest |d| per axis, in voxels.
    reach: [usize; 3],
    spacing: VoxelSpacing,
    sigma_nm: f64,
    weighting: Weighting,
}

/// One x run of the stencil: offsets `(dz, dy, -half_width..=half_width)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilRow {
    pub dz: i32,
    pub dy: i32,
    pub half_width: usize,
    /// Weight factor shared by the row (z and y part of a Gaussian, 1 for a ball).
    pub zy_weight: f64,
}

fn axis_reach(sigma_nm: f64, spacing_nm: f64) -> usize {
    ((sigma_nm / spacing_nm) * (1.0 + RADIUS_SLACK)).floor() as usize
}

fn half_width(sigma2: f64, used: f64, x_nm: f64) -> Option<usize> {
    let left = sigma2 * (1.0 + RADIUS_SLACK) - used;
    if left < 0.0 {
        return None;
    }
    let mut k = (left / (x_nm * x_nm)).sqrt().floor() as usize;
    // sqrt/floor can land one off at exact boundaries.
    while ((k + 1) as f64 * x_nm).powi(2) <= left {
        k += 1;
    }
    while k > 0 && (k as f64 * x_nm).powi(2) > left {
        k -= 1;
    }
    Some(k)
}

fn gaussian_factor(dist_nm: f64, sigma_nm: f64) -> f64 {
    (-(dist_nm * dist_nm) / (2.0 * sigma_nm * sigma_nm)).exp()
}

/// Enumerates every lattice offset whose physical distance from the origin is
/// at most `params.sigma_nm`.
///
/// Only positivity of sigma is checked here; the descriptor engines also
/// require sigma to reach a neighbour on every axis.
pub fn build_stencil(
    spacing: VoxelSpacing,
    params: &LsdParams,
) -> Result<NeighborhoodStencil, LsdError> {
    if !(params.sigma_nm.is_finite() && params.sigma_nm > 0.0) {
        return Err(LsdError::InvalidSigma(params.sigma_nm));
    }
    let sigma = params.sigma_nm;
    let sigma2 = sigma * sigma;
    let [sz, sy, sx] = spacing.as_array();
    let reach = [
        axis_reach(sigma, sz),
        axis_reach(sigma, sy),
        axis_reach(sigma, sx),
    ];

    let mut rows = Vec::new();
    let mut count: u128 = 0;
    for dz in -(reach[0] as i64)..=reach[0] as i64 {
        let pz = dz as f64 * sz;
        for dy in -(reach[1] as i64)..=reach[1] as i64 {
            let py = dy as f64 * sy;
            let Some(k) = half_width(sigma2, pz * pz + py * py, sx) else {
                continue;
            };
            count += 2 * k as u128 + 1;
            let zy_weight = match params.weighting {
                Weighting::Ball => 1.0,
                Weighting::Gaussian => gaussian_factor(pz, sigma) * gaussian_factor(py, sigma),
            };
            rows.push(StencilRow {
                dz: dz as i32,
                dy: dy as i32,
                half_width: k,
                zy_weight,
            });
        }
    }
    if count > params.max_stencil as u128 {
        return Err(LsdError::StencilTooLarge {
            count,
            cap: params.max_stencil,
        });
    }

    let mut offsets = Vec::with_capacity(count as usize);
    let mut weights = Vec::with_capacity(count as usize);
    for row in &rows {
        let k = row.half_width as i32;
        for dx in -k..=k {
            let d = [row.dz, row.dy, dx];
            let p = [d[0] as f64 * sz, d[1] as f64 * sy, d[2] as f64 * sx];
            let dist2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            offsets.push(d);
            weights.push(match params.weighting {
                Weighting::Ball => 1.0,
                Weighting::Gaussian => (-dist2 / (2.0 * sigma2)).exp(),
            });
        }
    }

    Ok(NeighborhoodStencil {
        offsets,
        weights,
        rows,
        reach,
        spacing,
        sigma_nm: sigma,
        weighting: params.weighting,
    })
}

impl NeighborhoodStencil {
    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rows(&self) -> &[StencilRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn reach(&self) -> [usize; 3] {
        self.reach
    }

    pub fn spacing(&self) -> VoxelSpacing {
        self.spacing
    }

    pub fn sigma_nm(&self) -> f64 {
        self.sigma_nm
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The x-direction weight of offset `dx`.
    pub(crate) fn x_weight(&self, dx: i32) -> f64 {
        match self.weighting {
            Weighting::Ball => 1.0,
            Weighting::Gaussian => gaussian_factor(dx as f64 * self.spacing.x_nm, self.sigma_nm),
        }
    }
}
