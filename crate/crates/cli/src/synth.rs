//! Synthetic label volumes: packed spheres, tilted tubes, or a 3D checker.

use emshape::{LabelVolume, Volume3D, VoxelSpacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Placement attempts per requested instance before giving up.
const ATTEMPTS_PER_INSTANCE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum SynthKind {
    #[default]
    Spheres,
    Tubes,
    Checker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub shape: [usize; 3],
    pub spacing: VoxelSpacing,
    pub count: usize,
    /// Radius range in nm for spheres and tubes; cell edge in voxels for the
    /// checker (only the lower end is used there).
    pub size_min: f64,
    pub size_max: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("placed {placed} of {requested} instances after {attempts} attempts")]
    Packing {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.shape.contains(&0) {
            return Err(SynthError::Spec(format!(
                "shape {:?} has a zero extent",
                self.shape
            )));
        }
        if !(self.size_min.is_finite() && self.size_max.is_finite()) {
            return Err(SynthError::Spec("size range must be finite".into()));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return Err(SynthError::Spec(format!(
                "size range [{}, {}] must be positive and ordered",
                self.size_min, self.size_max
            )));
        }
        Ok(())
    }
}

/// Voxel indices of one candidate shape.
type Footprint = Vec<usize>;

struct Canvas {
    shape: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u64>,
}

impl Canvas {
    fn new(shape: [usize; 3], spacing: VoxelSpacing) -> Self {
        Self {
            shape,
            spacing: spacing.as_array(),
            labels: vec![0; shape.iter().product()],
        }
    }

    fn extent_nm(&self, axis: usize) -> f64 {
        (self.shape[axis] - 1) as f64 * self.spacing[axis]
    }

    /// Voxels whose centres satisfy `inside`, scanning the physical box
    /// `[lo, hi]` only.
    fn rasterize(
        &self,
        lo: [f64; 3],
        hi: [f64; 3],
        inside: impl Fn([f64; 3]) -> bool,
    ) -> Footprint {
        let range = |a: usize| {
            let s = self.spacing[a];
            let first = (lo[a] / s).ceil().max(0.0) as usize;
            let last = ((hi[a] / s).floor() as i64).min(self.shape[a] as i64 - 1);
            first..(last + 1).max(0) as usize
        };
        let mut out = Vec::new();
        for z in range(0) {
            for y in range(1) {
                for x in range(2) {
                    let p = [
                        z as f64 * self.spacing[0],
                        y as f64 * self.spacing[1],
                        x as f64 * self.spacing[2],
                    ];
                    if inside(p) {
                        out.push((z * self.shape[1] + y) * self.shape[2] + x);
                    }
                }
            }
        }
        out
    }

    fn place(&mut self, fp: &Footprint, id: u64) -> bool {
        if fp.is_empty() || fp.iter().any(|&i| self.labels[i] != 0) {
            return false;
        }
        for &i in fp {
            self.labels[i] = id;
        }
        true
    }
}

fn sphere(canvas: &Canvas, rng: &mut impl Rng, r_min: f64, r_max: f64) -> Option<Footprint> {
    let r = if r_max > r_min {
        rng.gen_range(r_min..=r_max)
    } else {
        r_min
    };
    let mut c = [0.0; 3];
    for (a, ca) in c.iter_mut().enumerate() {
        // whole ball inside the grid
        let hi = canvas.extent_nm(a) - r;
        if hi < r {
            return None;
        }
        *ca = if hi > r { rng.gen_range(r..=hi) } else { r };
    }
    let lo = [c[0] - r, c[1] - r, c[2] - r];
    let hi = [c[0] + r, c[1] + r, c[2] + r];
    Some(canvas.rasterize(lo, hi, |p| {
        (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
    }))
}

/// A straight tube crossing the whole volume, mostly along z.
fn tube(canvas: &Canvas, rng: &mut impl Rng, r_min: f64, r_max: f64) -> Option<Footprint> {
    let r = if r_max > r_min {
        rng.gen_range(r_min..=r_max)
    } else {
        r_min
    };
    let mid_z = canvas.extent_nm(0) / 2.0;
    let point = [
        mid_z,
        rng.gen_range(0.0..=canvas.extent_nm(1)),
        rng.gen_range(0.0..=canvas.extent_nm(2)),
    ];
    let (ty, tx) = (rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3));
    let norm = (1.0f64 + ty * ty + tx * tx).sqrt();
    let dir = [1.0 / norm, ty / norm, tx / norm];
    let lo = [0.0, 0.0, 0.0];
    let hi = [
        canvas.extent_nm(0),
        canvas.extent_nm(1),
        canvas.extent_nm(2),
    ];
    let fp = canvas.rasterize(lo, hi, |p| {
        let d = [p[0] - point[0], p[1] - point[1], p[2] - point[2]];
        let along: f64 = (0..3).map(|a| d[a] * dir[a]).sum();
        let dist2: f64 = (0..3).map(|a| d[a] * d[a]).sum::<f64>() - along * along;
        dist2 <= r * r
    });
    Some(fp)
}

fn checker(shape: [usize; 3], spacing: VoxelSpacing, cell: usize) -> LabelVolume {
    let cells: [usize; 3] = std::array::from_fn(|a| shape[a].div_ceil(cell));
    Volume3D::from_fn(shape, spacing, |z, y, x| {
        let (cz, cy, cx) = (z / cell, y / cell, x / cell);
        if (cz + cy + cx) % 2 == 0 {
            ((cz * cells[1] + cy) * cells[2] + cx) as u64 + 1
        } else {
            0
        }
    })
    .expect("shape validated")
}

/// Generates the volume described by `spec`. Instance ids are `1..=count` in
/// placement order; the same spec always yields the same volume.
pub fn generate(spec: &SynthSpec) -> Result<LabelVolume, SynthError> {
    spec.validate()?;
    if spec.kind == SynthKind::Checker {
        let cell = (spec.size_min.round() as usize).max(1);
        return Ok(checker(spec.shape, spec.spacing, cell));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = Canvas::new(spec.shape, spec.spacing);
    let budget = ATTEMPTS_PER_INSTANCE * spec.count;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.count && attempts < budget {
        attempts += 1;
        let candidate = match spec.kind {
            SynthKind::Spheres => sphere(&canvas, &mut rng, spec.size_min, spec.size_max),
            SynthKind::Tubes => tube(&canvas, &mut rng, spec.size_min, spec.size_max),
            SynthKind::Checker => unreachable!(),
        };
        if let Some(fp) = candidate {
            if canvas.place(&fp, placed as u64 + 1) {
                placed += 1;
            }
        }
    }
    if placed < spec.count {
        return Err(SynthError::Packing {
            placed,
            requested: spec.count,
            attempts,
        });
    }
    Ok(Volume3D::new(spec.shape, spec.spacing, canvas.labels).expect("canvas matches shape"))
}

/// Number of distinct non-zero labels.
pub fn instance_count(labels: &LabelVolume) -> usize {
    let mut ids: Vec<u64> = labels.data().iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}
