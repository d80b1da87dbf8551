//! Factorized weight increments shared across weight sites.
//!
//! Every site `l` (a square `d × d` projection) receives
//! `ΔW_l = s · U · K_l · Vᵀ` where `U, V ∈ R^{d×r}` are shared by all sites
//! and `K_l` is a small per-site core:
//!
//! * tensor-train mode: `K_l = Σ_l`, a free `r × r` matrix per site;
//! * Tucker mode: `K_l = C ×₃ p_l`, a shared `r × r × r'` core contracted
//!   with a per-site selector `p_l ∈ R^{r'}`.
//!
//! The frozen weights are never modified; [`apply_increment`] returns a new
//! matrix.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FactError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("unknown weight site {0}")]
    UnknownSite(SiteId),
    #[error("{what}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        what: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("least-squares fit failed: {0}")]
    Fit(&'static str),
}

/// A weight site: layer index plus projection name (e.g. `"qkv"`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: usize,
    pub projection: String,
}

impl SiteId {
    pub fn new(layer: usize, projection: impl Into<String>) -> Self {
        Self {
            layer,
            projection: projection.into(),
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.projection)
    }
}

/// A frozen square weight matrix at a site.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSite {
    pub id: SiteId,
    pub weight: DMatrix<f64>,
}

impl WeightSite {
    pub fn new(id: SiteId, weight: DMatrix<f64>) -> Result<Self, FactError> {
        if !weight.is_square() {
            return Err(FactError::Shape {
                what: "base weight",
                expected_rows: weight.nrows(),
                expected_cols: weight.nrows(),
                rows: weight.nrows(),
                cols: weight.ncols(),
            });
        }
        Ok(Self { id, weight })
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactCores {
    TensorTrain {
        cores: BTreeMap<SiteId, DMatrix<f64>>,
    },
    Tucker {
        /// `r'` slices of `r × r`.
        core: Vec<DMatrix<f64>>,
        selectors: BTreeMap<SiteId, DVector<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactMode {
    TensorTrain,
    Tucker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactIncrement {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub cores: FactCores,
    pub scale: f64,
}

fn check_shape(
    what: &'static str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), FactError> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(FactError::Shape {
            what,
            expected_rows: rows,
            expected_cols: cols,
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

impl FactIncrement {
    pub fn tensor_train(
        u: DMatrix<f64>,
        v: DMatrix<f64>,
        cores: BTreeMap<SiteId, DMatrix<f64>>,
        scale: f64,
    ) -> Result<Self, FactError> {
        let inc = Self {
            u,
            v,
            cores: FactCores::TensorTrain { cores },
            scale,
        };
        inc.validate()?;
        Ok(inc)
    }

    pub fn tucker(
        u: DMatrix<f64>,
        v: DMatrix<f64>,
        core: Vec<DMatrix<f64>>,
        selectors: BTreeMap<SiteId, DVector<f64>>,
        scale: f64,
    ) -> Result<Self, FactError> {
        let inc = Self {
            u,
            v,
            cores: FactCores::Tucker { core, selectors },
            scale,
        };
        inc.validate()?;
        Ok(inc)
    }

    /// Gaussian-ish random factors and cores (uniform in `[-1, 1]`).
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        mode: FactMode,
        dim: usize,
        rank: usize,
        tucker_rank: usize,
        sites: &[SiteId],
        scale: f64,
    ) -> Result<Self, FactError> {
        if rank == 0 || (mode == FactMode::Tucker && tucker_rank == 0) {
            return Err(FactError::ZeroRank);
        }
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..=1.0));
        let u = mat(dim, rank);
        let v = mat(dim, rank);
        match mode {
            FactMode::TensorTrain => {
                let cores = sites.iter().map(|s| (s.clone(), mat(rank, rank))).collect();
                Self::tensor_train(u, v, cores, scale)
            }
            FactMode::Tucker => {
                let core = (0..tucker_rank).map(|_| mat(rank, rank)).collect();
                let selectors = sites
                    .iter()
                    .map(|s| {
                        (
                            s.clone(),
                            DVector::from_column_slice(mat(tucker_rank, 1).as_slice()),
                        )
                    })
                    .collect();
                Self::tucker(u, v, core, selectors, scale)
            }
        }
    }

    pub fn mode(&self) -> FactMode {
        match self.cores {
            FactCores::TensorTrain { .. } => FactMode::TensorTrain,
            FactCores::Tucker { .. } => FactMode::Tucker,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        match &self.cores {
            FactCores::TensorTrain { cores } => cores.keys().cloned().collect(),
            FactCores::Tucker { selectors, .. } => selectors.keys().cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<(), FactError> {
        let (d, r) = (self.u.nrows(), self.u.ncols());
        if r == 0 {
            return Err(FactError::ZeroRank);
        }
        check_shape("V", &self.v, d, r)?;
        match &self.cores {
            FactCores::TensorTrain { cores } => {
                for c in cores.values() {
                    check_shape("site core", c, r, r)?;
                }
            }
            FactCores::Tucker { core, selectors } => {
                if core.is_empty() {
                    return Err(FactError::ZeroRank);
                }
                for slice in core {
                    check_shape("core slice", slice, r, r)?;
                }
                for s in selectors.values() {
                    if s.len() != core.len() {
                        return Err(FactError::Shape {
                            what: "selector",
                            expected_rows: core.len(),
                            expected_cols: 1,
                            rows: s.len(),
                            cols: 1,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// The `r × r` core a site sees.
    pub fn site_core(&self, site: &SiteId) -> Result<DMatrix<f64>, FactError> {
        match &self.cores {
            FactCores::TensorTrain { cores } => cores
                .get(site)
                .cloned()
                .ok_or_else(|| FactError::UnknownSite(site.clone())),
            FactCores::Tucker { core, selectors } => {
                let sel = selectors
                    .get(site)
                    .ok_or_else(|| FactError::UnknownSite(site.clone()))?;
                let r = self.rank();
                Ok(core
                    .iter()
                    .zip(sel.iter())
                    .fold(DMatrix::zeros(r, r), |acc, (slice, &p)| acc + slice * p))
            }
        }
    }

    /// Scalars actually stored: factors, cores/selectors, and the scale.
    pub fn stored_scalar_count(&self) -> usize {
        let factors = self.u.len() + self.v.len();
        let cores: usize = match &self.cores {
            FactCores::TensorTrain { cores } => cores.values().map(|c| c.len()).sum(),
            FactCores::Tucker { core, selectors } => {
                core.iter().map(|c| c.len()).sum::<usize>()
                    + selectors.values().map(|s| s.len()).sum::<usize>()
            }
        };
        factors + cores + 1
    }
}

/// `ΔW = s · U · K_site · Vᵀ`.
pub fn reconstruct_delta(
    inc: &FactIncrement,
    site: &WeightSite,
) -> Result<DMatrix<f64>, FactError> {
    inc.validate()?;
    let d = inc.dim();
    check_shape("base weight", &site.weight, d, d)?;
    let core = inc.site_core(&site.id)?;
    Ok((&inc.u * core * inc.v.transpose()) * inc.scale)
}

/// `W₀ + ΔW`; `site.weight` is left untouched.
pub fn apply_increment(inc: &FactIncrement, site: &WeightSite) -> Result<DMatrix<f64>, FactError> {
    Ok(&site.weight + reconstruct_delta(inc, site)?)
}

/// Trainable-parameter accounting against full fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub trainable: u128,
    pub full: u128,
    pub ratio: f64,
}

/// Tensor-train: `2dr + L·r² + 1`; Tucker: `2dr + r²r' + L·r' + 1`; full
/// fine-tuning updates `L·d²`. `tucker_rank` is ignored in tensor-train mode.
pub fn trainable_param_count(
    mode: FactMode,
    num_sites: usize,
    dim: usize,
    rank: usize,
    tucker_rank: usize,
) -> Result<ParamCount, FactError> {
    if rank == 0 || (mode == FactMode::Tucker && tucker_rank == 0) {
        return Err(FactError::ZeroRank);
    }
    let (l, d, r, rt) = (
        num_sites as u128,
        dim as u128,
        rank as u128,
        tucker_rank as u128,
    );
    let trainable = match mode {
        FactMode::TensorTrain => 2 * d * r + l * r * r + 1,
        FactMode::Tucker => 2 * d * r + r * r * rt + l * rt + 1,
    };
    let full = l * d * d;
    Ok(ParamCount {
        trainable,
        full,
        ratio: trainable as f64 / full as f64,
    })
}

/// Least-squares core `K` minimising `‖s·U K Vᵀ − target‖_F`, i.e.
/// `K = U⁺ target (Vᵀ)⁺ / s`. Exact when `U` and `V` have full row rank.
pub fn fit_tt_core(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    scale: f64,
    target: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FactError> {
    if scale == 0.0 {
        return Err(FactError::Fit("scale is zero"));
    }
    let d = u.nrows();
    check_shape("target", target, d, d)?;
    check_shape("V", v, d, u.ncols())?;
    let u_pinv = u.clone().pseudo_inverse(1e-12).map_err(FactError::Fit)?;
    let vt_pinv = v
        .transpose()
        .pseudo_inverse(1e-12)
        .map_err(FactError::Fit)?;
    Ok(u_pinv * target * vt_pinv / scale)
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
