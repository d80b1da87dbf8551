//! Named parameter tensors on disk.
//!
//! A bundle is a directory holding `manifest.json` plus one raw+sidecar pair
//! per tensor (see [`crate::io`]). Tensors are stored as `f32`; their true
//! shapes live in the manifest, and the sidecar shape is the tensor shape
//! left-padded with ones to three axes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fact::{FactCores, FactError, FactIncrement, SiteId};
use crate::io::{read_volume, write_volume};
use crate::ssm::{Discretization, MambaBlockParams};
use crate::volume::{Volume3D, VolumeError, VoxelSpacing};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle has no tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: shape {shape:?} does not hold {len} values")]
    Shape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("bundle kind {found:?}, expected {expected:?}")]
    Kind { expected: String, found: String },
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fact(#[from] FactError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub kind: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn volume_shape(shape: &[usize]) -> [usize; 3] {
    let mut s = [1usize; 3];
    let n = shape.len();
    if n <= 3 {
        s[3 - n..].copy_from_slice(shape);
    } else {
        s[0] = shape[..n - 2].iter().product();
        s[1] = shape[n - 2];
        s[2] = shape[n - 1];
    }
    s
}

impl TensorBundle {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), BundleError> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(BundleError::Shape {
                name,
                shape,
                len: data.len(),
            });
        }
        self.tensors.insert(name, Tensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, BundleError> {
        self.tensors
            .get(name)
            .ok_or_else(|| BundleError::Missing(name.to_string()))
    }

    fn meta_usize(&self, key: &str) -> Result<usize, BundleError> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| BundleError::Meta(format!("missing integer {key:?}")))
    }

    fn meta_str(&self, key: &str) -> Result<&str, BundleError> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| BundleError::Meta(format!("missing string {key:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<(), BundleError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BundleError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            })
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.raw");
            let data: Vec<f32> = t.data.iter().map(|&v| v as f32).collect();
            let vol = Volume3D::new(volume_shape(&t.shape), VoxelSpacing::default(), data)?;
            write_volume(&vol, &dir.join(&file))?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, BundleError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut bundle = TensorBundle {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors: BTreeMap::new(),
        };
        for e in manifest.tensors {
            let vol: Volume3D<f32> = read_volume(&dir.join(&e.file))?;
            if vol.shape() != volume_shape(&e.shape) {
                return Err(BundleError::Shape {
                    name: e.name,
                    shape: e.shape,
                    len: vol.data().len(),
                });
            }
            let data = vol.data().iter().map(|&v| v as f64).collect();
            bundle.insert(e.name, e.shape, data)?;
        }
        Ok(bundle)
    }
}

pub const MAMBA_BLOCK_KIND: &str = "mamba_block";
pub const FACT_INCREMENT_KIND: &str = "fact_increment";

impl MambaBlockParams {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new(MAMBA_BLOCK_KIND);
        for (key, v) in [
            ("model_dim", self.model_dim),
            ("inner_dim", self.inner_dim),
            ("state_dim", self.state_dim),
            ("dt_rank", self.dt_rank),
            ("conv_width", self.conv_width),
        ] {
            b.meta.insert(key.into(), v.into());
        }
        let disc = match self.discretization {
            Discretization::Zoh => "zoh",
            Discretization::Euler => "euler",
        };
        b.meta.insert("discretization".into(), disc.into());
        for (name, shape, data) in self.tensors() {
            b.insert(name, shape, data.to_vec())
                .expect("block tensors are consistent");
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self, BundleError> {
        b.expect_kind(MAMBA_BLOCK_KIND)?;
        let take = |n: &str| b.get(n).map(|t| t.data.clone());
        let discretization = match b.meta_str("discretization")? {
            "zoh" => Discretization::Zoh,
            "euler" => Discretization::Euler,
            other => return Err(BundleError::Meta(format!("discretization {other:?}"))),
        };
        let p = MambaBlockParams {
            model_dim: b.meta_usize("model_dim")?,
            inner_dim: b.meta_usize("inner_dim")?,
            state_dim: b.meta_usize("state_dim")?,
            dt_rank: b.meta_usize("dt_rank")?,
            conv_width: b.meta_usize("conv_width")?,
            in_proj_w: take("in_proj_w")?,
            in_proj_b: take("in_proj_b")?,
            conv_w: take("conv_w")?,
            conv_b: take("conv_b")?,
            x_proj_w: take("x_proj_w")?,
            dt_proj_w: take("dt_proj_w")?,
            dt_proj_b: take("dt_proj_b")?,
            a_log: take("a_log")?,
            d: take("d")?,
            out_proj_w: take("out_proj_w")?,
            out_proj_b: take("out_proj_b")?,
            discretization,
        };
        p.validate().map_err(|e| BundleError::Meta(e.to_string()))?;
        Ok(p)
    }
}

fn matrix_tensor(m: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    // row-major on disk
    (
        vec![m.nrows(), m.ncols()],
        m.transpose().as_slice().to_vec(),
    )
}

fn tensor_matrix(t: &Tensor) -> Result<DMatrix<f64>, BundleError> {
    match t.shape[..] {
        [r, c] => Ok(DMatrix::from_row_slice(r, c, &t.data)),
        _ => Err(BundleError::Meta(format!(
            "expected a matrix, got shape {:?}",
            t.shape
        ))),
    }
}

fn site_key(prefix: &str, id: &SiteId) -> String {
    format!("{prefix}.{}.{}", id.layer, id.projection)
}

fn parse_site(prefix: &str, name: &str) -> Option<SiteId> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
    let (layer, projection) = rest.split_once('.')?;
    Some(SiteId::new(layer.parse().ok()?, projection))
}

impl FactIncrement {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new(FACT_INCREMENT_KIND);
        let put = |b: &mut TensorBundle, name: String, (shape, data): (Vec<usize>, Vec<f64>)| {
            b.insert(name, shape, data)
                .expect("increment tensors are consistent");
        };
        put(&mut b, "u".into(), matrix_tensor(&self.u));
        put(&mut b, "v".into(), matrix_tensor(&self.v));
        put(&mut b, "scale".into(), (vec![1], vec![self.scale]));
        match &self.cores {
            FactCores::TensorTrain { cores } => {
                b.meta.insert("mode".into(), "tt".into());
                for (id, c) in cores {
                    put(&mut b, site_key("core", id), matrix_tensor(c));
                }
            }
            FactCores::Tucker { core, selectors } => {
                b.meta.insert("mode".into(), "tucker".into());
                let r = self.rank();
                let data = core.iter().flat_map(|m| matrix_tensor(m).1).collect();
                put(&mut b, "tucker_core".into(), (vec![core.len(), r, r], data));
                for (id, s) in selectors {
                    put(
                        &mut b,
                        site_key("selector", id),
                        (vec![s.len()], s.as_slice().to_vec()),
                    );
                }
            }
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self, BundleError> {
        b.expect_kind(FACT_INCREMENT_KIND)?;
        let u = tensor_matrix(b.get("u")?)?;
        let v = tensor_matrix(b.get("v")?)?;
        let scale = b.get("scale")?.data[0];
        match b.meta_str("mode")? {
            "tt" => {
                let cores = b
                    .tensors
                    .iter()
                    .filter_map(|(n, t)| parse_site("core", n).map(|id| (id, t)))
                    .map(|(id, t)| tensor_matrix(t).map(|m| (id, m)))
                    .collect::<Result<_, _>>()?;
                Ok(FactIncrement::tensor_train(u, v, cores, scale)?)
            }
            "tucker" => {
                let t = b.get("tucker_core")?;
                let [slices, r, c] = t.shape[..] else {
                    return Err(BundleError::Meta("tucker_core must be 3-D".into()));
                };
                let core = t
                    .data
                    .chunks_exact(r * c)
                    .take(slices)
                    .map(|s| DMatrix::from_row_slice(r, c, s))
                    .collect();
                let selectors = b
                    .tensors
                    .iter()
                    .filter_map(|(n, t)| parse_site("selector", n).map(|id| (id, t)))
                    .map(|(id, t)| (id, DVector::from_column_slice(&t.data)))
                    .collect();
                Ok(FactIncrement::tucker(u, v, core, selectors, scale)?)
            }
            other => Err(BundleError::Meta(format!("mode {other:?}"))),
        }
    }
}
