//! Raw little-endian payload plus JSON sidecar.
//!
//! A volume stored at `foo.raw` has its metadata in `foo.json`:
//!
//! ```json
//! {"shape":[D,H,W],"dtype":"u64","spacing_nm":[40.0,4.0,4.0],"order":"zyx","endianness":"little"}
//! ```
//!
//! Multi-channel volumes add `"channels": C` (channel-major payload) and may
//! name their channels with `"channel_names"`. The payload has no header and
//! no padding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::volume::{Result, Volume3D, VolumeError, Voxel, VoxelSpacing};

pub const SUPPORTED_DTYPES: [&str; 3] = ["u8", "u64", "f32"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub spacing_nm: [f64; 3],
    pub order: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
}

impl Sidecar {
    pub fn channel_count(&self) -> usize {
        self.channels.unwrap_or(1)
    }

    fn element_size(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "u8" => Ok(1),
            "u64" => Ok(8),
            "f32" => Ok(4),
            other => Err(VolumeError::UnsupportedDtype(other.to_string())),
        }
    }

    fn expected_payload_len(&self) -> Result<u64> {
        let voxels: u64 = self.shape.iter().map(|&s| s as u64).product();
        Ok(voxels * self.channel_count() as u64 * self.element_size()? as u64)
    }
}

/// Path of the JSON sidecar that belongs to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Payload path for `path`; a `.json` path is mapped to its `.raw` sibling.
pub fn payload_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        path.with_extension("raw")
    } else {
        path.to_path_buf()
    }
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(&payload_path(path));
    let text = match fs::read_to_string(&side) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(VolumeError::MissingSidecar(side.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    serde_json::from_str(&text).map_err(|source| VolumeError::Sidecar {
        path: side.display().to_string(),
        source,
    })
}

/// Reads a volume whose sidecar dtype must equal `T::DTYPE`.
pub fn read_volume<T: Voxel>(path: &Path) -> Result<Volume3D<T>> {
    read_volume_with_sidecar(path).map(|(v, _)| v)
}

/// Like [`read_volume`], also returning the parsed sidecar.
pub fn read_volume_with_sidecar<T: Voxel>(path: &Path) -> Result<(Volume3D<T>, Sidecar)> {
    let sidecar = read_sidecar(path)?;
    if !SUPPORTED_DTYPES.contains(&sidecar.dtype.as_str()) {
        return Err(VolumeError::UnsupportedDtype(sidecar.dtype));
    }
    if sidecar.dtype != T::DTYPE {
        return Err(VolumeError::DtypeMismatch {
            expected: T::DTYPE,
            found: sidecar.dtype,
        });
    }
    if sidecar.order != "zyx" {
        return Err(VolumeError::UnsupportedLayout {
            field: "order",
            value: sidecar.order,
        });
    }
    if sidecar.endianness != "little" {
        return Err(VolumeError::UnsupportedLayout {
            field: "endianness",
            value: sidecar.endianness,
        });
    }
    let [sz, sy, sx] = sidecar.spacing_nm;
    let spacing = VoxelSpacing::new(sz, sy, sx)?;

    let bytes = fs::read(payload_path(path))?;
    let expected = sidecar.expected_payload_len()?;
    if bytes.len() as u64 != expected {
        return Err(VolumeError::PayloadSize {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<T> = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
    let vol = Volume3D::with_channels(sidecar.shape, sidecar.channel_count(), spacing, data)?;
    Ok((vol, sidecar))
}

pub fn write_volume<T: Voxel>(vol: &Volume3D<T>, path: &Path) -> Result<()> {
    write_volume_named(vol, path, None)
}

/// Writes payload and sidecar, recording optional channel names.
pub fn write_volume_named<T: Voxel>(
    vol: &Volume3D<T>,
    path: &Path,
    channel_names: Option<&[&str]>,
) -> Result<()> {
    let payload = payload_path(path);
    let sidecar = Sidecar {
        shape: vol.shape(),
        dtype: T::DTYPE.to_string(),
        spacing_nm: vol.spacing().as_array(),
        order: "zyx".to_string(),
        endianness: "little".to_string(),
        channels: (vol.channels() > 1).then_some(vol.channels()),
        channel_names: channel_names.map(|n| n.iter().map(|s| s.to_string()).collect()),
    };
    let mut bytes = Vec::with_capacity(vol.data().len() * T::SIZE);
    for &v in vol.data() {
        v.write_le(&mut bytes);
    }
    fs::write(&payload, bytes)?;
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    json.push('\n');
    fs::write(sidecar_path(&payload), json)?;
    Ok(())
}
