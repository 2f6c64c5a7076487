//! Volume, mask and label file IO.
//!
//! Two on-disk formats are supported, selected by file extension:
//! NIfTI-1 (`.nii`, `.nii.gz`) and a raw little-endian `float32` array
//! (`.raw`) with a TOML sidecar (`<file>.raw.toml`) carrying shape, spacing,
//! origin and dtype.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{dims, BinaryMask, Geometry, Grid, LabelVolume, Provenance, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeFormat {
    #[serde(rename = "nii")]
    Nifti,
    #[serde(rename = "nii.gz")]
    NiftiGz,
    #[serde(rename = "raw")]
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::format(path, "unknown volume extension"))
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti => "nii",
            VolumeFormat::NiftiGz => "nii.gz",
            VolumeFormat::Raw => "raw",
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nii" | "nifti" => Ok(VolumeFormat::Nifti),
            "nii.gz" | "nifti-gz" => Ok(VolumeFormat::NiftiGz),
            "raw" => Ok(VolumeFormat::Raw),
            other => Err(Error::InvalidConfig(format!("unknown volume format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
}

pub fn raw_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

fn write_raw(path: &Path, data: &Array3<f32>, geometry: &Geometry) -> Result<()> {
    let header = RawHeader {
        shape: dims(data.shape()),
        spacing: geometry.spacing,
        origin: geometry.origin,
        dtype: "float32".into(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let side = raw_sidecar(path);
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<(Array3<f32>, Geometry)> {
    let side = raw_sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: RawHeader = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if header.dtype != "float32" {
        return Err(Error::format(&side, format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", n * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec(header.shape, values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((
        data,
        Geometry {
            spacing: header.spacing,
            origin: header.origin,
        },
    ))
}

fn nifti_header(geometry: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let [sx, sy, sz] = geometry.spacing.map(|v| v as f32);
    let [ox, oy, oz] = geometry.origin.map(|v| v as f32);
    h.pixdim = [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0];
    // millimetres
    h.xyzt_units = 2;
    h.quatern_x = ox;
    h.quatern_y = oy;
    h.quatern_z = oz;
    h.srow_x = [sx, 0.0, 0.0, ox];
    h.srow_y = [0.0, sy, 0.0, oy];
    h.srow_z = [0.0, 0.0, sz, oz];
    h
}

fn read_nifti(path: &Path) -> Result<(Array3<f32>, Geometry)> {
    let obj = ReaderOptions::new().read_file(path)?;
    let h = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f32>()?;
    if arr.ndim() != 3 {
        return Err(Error::format(path, format!("expected 3 dimensions, got {}", arr.ndim())));
    }
    let shape: Vec<usize> = arr.shape().to_vec();
    let data = Array3::from_shape_vec(
        dims(&shape),
        arr.as_standard_layout().iter().copied().collect(),
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    let spacing = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|v| v.abs().max(f32::MIN_POSITIVE) as f64);
    let origin = if h.sform_code > 0 {
        [h.srow_x[3], h.srow_y[3], h.srow_z[3]]
    } else {
        [h.quatern_x, h.quatern_y, h.quatern_z]
    }
    .map(f64::from);
    Ok((data, Geometry { spacing, origin }))
}

/// Read any supported format as `float32` plus geometry.
pub fn read_array(path: &Path) -> Result<(Array3<f32>, Geometry)> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => read_raw(path),
        VolumeFormat::Nifti | VolumeFormat::NiftiGz => read_nifti(path),
    }
}

pub fn write_array(path: &Path, data: &Array3<f32>, geometry: &Geometry) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => write_raw(path, data, geometry),
        _ => {
            let header = nifti_header(geometry);
            nifti::writer::WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(data)?;
            Ok(())
        }
    }
}

fn write_u8(path: &Path, data: &Array3<u8>, geometry: &Geometry) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => write_array(path, &data.mapv(f32::from), geometry),
        _ => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let header = nifti_header(geometry);
            nifti::writer::WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(data)?;
            Ok(())
        }
    }
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let (data, geometry) = read_array(path)?;
    Volume3D::new(data, geometry)
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_array(path, vol.data(), vol.geometry())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (data, geometry) = read_array(path)?;
    BinaryMask::new(data.mapv(|v| v > 0.5), geometry)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_u8(path, &mask.data().mapv(u8::from), mask.geometry())
}

pub fn read_label(path: &Path, provenance: Provenance) -> Result<LabelVolume> {
    let (data, geometry) = read_array(path)?;
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(path, "label values must be 0 or 1"));
    }
    LabelVolume::new(data.mapv(|v| v as u8), geometry, provenance)
}

pub fn write_label(path: &Path, label: &LabelVolume) -> Result<()> {
    write_u8(path, label.data(), label.geometry())
}
