//! Grid-aligned volumetric data model.
//!
//! Every array is stored in standard (row-major) layout with axis order
//! `[x, y, z]`, so the last axis varies fastest in memory.

use ndarray::{s, Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical placement of a voxel grid, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    /// Geometry of a sub-grid starting at `offset` voxels.
    pub fn shifted(&self, offset: [usize; 3]) -> Geometry {
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += offset[a] as f64 * self.spacing[a];
        }
        Geometry {
            spacing: self.spacing,
            origin,
        }
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    fn approx_eq(&self, other: &Geometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()));
        (0..3).all(|a| {
            close(self.spacing[a], other.spacing[a]) && close(self.origin[a], other.origin[a])
        })
    }
}

/// Anything that lives on a voxel grid.
pub trait Grid {
    fn shape(&self) -> [usize; 3];
    fn geometry(&self) -> &Geometry;

    fn len(&self) -> usize {
        self.shape().iter().product()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn ensure_same_grid(a: &impl Grid, b: &impl Grid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::GridMismatch(format!(
            "shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.geometry().approx_eq(b.geometry()) {
        return Err(Error::GridMismatch(format!(
            "geometry {:?} vs {:?}",
            a.geometry(),
            b.geometry()
        )));
    }
    Ok(())
}

pub(crate) fn dims(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "every dimension must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Array3<f32>,
    geometry: Geometry,
}

impl Volume3D {
    pub fn new(data: Array3<f32>, geometry: Geometry) -> Result<Self> {
        check_dims(data.shape())?;
        geometry.validate()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume contains non-finite values".into(),
            ));
        }
        Ok(Volume3D {
            data: data.as_standard_layout().into_owned(),
            geometry,
        })
    }

    pub fn zeros(shape: [usize; 3], geometry: Geometry) -> Result<Self> {
        Volume3D::new(Array3::zeros(shape), geometry)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl Grid for Volume3D {
    fn shape(&self) -> [usize; 3] {
        dims(self.data.shape())
    }
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

/// Boolean region of interest (the prostate mask, thresholded predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array3<bool>,
    geometry: Geometry,
}

impl BinaryMask {
    pub fn new(data: Array3<bool>, geometry: Geometry) -> Result<Self> {
        check_dims(data.shape())?;
        geometry.validate()?;
        Ok(BinaryMask {
            data: data.as_standard_layout().into_owned(),
            geometry,
        })
    }

    pub fn full(shape: [usize; 3], geometry: Geometry) -> Result<Self> {
        BinaryMask::new(Array3::from_elem(shape, true), geometry)
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.data
    }

    pub fn as_slice(&self) -> &[bool] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    /// Tight bounding box as `(lo, hi)` with `hi` exclusive.
    pub fn bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut found = false;
        for ((i, j, k), &v) in self.data.indexed_iter() {
            if v {
                found = true;
                let idx = [i, j, k];
                for a in 0..3 {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a] + 1);
                }
            }
        }
        found.then_some((lo, hi))
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        ensure_same_grid(self, other)?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| a && b);
        Ok(BinaryMask {
            data,
            geometry: self.geometry,
        })
    }
}

impl Grid for BinaryMask {
    fn shape(&self) -> [usize; 3] {
        dims(self.data.shape())
    }
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

/// Where a lesion annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Reader-drawn outline without pathology confirmation.
    Weak,
    /// Biopsy-confirmed annotation.
    Strong,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Weak => "weak",
            Provenance::Strong => "strong",
        })
    }
}

/// Voxel ground truth, `0` background and `1` lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    data: Array3<u8>,
    geometry: Geometry,
    provenance: Provenance,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, geometry: Geometry, provenance: Provenance) -> Result<Self> {
        check_dims(data.shape())?;
        geometry.validate()?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "label values must be 0 or 1".into(),
            ));
        }
        Ok(LabelVolume {
            data: data.as_standard_layout().into_owned(),
            geometry,
            provenance,
        })
    }

    pub fn from_mask(mask: &BinaryMask, provenance: Provenance) -> Self {
        LabelVolume {
            data: mask.data.mapv(u8::from),
            geometry: mask.geometry,
            provenance,
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn lesion_voxels(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|v| v == 1),
            geometry: self.geometry,
        }
    }

    /// True when every lesion voxel lies inside `roi`.
    pub fn within(&self, roi: &BinaryMask) -> bool {
        self.data.shape() == roi.data.shape()
            && Zip::from(&self.data)
                .and(&roi.data)
                .all(|&l, &m| l == 0 || m)
    }
}

impl Grid for LabelVolume {
    fn shape(&self) -> [usize; 3] {
        dims(self.data.shape())
    }
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

/// Order-statistic percentile: `lower` picks the order statistic at
/// `floor(q (n - 1))`, otherwise `ceil(q (n - 1))`. Both are actual sample
/// values, which makes re-normalisation exactly idempotent.
fn order_statistic(sorted: &[f32], q: f64, lower: bool) -> f32 {
    let pos = q * (sorted.len() - 1) as f64;
    let idx = if lower { pos.floor() } else { pos.ceil() } as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Percentile-window min-max normalisation to `[0, 1]` using the 1st and 99th
/// intensity percentiles within `roi`.
pub fn normalize_intensity(vol: &Volume3D, roi: &BinaryMask) -> Result<Volume3D> {
    ensure_same_grid(vol, roi)?;
    let mut inside: Vec<f32> = vol
        .data
        .iter()
        .zip(roi.data.iter())
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask("normalisation roi"));
    }
    inside.sort_by(f32::total_cmp);
    let p1 = order_statistic(&inside, 0.01, true);
    let p99 = order_statistic(&inside, 0.99, false);
    let range = p99 - p1;
    if !(range > 0.0) {
        return Err(Error::Degenerate(format!(
            "intensity window collapsed (p1 = p99 = {p1})"
        )));
    }
    let data = vol.data.mapv(|v| ((v.clamp(p1, p99) - p1) / range).clamp(0.0, 1.0));
    Ok(Volume3D {
        data,
        geometry: vol.geometry,
    })
}

/// Axis-aligned box, `hi` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropBox {
    pub fn shape(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    /// Mask bounding box grown by `margin` and clamped to the grid.
    pub fn around(mask: &BinaryMask, margin: usize) -> Result<CropBox> {
        let (lo, hi) = mask.bbox().ok_or(Error::EmptyMask("crop mask"))?;
        let shape = mask.shape();
        let mut b = CropBox { lo, hi };
        for a in 0..3 {
            b.lo[a] = lo[a].saturating_sub(margin);
            b.hi[a] = (hi[a] + margin).min(shape[a]);
        }
        Ok(b)
    }

    /// Grow the box (symmetrically where possible) so every extent is at
    /// least `min_extent`, staying inside `shape`.
    pub fn expand_to(&self, min_extent: [usize; 3], shape: [usize; 3]) -> CropBox {
        let mut b = *self;
        for a in 0..3 {
            let want = min_extent[a].min(shape[a]);
            let have = b.hi[a] - b.lo[a];
            if have >= want {
                continue;
            }
            let extra = want - have;
            let before = (extra / 2).min(b.lo[a]);
            b.lo[a] -= before;
            b.hi[a] += extra - before;
            if b.hi[a] > shape[a] {
                let over = b.hi[a] - shape[a];
                b.hi[a] = shape[a];
                b.lo[a] -= over;
            }
        }
        b
    }

    pub fn view<'a, T>(&self, arr: &'a Array3<T>) -> ArrayView3<'a, T> {
        arr.slice(s![
            self.lo[0]..self.hi[0],
            self.lo[1]..self.hi[1],
            self.lo[2]..self.hi[2]
        ])
    }

    pub fn crop<T: Clone>(&self, arr: &Array3<T>) -> Array3<T> {
        self.view(arr).as_standard_layout().into_owned()
    }

    /// Write `sub` back into `parent` at this box.
    pub fn paste<T: Clone>(&self, parent: &mut Array3<T>, sub: &Array3<T>) -> Result<()> {
        if dims(sub.shape()) != self.shape() {
            return Err(crate::error::shape_mismatch(&self.shape(), sub.shape()));
        }
        parent
            .slice_mut(s![
                self.lo[0]..self.hi[0],
                self.lo[1]..self.hi[1],
                self.lo[2]..self.hi[2]
            ])
            .assign(sub);
        Ok(())
    }
}

/// Crop `vol` to the bounding box of `mask` plus `margin` voxels. Returns the
/// sub-volume and its offset in the parent grid.
pub fn crop_to_bbox(
    vol: &Volume3D,
    mask: &BinaryMask,
    margin_voxels: usize,
) -> Result<(Volume3D, [usize; 3])> {
    ensure_same_grid(vol, mask)?;
    let b = CropBox::around(mask, margin_voxels)?;
    Ok((
        Volume3D {
            data: b.crop(&vol.data),
            geometry: vol.geometry.shifted(b.lo),
        },
        b.lo,
    ))
}

pub fn crop_mask(mask: &BinaryMask, b: &CropBox) -> BinaryMask {
    BinaryMask {
        data: b.crop(&mask.data),
        geometry: mask.geometry.shifted(b.lo),
    }
}

pub fn crop_volume(vol: &Volume3D, b: &CropBox) -> Volume3D {
    Volume3D {
        data: b.crop(&vol.data),
        geometry: vol.geometry.shifted(b.lo),
    }
}
