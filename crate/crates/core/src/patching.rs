//! Training-patch sampling and sliding-window tiling/stitching.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{derive_patch_label, PatchClass};
use crate::volume::{ensure_same_grid, BinaryMask, Grid, LabelVolume, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec::cubic(128)
    }
}

impl PatchSpec {
    /// Cubic patch with the default half-size stride.
    pub fn cubic(size: usize) -> Self {
        PatchSpec {
            size: [size; 3],
            stride: [(size / 2).max(1); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 {
                return Err(Error::InvalidConfig("patch size must be positive".into()));
            }
            if self.stride[a] == 0 || self.stride[a] > self.size[a] {
                return Err(Error::InvalidConfig(format!(
                    "patch stride must be in [1, size], got {:?} for size {:?}",
                    self.stride, self.size
                )));
            }
        }
        Ok(())
    }
}

/// A training sample cut from a case.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Array3<f32>,
    pub label: Array3<u8>,
    /// False on padded voxels; losses ignore them.
    pub valid: Array3<bool>,
    /// Parent-grid coordinate of the patch's first voxel. Negative on padded axes.
    pub origin: [isize; 3],
    /// The voxel the patch was drawn around.
    pub center: [usize; 3],
    /// Voxels of zero padding before/after on each axis.
    pub padding: [(usize, usize); 3],
    pub patch_class: PatchClass,
}

fn axis_window(dim: usize, size: usize, center: usize) -> (isize, (usize, usize)) {
    if dim < size {
        let before = (size - dim) / 2;
        (-(before as isize), (before, size - dim - before))
    } else {
        let start = center as isize - (size / 2) as isize;
        (start.clamp(0, (dim - size) as isize), (0, 0))
    }
}

/// Cut a `spec.size` window starting at `origin` (may be negative or run past
/// the end), zero-padding outside the parent grid.
pub fn extract_window<T: Copy + Default>(
    src: &Array3<T>,
    origin: [isize; 3],
    size: [usize; 3],
) -> (Array3<T>, Array3<bool>) {
    let shape = src.shape();
    let mut out = Array3::from_elem(size, T::default());
    let mut valid = Array3::from_elem(size, false);
    for i in 0..size[0] {
        let pi = origin[0] + i as isize;
        if pi < 0 || pi >= shape[0] as isize {
            continue;
        }
        for j in 0..size[1] {
            let pj = origin[1] + j as isize;
            if pj < 0 || pj >= shape[1] as isize {
                continue;
            }
            for k in 0..size[2] {
                let pk = origin[2] + k as isize;
                if pk < 0 || pk >= shape[2] as isize {
                    continue;
                }
                out[[i, j, k]] = src[[pi as usize, pj as usize, pk as usize]];
                valid[[i, j, k]] = true;
            }
        }
    }
    (out, valid)
}

/// Draw a random patch whose centre voxel lies in the prostate. With
/// probability `positive_bias` the centre is drawn from lesion voxels instead,
/// when any exist.
pub fn sample_training_patch<R: Rng + ?Sized>(
    vol: &Volume3D,
    prostate: &BinaryMask,
    label: &LabelVolume,
    spec: &PatchSpec,
    rng: &mut R,
    positive_bias: f64,
    min_lesion_voxels: usize,
) -> Result<Patch> {
    spec.validate()?;
    ensure_same_grid(vol, prostate)?;
    ensure_same_grid(vol, label)?;
    let shape = vol.shape();
    let mask = prostate.as_slice();
    let lab = label.as_slice();
    let prostate_idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if prostate_idx.is_empty() {
        return Err(Error::EmptyMask("prostate"));
    }
    let lesion_idx: Vec<usize> = prostate_idx.iter().copied().filter(|&i| lab[i] == 1).collect();
    let use_lesion = !lesion_idx.is_empty() && rng.random::<f64>() < positive_bias;
    let pool = if use_lesion { &lesion_idx } else { &prostate_idx };
    let flat = pool[rng.random_range(0..pool.len())];
    let center = crate::components::unflatten(flat, shape);

    let mut origin = [0isize; 3];
    let mut padding = [(0usize, 0usize); 3];
    for a in 0..3 {
        let (o, p) = axis_window(shape[a], spec.size[a], center[a]);
        origin[a] = o;
        padding[a] = p;
    }
    let (image, valid) = extract_window(vol.data(), origin, spec.size);
    let (label, _) = extract_window(label.data(), origin, spec.size);
    let patch_class = derive_patch_label(&label, min_lesion_voxels);
    Ok(Patch {
        image,
        label,
        valid,
        origin,
        center,
        padding,
        patch_class,
    })
}

fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    if dim <= size {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + size >= dim {
            out.push(dim - size);
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

/// Sliding-window tile origins covering `shape`. Axes shorter than the patch
/// get a single origin at 0 and must be padded by the caller.
pub fn tile_volume(shape: [usize; 3], spec: &PatchSpec) -> Vec<[usize; 3]> {
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(shape[a], spec.size[a], spec.stride[a]))
        .collect();
    let mut out = Vec::new();
    for &i in &per_axis[0] {
        for &j in &per_axis[1] {
            for &k in &per_axis[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    Uniform,
    #[default]
    Gaussian,
}

fn axis_weights(n: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; n],
        Blend::Gaussian => {
            let sigma = n as f64 / 8.0;
            let mid = (n as f64 - 1.0) / 2.0;
            (0..n)
                .map(|i| {
                    let d = i as f64 - mid;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        }
    }
}

/// Weighted average of overlapping tile predictions.
///
/// Tiles are accumulated in a canonical order so the result does not depend
/// on the order they were produced in.
pub fn stitch_predictions(
    tiles: &[([usize; 3], Array3<f32>)],
    shape: [usize; 3],
    blend: Blend,
) -> Result<Array3<f32>> {
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by(|&a, &b| {
        tiles[a].0.cmp(&tiles[b].0).then_with(|| {
            tiles[a]
                .1
                .iter()
                .zip(tiles[b].1.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut acc = Array3::<f64>::zeros(shape);
    let mut wsum = Array3::<f64>::zeros(shape);
    for idx in order {
        let (origin, tile) = &tiles[idx];
        let ts = tile.shape();
        for a in 0..3 {
            if origin[a] + ts[a] > shape[a] {
                return Err(Error::InvalidArgument(format!(
                    "tile at {origin:?} with shape {ts:?} exceeds volume {shape:?}"
                )));
            }
        }
        let w: Vec<Vec<f64>> = (0..3).map(|a| axis_weights(ts[a], blend)).collect();
        for ((i, j, k), &v) in tile.indexed_iter() {
            let wt = w[0][i] * w[1][j] * w[2][k];
            let p = [origin[0] + i, origin[1] + j, origin[2] + k];
            acc[p] += wt * f64::from(v);
            wsum[p] += wt;
        }
    }
    if wsum.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidArgument(
            "stitching left voxels uncovered".into(),
        ));
    }
    Ok(ndarray::Zip::from(&acc)
        .and(&wsum)
        .map_collect(|&a, &w| ((a / w) as f32).clamp(0.0, 1.0)))
}
