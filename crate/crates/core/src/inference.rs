//! Whole-volume prediction, entropy maps and lesion candidates.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{components_of, ConnectedComponent, Connectivity};
use crate::error::{shape_mismatch, Error, Result};
use crate::losses::entropy_map;
use crate::network::Model;
use crate::patching::{extract_window, stitch_predictions, tile_volume, Blend, PatchSpec};
use crate::volume::{ensure_same_grid, normalize_intensity, BinaryMask, CropBox, Grid, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Overrides the half-patch default stride when set.
    pub stride: Option<[usize; 3]>,
    pub blend: Blend,
    /// Voxels added around the prostate bounding box before tiling.
    pub margin: usize,
    pub min_size: usize,
    /// Used when the checkpoint carries no validation-derived threshold.
    pub default_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            stride: None,
            blend: Blend::Gaussian,
            margin: 4,
            min_size: 20,
            default_threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn patch_spec(&self, size: [usize; 3]) -> PatchSpec {
        PatchSpec {
            size,
            stride: self.stride.unwrap_or(size.map(|s| (s / 2).max(1))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(Error::InvalidConfig("default_threshold must be in [0, 1]".into()));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidConfig("min_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stitched lesion probability and voxel-wise entropy, zero outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub probability: Volume3D,
    pub entropy: Volume3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionCandidate {
    pub component: ConnectedComponent,
    pub score: f64,
    pub volume_mm3: f64,
    pub grid_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub probability: Volume3D,
    pub entropy: Volume3D,
    pub candidates: Vec<LesionCandidate>,
    pub patient_score: f64,
}

/// Intensity normalisation applied to every image before it reaches the model.
pub fn prepare_image(vol: &Volume3D, prostate: &BinaryMask) -> Result<Volume3D> {
    normalize_intensity(vol, prostate)
}

/// Tile the prostate region, run the full-resolution head on each tile and
/// stitch. `vol` must already be normalised (see [`prepare_image`]).
pub fn predict_volume(
    model: &Model,
    vol: &Volume3D,
    prostate: &BinaryMask,
    spec: &PatchSpec,
    blend: Blend,
    margin: usize,
) -> Result<VolumePrediction> {
    ensure_same_grid(vol, prostate)?;
    spec.validate()?;
    let size = model.config().patch_size;
    if spec.size != size {
        return Err(shape_mismatch(&size, &spec.size));
    }
    let shape = vol.shape();
    let bbox = CropBox::around(prostate, margin)?.expand_to(size, shape);
    let bshape = bbox.shape();
    let grid: [usize; 3] = std::array::from_fn(|a| bshape[a].max(size[a]));
    let pad: [usize; 3] = std::array::from_fn(|a| (grid[a] - bshape[a]) / 2);
    let origins = tile_volume(grid, spec);
    let classes = model.config().num_classes;

    let tiles: Vec<([usize; 3], Vec<Array3<f32>>)> = origins
        .par_iter()
        .map(|&o| {
            let parent: [isize; 3] =
                std::array::from_fn(|a| (bbox.lo[a] + o[a]) as isize - pad[a] as isize);
            let (img, _) = extract_window(vol.data(), parent, size);
            let img = img.as_standard_layout().into_owned();
            let out = model.predict_full_res(img.as_slice().expect("standard layout"))?;
            let chans = (0..classes)
                .map(|c| {
                    Array3::from_shape_vec(size, out.channel(c).to_vec())
                        .expect("channel has patch shape")
                })
                .collect();
            Ok((o, chans))
        })
        .collect::<Result<_>>()?;

    let mut stitched = Vec::with_capacity(classes);
    for c in 0..classes {
        let per: Vec<([usize; 3], Array3<f32>)> =
            tiles.iter().map(|(o, ch)| (*o, ch[c].clone())).collect();
        stitched.push(stitch_predictions(&per, grid, blend)?);
    }

    let n_grid: usize = grid.iter().product();
    let mut probs = Vec::with_capacity(classes * n_grid);
    for s in &stitched {
        probs.extend(s.iter().map(|&v| f64::from(v)));
    }
    let ent = entropy_map(&probs, classes)?;

    let mask = prostate.data();
    let mut prob = Array3::<f32>::zeros(shape);
    let mut entropy = Array3::<f32>::zeros(shape);
    for i in bbox.lo[0]..bbox.hi[0] {
        for j in bbox.lo[1]..bbox.hi[1] {
            for k in bbox.lo[2]..bbox.hi[2] {
                if !mask[[i, j, k]] {
                    continue;
                }
                let g = [
                    i - bbox.lo[0] + pad[0],
                    j - bbox.lo[1] + pad[1],
                    k - bbox.lo[2] + pad[2],
                ];
                prob[[i, j, k]] = stitched[crate::network::LESION][g];
                let gi = (g[0] * grid[1] + g[1]) * grid[2] + g[2];
                entropy[[i, j, k]] = ent[gi] as f32;
            }
        }
    }
    let geometry = *vol.geometry();
    Ok(VolumePrediction {
        probability: Volume3D::new(prob, geometry)?,
        entropy: Volume3D::new(entropy, geometry)?,
    })
}

/// Components of `{p > threshold} ∩ prostate` with at least `min_size`
/// voxels, scored by their maximum probability, highest score first.
pub fn extract_lesions(
    prob: &Volume3D,
    prostate: &BinaryMask,
    threshold: f64,
    min_size: usize,
) -> Result<Vec<LesionCandidate>> {
    ensure_same_grid(prob, prostate)?;
    let shape = prob.shape();
    let p = prob.as_slice();
    let m = prostate.as_slice();
    let on: Vec<bool> = p
        .iter()
        .zip(m)
        .map(|(&v, &inside)| inside && f64::from(v) > threshold)
        .collect();
    let vox_mm3 = prob.geometry().voxel_volume_mm3();
    let mut out: Vec<LesionCandidate> = components_of(&on, shape, Connectivity::TwentySix)
        .into_iter()
        .filter(|c| c.size() >= min_size)
        .map(|c| {
            let score = c
                .voxels()
                .iter()
                .map(|&i| f64::from(p[i]))
                .fold(f64::NEG_INFINITY, f64::max);
            LesionCandidate {
                volume_mm3: c.size() as f64 * vox_mm3,
                component: c,
                score,
                grid_shape: shape,
            }
        })
        .collect();
    // Stable: equal scores keep the component order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Maximum candidate score, or 0 when there are none.
pub fn patient_score(candidates: &[LesionCandidate]) -> f64 {
    candidates.iter().map(|c| c.score).fold(0.0, f64::max)
}

/// Normalise, predict, threshold and score one case.
pub fn predict_case(
    model: &Model,
    image: &Volume3D,
    prostate: &BinaryMask,
    cfg: &InferenceConfig,
    threshold: f64,
) -> Result<PredictionResult> {
    let prepared = prepare_image(image, prostate)?;
    let spec = cfg.patch_spec(model.config().patch_size);
    let pred = predict_volume(model, &prepared, prostate, &spec, cfg.blend, cfg.margin)?;
    let candidates = extract_lesions(&pred.probability, prostate, threshold, cfg.min_size)?;
    Ok(PredictionResult {
        patient_score: patient_score(&candidates),
        probability: pred.probability,
        entropy: pred.entropy,
        candidates,
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CandidateRow {
    case_id: String,
    centroid_x: f64,
    centroid_y: f64,
    centroid_z: f64,
    size: usize,
    volume_mm3: f64,
    score: f64,
}

/// Append one case's candidates to a CSV writer.
pub fn write_candidates<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    case_id: &str,
    candidates: &[LesionCandidate],
) -> Result<()> {
    for c in candidates {
        let [x, y, z] = c.component.centroid();
        w.serialize(CandidateRow {
            case_id: case_id.to_string(),
            centroid_x: x,
            centroid_y: y,
            centroid_z: z,
            size: c.component.size(),
            volume_mm3: c.volume_mm3,
            score: c.score,
        })?;
    }
    Ok(())
}

/// Mid-slice (last axis) montage: image | probability | entropy.
pub fn write_montage(path: &Path, image: &Volume3D, probability: &Volume3D, entropy: &Volume3D) -> Result<()> {
    ensure_same_grid(image, probability)?;
    ensure_same_grid(image, entropy)?;
    let [d0, d1, d2] = image.shape();
    let k = d2 / 2;
    let (lo, hi) = image.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let ln2 = std::f32::consts::LN_2;
    let panels: [(&Array3<f32>, Box<dyn Fn(f32) -> f32>); 3] = [
        (image.data(), Box::new(move |v| (v - lo) / span)),
        (probability.data(), Box::new(|v| v)),
        (entropy.data(), Box::new(move |v| v / ln2)),
    ];
    let width = (d1 * 3) as u32;
    let mut img = image::GrayImage::new(width, d0 as u32);
    for (p, (arr, scale)) in panels.iter().enumerate() {
        for i in 0..d0 {
            for j in 0..d1 {
                let v = scale(arr[[i, j, k]]).clamp(0.0, 1.0);
                img.put_pixel((p * d1 + j) as u32, i as u32, image::Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}
