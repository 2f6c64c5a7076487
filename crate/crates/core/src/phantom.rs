//! Synthetic B-mode-like phantoms.
//!
//! A bright ellipsoidal gland on a dimmer background, multiplicative speckle,
//! hypoechoic lesions strictly inside the gland, and hypoechoic confounders
//! that share the lesion intensity distribution: acoustic-shadow stripes
//! running from inside the gland out to the volume edge, and blobs centred
//! outside the gland that cross its boundary.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::components::{flatten, unflatten};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Grid, LabelVolume, Provenance, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Relative uniform jitter of each semi-axis.
    pub semi_axis_jitter: f64,
    /// Uniform jitter of the gland centre, voxels.
    pub center_jitter: f64,
    /// Inclusive range of lesion counts.
    pub lesion_count: [usize; 2],
    pub lesion_radius: [f64; 2],
    /// Total lesion volume as a fraction of the gland.
    pub lesion_fraction: f64,
    /// Relative per-axis radius perturbation (volume preserving).
    pub lesion_anisotropy: f64,
    pub confounder_count: [usize; 2],
    pub stripe_radius: [f64; 2],
    pub blob_radius: [f64; 2],
    pub background_intensity: f64,
    pub tissue_intensity: f64,
    /// Relative intensity drop of lesions and confounders against gland tissue.
    pub hypo_drop: f64,
    pub speckle_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64; 3],
            spacing: [1.0; 3],
            semi_axes: [22.0, 18.0, 16.0],
            semi_axis_jitter: 0.1,
            center_jitter: 3.0,
            lesion_count: [1, 2],
            lesion_radius: [3.0, 8.0],
            lesion_fraction: 0.04,
            lesion_anisotropy: 0.15,
            confounder_count: [1, 3],
            stripe_radius: [2.0, 3.0],
            blob_radius: [3.5, 5.0],
            background_intensity: 0.85,
            tissue_intensity: 1.0,
            hypo_drop: 0.3,
            speckle_sigma: 0.25,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0] >= min && r[0] <= r[1] && r[1].is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 8) {
            return Err(Error::InvalidConfig("phantom shape must be at least 8 per axis".into()));
        }
        Geometry { spacing: self.spacing, origin: [0.0; 3] }.validate()?;
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction < 0.2) {
            return Err(Error::InvalidConfig("lesion_fraction must be in (0, 0.2)".into()));
        }
        if self.lesion_count[0] > self.lesion_count[1] || self.confounder_count[0] > self.confounder_count[1] {
            return Err(Error::InvalidConfig("count ranges must be ordered".into()));
        }
        check_range("lesion_radius", self.lesion_radius, 1.0)?;
        check_range("stripe_radius", self.stripe_radius, 0.5)?;
        check_range("blob_radius", self.blob_radius, 1.0)?;
        if self.semi_axes.iter().any(|&a| a <= 2.0) || !(0.0..0.5).contains(&self.semi_axis_jitter) {
            return Err(Error::InvalidConfig("gland semi-axes must exceed 2 voxels, jitter < 0.5".into()));
        }
        if !(0.0..0.5).contains(&self.lesion_anisotropy) || self.center_jitter < 0.0 {
            return Err(Error::InvalidConfig("anisotropy must be in [0, 0.5), centre jitter non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.hypo_drop) || self.speckle_sigma < 0.0 {
            return Err(Error::InvalidConfig("hypo_drop must be in [0, 1), speckle_sigma >= 0".into()));
        }
        if self.background_intensity <= 0.0 || self.tissue_intensity <= 0.0 {
            return Err(Error::InvalidConfig("intensities must be positive".into()));
        }
        Ok(())
    }

    pub fn with_lesion_count(&self, count: usize) -> Self {
        PhantomSpec { lesion_count: [count, count], ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume3D,
    pub prostate: BinaryMask,
    pub label: LabelVolume,
    pub confounder: BinaryMask,
    pub lesion_count: usize,
    pub stripes: usize,
    pub blobs: usize,
}

impl Phantom {
    pub fn confounder_count(&self) -> usize {
        self.stripes + self.blobs
    }

    pub fn lesion_fraction(&self) -> f64 {
        self.label.lesion_voxels() as f64 / self.prostate.count() as f64
    }
}

const MAX_TRIES: usize = 500;

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

/// Flat indices of voxels inside an axis-aligned ellipsoid, clipped to the grid.
fn ellipsoid(shape: [usize; 3], c: [f64; 3], r: [f64; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    let lo: [usize; 3] = std::array::from_fn(|a| (c[a] - r[a]).floor().max(0.0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| ((c[a] + r[a]).ceil().max(0.0) as usize + 1).min(shape[a]));
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                let p = [i as f64, j as f64, k as f64];
                let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
                if q <= 1.0 {
                    out.push(flatten([i, j, k], shape));
                }
            }
        }
    }
    out
}

/// Chebyshev dilation by `r` voxels.
fn dilate_box(mask: &[bool], shape: [usize; 3], r: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let c = unflatten(idx, shape);
        let lo: [usize; 3] = std::array::from_fn(|a| c[a].saturating_sub(r));
        let hi: [usize; 3] = std::array::from_fn(|a| (c[a] + r + 1).min(shape[a]));
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    out[flatten([i, j, k], shape)] = true;
                }
            }
        }
    }
    out
}

fn erode_box(mask: &[bool], shape: [usize; 3], r: usize) -> Vec<bool> {
    let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let grown = dilate_box(&inv, shape, r);
    (0..mask.len())
        .map(|i| {
            let c = unflatten(i, shape);
            let interior = (0..3).all(|a| c[a] >= r && c[a] + r < shape[a]);
            mask[i] && !grown[i] && interior
        })
        .collect()
}

/// Generate one phantom. Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.shape;
    let n: usize = shape.iter().product();

    let axes: [f64; 3] = std::array::from_fn(|a| {
        spec.semi_axes[a] * (1.0 + rng.random_range(-spec.semi_axis_jitter..=spec.semi_axis_jitter))
    });
    let center: [f64; 3] = std::array::from_fn(|a| {
        let j = if spec.center_jitter > 0.0 {
            rng.random_range(-spec.center_jitter..=spec.center_jitter)
        } else {
            0.0
        };
        (shape[a] as f64 - 1.0) / 2.0 + j
    });
    for a in 0..3 {
        if center[a] - axes[a] < 1.0 || center[a] + axes[a] > shape[a] as f64 - 2.0 {
            return Err(Error::InvalidConfig(format!(
                "gland with semi-axes {axes:?} does not fit in {shape:?}"
            )));
        }
    }
    let mut prostate = vec![false; n];
    for i in ellipsoid(shape, center, axes) {
        prostate[i] = true;
    }
    let gland_voxels = prostate.iter().filter(|&&b| b).count();

    // Lesions.
    let count = rng.random_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let mut lesion = vec![false; n];
    if count > 0 {
        let target = spec.lesion_fraction * gland_voxels as f64;
        let r = (3.0 * target / (4.0 * std::f64::consts::PI * count as f64)).cbrt();
        if r < spec.lesion_radius[0] || r > spec.lesion_radius[1] {
            return Err(Error::InvalidConfig(format!(
                "lesion fraction {} needs radius {r:.2} outside {:?}",
                spec.lesion_fraction, spec.lesion_radius
            )));
        }
        let interior = erode_box(&prostate, shape, 2);
        let inside: Vec<usize> = (0..n).filter(|&i| interior[i]).collect();
        if inside.is_empty() {
            return Err(Error::InvalidConfig("gland too small for lesions".into()));
        }
        for _ in 0..count {
            let mut radii: [f64; 3] = std::array::from_fn(|_| {
                r * (1.0 + rng.random_range(-spec.lesion_anisotropy..=spec.lesion_anisotropy))
            });
            let scale = (r * r * r / radii.iter().product::<f64>()).cbrt();
            radii.iter_mut().for_each(|x| *x *= scale);
            let keepout = dilate_box(&lesion, shape, 2);
            let mut placed = false;
            for _ in 0..MAX_TRIES {
                let c = unflatten(inside[rng.random_range(0..inside.len())], shape);
                let cf = c.map(|v| v as f64);
                let vox = ellipsoid(shape, cf, radii);
                if vox.iter().all(|&v| interior[v] && !keepout[v]) {
                    vox.iter().for_each(|&v| lesion[v] = true);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidConfig(
                    "could not place lesions inside the gland".into(),
                ));
            }
        }
    }

    // Confounders.
    let keepout = dilate_box(&lesion, shape, 2);
    let gland_idx: Vec<usize> = (0..n).filter(|&i| prostate[i] && !keepout[i]).collect();
    let n_conf = rng.random_range(spec.confounder_count[0]..=spec.confounder_count[1]);
    let mut confounder = vec![false; n];
    let (mut stripes, mut blobs) = (0, 0);
    for _ in 0..n_conf {
        let stripe = rng.random::<bool>();
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let vox = if stripe {
                let rad = uniform(&mut rng, spec.stripe_radius);
                let s = unflatten(gland_idx[rng.random_range(0..gland_idx.len())], shape);
                let up = rng.random::<bool>();
                let (k0, k1) = if up { (s[2], shape[2]) } else { (0, s[2] + 1) };
                let mut v = Vec::new();
                let ri = rad.ceil() as isize;
                for di in -ri..=ri {
                    for dj in -ri..=ri {
                        if ((di * di + dj * dj) as f64) > rad * rad {
                            continue;
                        }
                        let (i, j) = (s[0] as isize + di, s[1] as isize + dj);
                        if i < 0 || j < 0 || i >= shape[0] as isize || j >= shape[1] as isize {
                            continue;
                        }
                        for k in k0..k1 {
                            v.push(flatten([i as usize, j as usize, k], shape));
                        }
                    }
                }
                v
            } else {
                let rad = uniform(&mut rng, spec.blob_radius);
                let u: [f64; 3] = UnitSphere.sample(&mut rng);
                let q: f64 = (0..3).map(|a| (u[a] / axes[a]).powi(2)).sum();
                let surf = 1.0 / q.sqrt();
                let d = surf + rng.random_range(0.2 * rad..=0.6 * rad);
                let c: [f64; 3] = std::array::from_fn(|a| center[a] + d * u[a]);
                ellipsoid(shape, c, [rad; 3])
            };
            let in_gland = vox.iter().filter(|&&v| prostate[v]).count();
            if in_gland >= 20 && vox.iter().all(|&v| !keepout[v]) {
                placed = Some(vox);
                break;
            }
        }
        let vox = placed.ok_or_else(|| Error::InvalidConfig("could not place confounders".into()))?;
        vox.iter().for_each(|&v| confounder[v] = true);
        if stripe {
            stripes += 1;
        } else {
            blobs += 1;
        }
    }

    // Intensities.
    let hypo = spec.tissue_intensity * (1.0 - spec.hypo_drop);
    let speckle = Normal::new(1.0, spec.speckle_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut img = Vec::with_capacity(n);
    for i in 0..n {
        let base = if lesion[i] || confounder[i] {
            hypo
        } else if prostate[i] {
            spec.tissue_intensity
        } else {
            spec.background_intensity
        };
        let s: f64 = speckle.sample(&mut rng);
        img.push((base * s.max(0.05)) as f32);
    }

    let geometry = Geometry { spacing: spec.spacing, origin: [0.0; 3] };
    let to_arr = |v: Vec<bool>| Array3::from_shape_vec(shape, v).expect("grid sized");
    Ok(Phantom {
        image: Volume3D::new(Array3::from_shape_vec(shape, img).expect("grid sized"), geometry)?,
        prostate: BinaryMask::new(to_arr(prostate), geometry)?,
        label: LabelVolume::new(
            Array3::from_shape_vec(shape, lesion.iter().map(|&b| u8::from(b)).collect()).expect("grid sized"),
            geometry,
            Provenance::Strong,
        )?,
        confounder: BinaryMask::new(to_arr(confounder), geometry)?,
        lesion_count: count,
        stripes,
        blobs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakLabelSpec {
    /// Inclusive range of ball-dilation radii, voxels.
    pub dilation: [usize; 2],
    /// Maximum per-axis centroid shift, voxels.
    pub jitter: usize,
}

impl Default for WeakLabelSpec {
    fn default() -> Self {
        WeakLabelSpec { dilation: [1, 3], jitter: 2 }
    }
}

/// Offsets of the Euclidean ball of radius `r`.
pub fn ball_offsets(r: usize) -> Vec<[isize; 3]> {
    let r = r as isize;
    let mut out = Vec::new();
    for a in -r..=r {
        for b in -r..=r {
            for c in -r..=r {
                if a * a + b * b + c * c <= r * r {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Simulated annotator outline: each lesion is dilated by a random ball and
/// shifted by a random offset, then the result is clipped to the gland.
pub fn generate_weak_label(
    strong: &LabelVolume,
    prostate: &BinaryMask,
    spec: &WeakLabelSpec,
    seed: u64,
) -> Result<LabelVolume> {
    crate::volume::ensure_same_grid(strong, prostate)?;
    if spec.dilation[0] > spec.dilation[1] {
        return Err(Error::InvalidConfig("dilation range must be ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = strong.shape();
    let m = prostate.as_slice();
    let mut out = vec![0u8; m.len()];
    for comp in crate::evaluation::truth_components(strong) {
        let d = rng.random_range(spec.dilation[0]..=spec.dilation[1]);
        let j = spec.jitter as i64;
        let shift: [isize; 3] = std::array::from_fn(|_| rng.random_range(-j..=j) as isize);
        let ball = ball_offsets(d);
        for &v in comp.voxels() {
            let c = unflatten(v, shape);
            for o in &ball {
                let p: [isize; 3] = std::array::from_fn(|a| c[a] as isize + o[a] + shift[a]);
                if (0..3).all(|a| p[a] >= 0 && p[a] < shape[a] as isize) {
                    let idx = flatten(p.map(|x| x as usize), shape);
                    if m[idx] {
                        out[idx] = 1;
                    }
                }
            }
        }
    }
    LabelVolume::new(
        Array3::from_shape_vec(shape, out).expect("grid sized"),
        *strong.geometry(),
        Provenance::Weak,
    )
}
