//! Phantom cohorts, split assignment and the case manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_label, read_mask, read_volume, write_label, write_mask, write_volume, VolumeFormat};
use crate::phantom::{generate_phantom, generate_weak_label, Phantom, PhantomSpec, WeakLabelSpec};
use crate::training::{derive_seed, CaseRecord, Split};
use crate::volume::{LabelVolume, Provenance};

/// Train/val/test percentages.
pub const SPLIT_PERCENT: [usize; 3] = [76, 11, 13];
pub const MIN_CASES: usize = 10;

/// Split sizes for `n` cases: train and val rounded, test takes the rest.
pub fn split_counts(n: usize) -> Result<[usize; 3]> {
    if n < MIN_CASES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_CASES} cases, got {n}")));
    }
    let r = |p: usize| (n * p + 50) / 100;
    let train = r(SPLIT_PERCENT[0]);
    let val = r(SPLIT_PERCENT[1]);
    Ok([train, val, n - train - val])
}

/// Largest-remainder allocation of `total` over `sizes`, capped per split.
fn allocate(total: usize, sizes: [usize; 3]) -> Option<[usize; 3]> {
    let n: usize = sizes.iter().sum();
    if total > n {
        return None;
    }
    let mut out = [0usize; 3];
    let mut rem = [(0usize, 0usize); 3];
    for s in 0..3 {
        out[s] = total * sizes[s] / n;
        rem[s] = (total * sizes[s] % n, s);
    }
    let mut left = total - out.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, s) in rem.iter().cycle().take(3 * 3) {
        if left == 0 {
            break;
        }
        if out[s] < sizes[s] {
            out[s] += 1;
            left -= 1;
        }
    }
    (left == 0).then_some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_cases: usize,
    pub positive_fraction: f64,
    /// Explicit train/val/test sizes; the 76/11/13 rule when unset.
    pub splits: Option<[usize; 3]>,
    pub phantom: PhantomSpec,
    pub weak: WeakLabelSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_cases: 100,
            positive_fraction: 0.5,
            splits: None,
            phantom: PhantomSpec::default(),
            weak: WeakLabelSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        match self.splits {
            None => split_counts(self.n_cases),
            Some(s) => {
                if self.n_cases < MIN_CASES {
                    return Err(Error::InvalidArgument(format!(
                        "need at least {MIN_CASES} cases, got {}",
                        self.n_cases
                    )));
                }
                if s.iter().sum::<usize>() != self.n_cases || s[0] == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "split sizes {s:?} must sum to n_cases {} with a non-empty train split",
                        self.n_cases
                    )));
                }
                Ok(s)
            }
        }
    }

    pub fn positives(&self) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::InvalidConfig("positive_fraction must be in [0, 1]".into()));
        }
        Ok((self.n_cases as f64 * self.positive_fraction).round() as usize)
    }

    /// `(split, positive)` per case, in case order.
    pub fn assignments(&self) -> Result<Vec<(Split, bool)>> {
        let sizes = self.split_sizes()?;
        let pos = self.positives()?;
        let alloc = allocate(pos, sizes)
            .ok_or_else(|| Error::InvalidConfig("stratification is infeasible".into()))?;
        let mut out = Vec::with_capacity(self.n_cases);
        for (s, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            let mut flags: Vec<bool> = (0..sizes[s]).map(|k| k < alloc[s]).collect();
            flags.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[s as u64, 7])));
            out.extend(flags.into_iter().map(|p| (split, p)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCase {
    pub id: String,
    pub split: Split,
    pub positive: bool,
    pub seed: u64,
    pub phantom: Phantom,
    pub weak_label: LabelVolume,
}

impl GeneratedCase {
    pub fn record(&self, provenance: Provenance) -> CaseRecord {
        let label = match provenance {
            Provenance::Strong => self.phantom.label.clone(),
            Provenance::Weak => self.weak_label.clone(),
        };
        CaseRecord {
            id: self.id.clone(),
            image: self.phantom.image.clone(),
            prostate: self.phantom.prostate.clone(),
            label,
            split: self.split,
        }
    }
}

/// Generate all cases; per-case seeds derive from the master seed.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<GeneratedCase>> {
    spec.phantom.validate()?;
    let assign = spec.assignments()?;
    let lo = spec.phantom.lesion_count[0].max(1);
    let positive_spec = PhantomSpec {
        lesion_count: [lo, spec.phantom.lesion_count[1].max(lo)],
        ..spec.phantom.clone()
    };
    let negative_spec = spec.phantom.with_lesion_count(0);
    assign
        .par_iter()
        .enumerate()
        .map(|(i, &(split, positive))| {
            let seed = derive_seed(spec.seed, &[i as u64, 1]);
            let ps = if positive { &positive_spec } else { &negative_spec };
            let phantom = generate_phantom(ps, seed)?;
            let weak_label =
                generate_weak_label(&phantom.label, &phantom.prostate, &spec.weak, derive_seed(seed, &[2]))?;
            Ok(GeneratedCase { id: format!("case{i:04}"), split, positive, seed, phantom, weak_label })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub label: PathBuf,
    pub provenance: Provenance,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confounder: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "case")]
    pub cases: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut seen = std::collections::HashSet::new();
        for c in &m.cases {
            if !seen.insert(&c.id) {
                return Err(Error::InvalidConfig(format!("duplicate case id {:?}", c.id)));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Load every case; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Vec<CaseRecord>> {
        self.cases
            .par_iter()
            .map(|e| {
                let p = |q: &Path| if q.is_absolute() { q.to_path_buf() } else { base.join(q) };
                CaseRecord::new(
                    e.id.clone(),
                    read_volume(&p(&e.image))?,
                    read_mask(&p(&e.mask))?,
                    read_label(&p(&e.label), e.provenance)?,
                    e.split,
                )
            })
            .collect()
    }
}

/// Read a manifest and load its cases.
pub fn load_manifest(path: &Path) -> Result<Vec<CaseRecord>> {
    let m = Manifest::read(path)?;
    m.load(path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub id: String,
    pub split: Split,
    pub positive: bool,
    pub seed: u64,
    pub lesion_count: usize,
    pub lesion_fraction: f64,
    pub confounder_count: usize,
    pub weak_voxels: usize,
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub strong_manifest: PathBuf,
    pub weak_manifest: PathBuf,
    pub report: PathBuf,
}

pub const STRONG_MANIFEST: &str = "manifest.toml";
pub const WEAK_MANIFEST: &str = "manifest_weak.toml";
pub const GENERATION_REPORT: &str = "generation_report.csv";

/// Write volumes, a strong and a weak manifest, and the generation report.
pub fn write_dataset(dir: &Path, cases: &[GeneratedCase], format: VolumeFormat) -> Result<WrittenDataset> {
    let vol_dir = dir.join("cases");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let ext = format.extension();
    let rel = |id: &str, kind: &str| PathBuf::from("cases").join(format!("{id}_{kind}.{ext}"));
    cases.par_iter().try_for_each(|c| -> Result<()> {
        write_volume(&dir.join(rel(&c.id, "image")), &c.phantom.image)?;
        write_mask(&dir.join(rel(&c.id, "mask")), &c.phantom.prostate)?;
        write_label(&dir.join(rel(&c.id, "label")), &c.phantom.label)?;
        write_label(&dir.join(rel(&c.id, "weak")), &c.weak_label)?;
        write_mask(&dir.join(rel(&c.id, "confounder")), &c.phantom.confounder)
    })?;
    let manifest = |prov: Provenance, kind: &str| Manifest {
        cases: cases
            .iter()
            .map(|c| ManifestEntry {
                id: c.id.clone(),
                image: rel(&c.id, "image"),
                mask: rel(&c.id, "mask"),
                label: rel(&c.id, kind),
                provenance: prov,
                split: c.split,
                confounder: Some(rel(&c.id, "confounder")),
            })
            .collect(),
    };
    let strong_manifest = dir.join(STRONG_MANIFEST);
    let weak_manifest = dir.join(WEAK_MANIFEST);
    manifest(Provenance::Strong, "label").write(&strong_manifest)?;
    manifest(Provenance::Weak, "weak").write(&weak_manifest)?;
    let report = dir.join(GENERATION_REPORT);
    let mut w = csv::Writer::from_path(&report)?;
    for c in cases {
        w.serialize(GenerationRow {
            id: c.id.clone(),
            split: c.split,
            positive: c.positive,
            seed: c.seed,
            lesion_count: c.phantom.lesion_count,
            lesion_fraction: if c.positive { c.phantom.lesion_fraction() } else { 0.0 },
            confounder_count: c.phantom.confounder_count(),
            weak_voxels: c.weak_label.lesion_voxels(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&report, e))?;
    Ok(WrittenDataset { strong_manifest, weak_manifest, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_cases() {
        assert_eq!(split_counts(100).unwrap(), [76, 11, 13]);
        assert_eq!(split_counts(10).unwrap(), [8, 1, 1]);
        assert!(split_counts(9).is_err());
        let spec = DatasetSpec::default();
        let a = spec.assignments().unwrap();
        assert_eq!(a.iter().filter(|x| x.1).count(), 50);
        assert_eq!(a.iter().filter(|x| x.0 == Split::Train).count(), 76);
        assert_eq!(a.iter().filter(|x| x.0 == Split::Train && x.1).count(), 38);
    }

    #[test]
    fn explicit_splits() {
        let spec = DatasetSpec { n_cases: 56, splits: Some([40, 6, 10]), positive_fraction: 0.75, ..Default::default() };
        let a = spec.assignments().unwrap();
        let count = |s: Split| a.iter().filter(|x| x.0 == s).count();
        assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [40, 6, 10]);
        assert_eq!(a.iter().filter(|x| x.1).count(), 42);
        let bad = DatasetSpec { splits: Some([40, 6, 9]), ..spec };
        assert!(bad.assignments().is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let m = Manifest {
            cases: vec![ManifestEntry {
                id: "a".into(),
                image: "a.nii".into(),
                mask: "m.nii".into(),
                label: "l.nii".into(),
                provenance: Provenance::Weak,
                split: Split::Val,
                confounder: None,
            }],
        };
        let text = m.to_toml().unwrap();
        assert_eq!(Manifest::parse(&text, Path::new("x")).unwrap(), m);
        let typo = text.replace("split", "splt");
        assert!(Manifest::parse(&typo, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn stratified_totals(n in 10usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let spec = DatasetSpec { n_cases: n, positive_fraction: frac, seed, ..Default::default() };
            let a = spec.assignments().unwrap();
            prop_assert_eq!(a.len(), n);
            let pos = a.iter().filter(|x| x.1).count();
            prop_assert_eq!(pos, spec.positives().unwrap());
            let sizes = split_counts(n).unwrap();
            for (s, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
                let in_split = a.iter().filter(|x| x.0 == split).count();
                prop_assert_eq!(in_split, sizes[s]);
                let p = a.iter().filter(|x| x.0 == split && x.1).count() as f64;
                prop_assert!((p - pos as f64 * sizes[s] as f64 / n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}
