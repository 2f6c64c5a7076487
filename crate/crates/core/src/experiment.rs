//! The desk-scale phantom experiment: weak and strong cohorts, the ablation
//! runs and false-positive-region entropy.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::dataset::{generate_dataset, DatasetSpec, GeneratedCase};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::training::{derive_seed, run_config, Ablation, AblationConfig, CaseRecord, ConfigRun, Split, TrainConfig};
use crate::volume::{BinaryMask, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Pretraining cohort; its test split is unused.
    pub weak: DatasetSpec,
    pub strong: DatasetSpec,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// 64³ phantoms, 32³ patches, base 8, 40/6/10 strong cases.
    pub fn desk(seed: u64) -> Self {
        let phantom = PhantomSpec::default();
        let model = ModelConfig {
            levels: 4,
            base_channels: 8,
            num_scales: 3,
            patch_size: [32; 3],
            ..ModelConfig::default()
        };
        let pretrain = TrainConfig {
            stage: Stage::Pretrain,
            epochs: 12,
            lr: Some(2e-3),
            val_every: 4,
            ..TrainConfig::default()
        };
        let finetune = TrainConfig {
            stage: Stage::Finetune,
            epochs: 12,
            lr: Some(1e-3),
            val_every: 4,
            ..TrainConfig::default()
        };
        let mut cfg = ExperimentConfig {
            seed,
            weak: DatasetSpec {
                n_cases: 46,
                positive_fraction: 0.75,
                splits: Some([40, 6, 0]),
                phantom: phantom.clone(),
                ..DatasetSpec::default()
            },
            strong: DatasetSpec {
                n_cases: 56,
                positive_fraction: 0.75,
                splits: Some([40, 6, 10]),
                phantom,
                ..DatasetSpec::default()
            },
            ablation: AblationConfig { model, pretrain, finetune },
        };
        cfg.reseed(seed);
        cfg
    }

    /// Derive every cohort and training seed from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.weak.seed = derive_seed(seed, &[1]);
        self.strong.seed = derive_seed(seed, &[2]);
        self.ablation.pretrain.seed = derive_seed(seed, &[3]);
        self.ablation.finetune.seed = derive_seed(seed, &[4]);
    }
}

pub struct Cohorts {
    pub weak: Vec<CaseRecord>,
    pub strong: Vec<CaseRecord>,
    /// Confounder masks of the strong test cases, in test order.
    pub test_confounders: Vec<BinaryMask>,
}

fn records(cases: &[GeneratedCase], p: Provenance) -> Vec<CaseRecord> {
    cases.iter().map(|c| c.record(p)).collect()
}

pub fn build_cohorts(cfg: &ExperimentConfig) -> Result<Cohorts> {
    let weak = generate_dataset(&cfg.weak)?;
    let strong = generate_dataset(&cfg.strong)?;
    let test_confounders = strong
        .iter()
        .filter(|c| c.split == Split::Test)
        .map(|c| c.phantom.confounder.clone())
        .collect();
    Ok(Cohorts {
        weak: records(&weak, Provenance::Weak),
        strong: records(&strong, Provenance::Strong),
        test_confounders,
    })
}

pub fn run_preset(cfg: &ExperimentConfig, cohorts: &Cohorts, ablation: Ablation) -> Result<ConfigRun> {
    run_config(ablation, &cfg.ablation, &cohorts.weak, &cohorts.strong)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// Union of the runs' unmatched candidate voxels.
    FalsePositives,
    /// No run produced a false positive; confounder voxels inside the gland.
    Confounders,
}

/// Mean voxel entropy of each run over a shared region: the union of every
/// run's false-positive candidate voxels on the test cases, falling back to
/// confounder voxels inside the gland when that union is empty.
pub fn fp_region_entropy(
    runs: &[&ConfigRun],
    cohorts: &Cohorts,
) -> Result<(Vec<f64>, RegionSource, usize)> {
    let test: Vec<&CaseRecord> = cohorts.strong.iter().filter(|c| c.split == Split::Test).collect();
    for r in runs {
        if r.predictions.len() != test.len() || r.evaluation.cases.len() != test.len() {
            return Err(Error::InvalidArgument("run does not cover the test split".into()));
        }
    }
    let mut regions: Vec<Vec<usize>> = (0..test.len())
        .map(|i| {
            let mut v: Vec<usize> = runs.iter().flat_map(|r| r.evaluation.cases[i].fp_voxels.clone()).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let mut source = RegionSource::FalsePositives;
    if regions.iter().all(|v| v.is_empty()) {
        source = RegionSource::Confounders;
        regions = test
            .iter()
            .zip(&cohorts.test_confounders)
            .map(|(c, conf)| {
                c.prostate
                    .as_slice()
                    .iter()
                    .zip(conf.as_slice())
                    .enumerate()
                    .filter(|(_, (&p, &q))| p && q)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
    }
    let n: usize = regions.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Degenerate("empty false-positive region".into()));
    }
    let means = runs
        .iter()
        .map(|r| {
            let mut s = 0.0f64;
            for (pred, reg) in r.predictions.iter().zip(&regions) {
                let e = pred.entropy.as_slice();
                s += reg.iter().map(|&i| e[i] as f64).sum::<f64>();
            }
            s / n as f64
        })
        .collect();
    Ok((means, source, n))
}
