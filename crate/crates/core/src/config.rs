//! The shared TOML configuration with one section per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::InferenceConfig;
use crate::io::VolumeFormat;
use crate::network::ModelConfig;
use crate::training::{Ablation, AblationConfig, TrainConfig};

/// Input locations for training, inference and evaluation. Relative paths
/// resolve against the configuration file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest with biopsy-confirmed labels.
    pub manifest: Option<PathBuf>,
    /// Manifest with reader-drawn labels, used for pretraining.
    pub weak_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>_prob` / `<id>_entropy` volumes to evaluate instead
    /// of running the model.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub presets: Vec<Ablation>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { presets: Ablation::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub runs: Vec<PathBuf>,
}

fn pretrain_default() -> TrainConfig {
    TrainConfig::for_stage(Stage::Pretrain)
}

fn nifti_gz() -> VolumeFormat {
    VolumeFormat::NiftiGz
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Applied to every section when set.
    pub seed: Option<u64>,
    #[serde(default = "nifti_gz")]
    pub format: VolumeFormat,
    pub data: DataConfig,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default = "pretrain_default")]
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
    pub ablate: AblateConfig,
    pub report: ReportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: None,
            format: nifti_gz(),
            data: DataConfig::default(),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            pretrain: pretrain_default(),
            finetune: TrainConfig::for_stage(Stage::Finetune),
            inference: InferenceConfig::default(),
            evaluation: EvalConfig::default(),
            ablate: AblateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file, or the config snapshot inside a `run.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Snapshot {
                config: Config,
            }
            let s: Snapshot = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            let mut c = s.config;
            c.resolve();
            c.validate()?;
            c
        } else {
            Config::parse(&text).map_err(|e| match e {
                Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
                e => e,
            })?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        c.rebase(base);
        Ok(c)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.weak_manifest);
        fix(&mut self.data.checkpoint);
        fix(&mut self.data.predictions);
        for r in &mut self.report.runs {
            if r.is_relative() {
                *r = base.join(&*r);
            }
        }
    }

    /// Propagate the shared sections and seed into the stage configurations.
    pub fn resolve(&mut self) {
        self.pretrain.stage = Stage::Pretrain;
        self.finetune.stage = Stage::Finetune;
        for t in [&mut self.pretrain, &mut self.finetune] {
            t.inference = self.inference.clone();
            t.eval = self.evaluation.clone();
        }
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.pretrain.seed = s;
            self.finetune.seed = s;
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.resolve();
    }

    /// The seed recorded for a run: the override, or the fine-tuning seed.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.finetune.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.inference.validate()?;
        self.evaluation.validate()?;
        self.dataset.phantom.validate()?;
        self.dataset.split_sizes()?;
        self.dataset.positives()?;
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, {
            let mut d = Config::default();
            d.resolve();
            d
        });
        assert_eq!(c.pretrain.stage, Stage::Pretrain);
        assert_eq!(c.pretrain.learning_rate(), 1e-4);
    }

    #[test]
    fn sections_and_typos() {
        let text = r#"
            seed = 7
            format = "raw"
            [model]
            base_channels = 8
            patch_size = [32, 32, 32]
            [finetune]
            epochs = 3
            use_cls = false
            [inference]
            min_size = 5
            [ablate]
            presets = ["baseline", "+cls+ent"]
        "#;
        let c = Config::parse(text).unwrap();
        assert_eq!(c.format, VolumeFormat::Raw);
        assert_eq!(c.finetune.seed, 7);
        assert_eq!(c.dataset.seed, 7);
        assert_eq!(c.finetune.inference.min_size, 5);
        assert_eq!(c.ablate.presets, vec![Ablation::Baseline, Ablation::ClsEnt]);
        assert!(!c.finetune.use_cls);
        let typo = text.replace("use_cls", "use_clss");
        assert!(matches!(Config::parse(&typo), Err(Error::InvalidConfig(_))));
        assert!(Config::parse("[model]\nlevels = 0\n").is_err());
    }
}
