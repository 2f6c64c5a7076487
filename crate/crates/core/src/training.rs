//! Patch labelling, the two-stage training loop and the ablation grid.

use std::path::Path;

use log::info;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::checkpoint::Stage;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_case, pooled_units, roc_auc, youden_threshold, EvalConfig, Evaluation};
use crate::inference::{predict_case, prepare_image, InferenceConfig, PredictionResult};
use crate::losses::LossWeights;
use crate::network::{LossBreakdown, Model, ModelConfig, Objectives, Sample};
use crate::optim::{scheduled_lr, Adam, Schedule};
use crate::patching::{sample_training_patch, PatchSpec};
use crate::volume::{ensure_same_grid, BinaryMask, LabelVolume, Provenance, Volume3D};

/// Patch-level class used by the classification objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchClass {
    Normal,
    Cancer,
}

impl PatchClass {
    pub fn index(self) -> usize {
        match self {
            PatchClass::Normal => 0,
            PatchClass::Cancer => 1,
        }
    }
}

/// Default lesion-voxel count at which a patch counts as cancer.
pub const MIN_LESION_VOXELS: usize = 32;

/// A patch is `Cancer` iff it holds at least `min_lesion_voxels` lesion voxels.
pub fn derive_patch_label(label: &Array3<u8>, min_lesion_voxels: usize) -> PatchClass {
    let n = label.iter().filter(|&&v| v != 0).count();
    if n >= min_lesion_voxels.max(1) {
        PatchClass::Cancer
    } else {
        PatchClass::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub image: Volume3D,
    pub prostate: BinaryMask,
    pub label: LabelVolume,
    pub split: Split,
}

impl CaseRecord {
    pub fn new(
        id: impl Into<String>,
        image: Volume3D,
        prostate: BinaryMask,
        label: LabelVolume,
        split: Split,
    ) -> Result<Self> {
        ensure_same_grid(&image, &prostate)?;
        ensure_same_grid(&image, &label)?;
        let id = id.into();
        if !prostate.any() {
            return Err(Error::EmptyMask("prostate"));
        }
        if !label.within(&prostate) {
            return Err(Error::InvalidArgument(format!(
                "case {id}: lesion voxels outside the prostate mask"
            )));
        }
        Ok(CaseRecord { id, image, prostate, label, split })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub patches_per_case: usize,
    pub batch_size: usize,
    /// Stage default (1e-4 pretrain, 1e-5 finetune) when unset.
    pub lr: Option<f64>,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub weights: LossWeights,
    pub use_cls: bool,
    pub use_ent: bool,
    pub use_pretrained: bool,
    pub positive_bias: f64,
    pub min_lesion_voxels: usize,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// Accept labels whose provenance does not match the stage.
    pub allow_provenance_mismatch: bool,
    /// Taken from the top-level configuration.
    #[serde(skip)]
    pub inference: InferenceConfig,
    #[serde(skip)]
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: 50,
            patches_per_case: 1,
            batch_size: 2,
            lr: None,
            lr_min: 0.0,
            schedule: Schedule::Cosine,
            seed: 0,
            weights: LossWeights::default(),
            use_cls: true,
            use_ent: true,
            use_pretrained: true,
            positive_bias: 0.5,
            min_lesion_voxels: MIN_LESION_VOXELS,
            val_every: 1,
            allow_provenance_mismatch: false,
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        TrainConfig { stage, ..TrainConfig::default() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.stage {
            Stage::Pretrain => 1e-4,
            Stage::Finetune => 1e-5,
        })
    }

    pub fn expected_provenance(&self) -> Provenance {
        match self.stage {
            Stage::Pretrain => Provenance::Weak,
            Stage::Finetune => Provenance::Strong,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.patches_per_case == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("patches_per_case, batch_size and val_every must be positive");
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..=lr).contains(&self.lr_min) {
            return bad("learning rate must be positive and lr_min in [0, lr]");
        }
        if !(0.0..=1.0).contains(&self.positive_bias) {
            return bad("positive_bias must be in [0, 1]");
        }
        self.weights.validate()?;
        self.inference.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_cls: f64,
    pub l_ent: f64,
    pub l_total: f64,
    pub val_auc: Option<f64>,
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation checkpoint, with the validation-derived threshold.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Derive a sub-seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    mix(master, parts)
}

fn check_provenance(config: &TrainConfig, cases: &[&CaseRecord]) -> Result<()> {
    if config.allow_provenance_mismatch {
        return Ok(());
    }
    let want = config.expected_provenance();
    if let Some(c) = cases.iter().find(|c| c.label.provenance() != want) {
        return Err(Error::Provenance(format!(
            "{} stage expects {want} labels but case {} is {}",
            config.stage,
            c.id,
            c.label.provenance()
        )));
    }
    Ok(())
}

struct Prepared<'a> {
    case: &'a CaseRecord,
    image: Volume3D,
}

fn prepare<'a>(cases: &[&'a CaseRecord]) -> Result<Vec<Prepared<'a>>> {
    cases
        .par_iter()
        .map(|c| Ok(Prepared { case: c, image: prepare_image(&c.image, &c.prostate)? }))
        .collect()
}

/// Predict every case and pool the lesion and patient panels.
pub fn evaluate_model(
    model: &Model,
    threshold: f64,
    cases: &[&CaseRecord],
    inf: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<(Evaluation, Vec<PredictionResult>)> {
    let mut per = Vec::with_capacity(cases.len());
    let mut preds = Vec::with_capacity(cases.len());
    for c in cases {
        let p = predict_case(model, &c.image, &c.prostate, inf, threshold)?;
        per.push(evaluate_case(&c.id, &p, &c.prostate, &c.label, inf.min_size, eval)?);
        preds.push(p);
    }
    Ok((aggregate(per), preds))
}

/// Pooled lesion-level unit scores over `cases` (threshold-independent).
fn validation_units(model: &Model, cases: &[&CaseRecord], cfg: &TrainConfig) -> Result<(Vec<f64>, Vec<bool>)> {
    let (ev, _) = evaluate_model(model, cfg.inference.default_threshold, cases, &cfg.inference, &cfg.eval)?;
    Ok(pooled_units(&ev.cases))
}

/// Train one stage. Patches are sampled with seeds derived from
/// `(seed, epoch, case, k)` and per-sample gradients are summed in a fixed
/// order, so results do not depend on the worker count.
pub fn train_stage(
    config: &TrainConfig,
    model_config: &ModelConfig,
    cases: &[CaseRecord],
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let train: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let val: Vec<&CaseRecord> = cases.iter().filter(|c| c.split == Split::Val).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let all: Vec<&CaseRecord> = train.iter().chain(&val).copied().collect();
    check_provenance(config, &all)?;

    let mut model = match init {
        Some(ck) => {
            if config.stage == Stage::Finetune && !config.use_pretrained {
                return Err(Error::InvalidConfig(
                    "a source checkpoint was given but use_pretrained is false".into(),
                ));
            }
            if &ck.meta.model != model_config {
                return Err(Error::InvalidConfig(
                    "source checkpoint model configuration differs".into(),
                ));
            }
            ck.to_model()?
        }
        None => {
            if config.stage == Stage::Finetune && config.use_pretrained {
                return Err(Error::InvalidConfig(
                    "use_pretrained requires a source checkpoint".into(),
                ));
            }
            Model::new(model_config.clone(), config.seed)?
        }
    };

    let prepared = prepare(&train)?;
    let spec = PatchSpec { size: model_config.patch_size, stride: model_config.patch_size };
    let objectives = Objectives { use_cls: config.use_cls, use_ent: config.use_ent };
    let samples_per_epoch = train.len() * config.patches_per_case;
    let batches_per_epoch = samples_per_epoch.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let base_lr = config.learning_rate();
    let mut adam = Adam::new(model.num_parameters());
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64])));
        let jobs: Vec<(usize, usize)> = order
            .iter()
            .flat_map(|&ci| (0..config.patches_per_case).map(move |k| (ci, k)))
            .collect();
        let mut sums = [0.0f64; 4];
        for batch in jobs.chunks(config.batch_size) {
            let results: Vec<(LossBreakdown, Vec<f32>)> = batch
                .par_iter()
                .map(|&(ci, k)| {
                    let p = &prepared[ci];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &[epoch as u64, ci as u64, k as u64, 1],
                    ));
                    let patch = sample_training_patch(
                        &p.image,
                        &p.case.prostate,
                        &p.case.label,
                        &spec,
                        &mut rng,
                        config.positive_bias,
                        config.min_lesion_voxels,
                    )?;
                    let image = patch.image.as_standard_layout().into_owned();
                    let label = patch.label.as_standard_layout().into_owned();
                    let valid = patch.valid.as_standard_layout().into_owned();
                    let sample = Sample {
                        image: image.as_slice().expect("standard layout"),
                        label: label.as_slice().expect("standard layout"),
                        valid: valid.as_slice().expect("standard layout"),
                        patch_class: patch.patch_class.index(),
                    };
                    model.loss_and_grad(sample, &config.weights, objectives)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0f32; model.num_parameters()];
            for (l, g) in &results {
                sums[0] += l.seg;
                sums[1] += l.cls;
                sums[2] += l.ent;
                sums[3] += l.total;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let inv = 1.0 / results.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {}", epoch + 1)));
            }
            let lr = scheduled_lr(base_lr, config.lr_min, config.schedule, step, total_steps);
            adam.step(model.params_mut().values_mut(), &grad, lr);
            step += 1;
        }
        let n = jobs.len() as f64;
        let mut entry = EpochLog {
            epoch: epoch + 1,
            l_seg: sums[0] / n,
            l_cls: sums[1] / n,
            l_ent: sums[2] / n,
            l_total: sums[3] / n,
            val_auc: None,
        };
        if [entry.l_seg, entry.l_cls, entry.l_ent, entry.l_total].iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss at epoch {}", epoch + 1)));
        }
        let last = epoch + 1 == config.epochs;
        if !val.is_empty() && ((epoch + 1) % config.val_every == 0 || last) {
            let (s, l) = validation_units(&model, &val, config)?;
            let auc = roc_auc(&s, &l).unwrap_or(f64::NAN);
            entry.val_auc = Some(auc);
            if !auc.is_nan() && best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch + 1, model.params().values().to_vec()));
            }
        }
        info!(
            "{} epoch {}/{}: seg {:.4} cls {:.4} ent {:.4} total {:.4} val_auc {}",
            config.stage,
            entry.epoch,
            config.epochs,
            entry.l_seg,
            entry.l_cls,
            entry.l_ent,
            entry.l_total,
            entry.val_auc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        log.push(entry);
    }

    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params_mut().load(params)?;
            e
        }
        None => config.epochs,
    };
    let threshold = if val.is_empty() {
        None
    } else {
        let (s, l) = validation_units(&model, &val, config)?;
        youden_threshold(&s, &l).ok()
    };
    let mut checkpoint = Checkpoint::from_model(&model, config.stage, config.seed, best_epoch, Some(&adam));
    checkpoint.meta.threshold = threshold;
    Ok(TrainOutcome { checkpoint, log, best_epoch })
}

/// Ablation presets, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+cls")]
    Cls,
    #[serde(rename = "+ent")]
    Ent,
    #[serde(rename = "+cls+ent")]
    ClsEnt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Cls, Ablation::Ent, Ablation::ClsEnt];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Cls => "+cls",
            Ablation::Ent => "+ent",
            Ablation::ClsEnt => "+cls+ent",
        }
    }

    /// `(use_cls, use_ent, use_pretrained)`; every non-baseline preset is pretrained.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Cls => (true, false, true),
            Ablation::Ent => (false, true, true),
            Ablation::ClsEnt => (true, true, true),
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (use_cls, use_ent, use_pretrained) = self.flags();
        TrainConfig { use_cls, use_ent, use_pretrained, ..cfg.clone() }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation preset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

/// Everything one configuration produced.
#[derive(Debug, Clone)]
pub struct ConfigRun {
    pub ablation: Ablation,
    pub pretrain_log: Vec<EpochLog>,
    pub finetune_log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
    pub threshold: f64,
    pub evaluation: Evaluation,
    pub predictions: Vec<PredictionResult>,
}

/// Pretrain (when the preset asks for it) on `weak`, fine-tune on `strong`,
/// then evaluate on the strong test split.
pub fn run_config(
    ablation: Ablation,
    cfg: &AblationConfig,
    weak: &[CaseRecord],
    strong: &[CaseRecord],
) -> Result<ConfigRun> {
    let ft_cfg = ablation.apply(&cfg.finetune);
    let (pretrain_log, init) = if ft_cfg.use_pretrained {
        let mut pt_cfg = ablation.apply(&cfg.pretrain);
        pt_cfg.stage = Stage::Pretrain;
        let out = train_stage(&pt_cfg, &cfg.model, weak, None)?;
        (out.log, Some(out.checkpoint))
    } else {
        (Vec::new(), None)
    };
    let mut ft_cfg = ft_cfg;
    ft_cfg.stage = Stage::Finetune;
    let out = train_stage(&ft_cfg, &cfg.model, strong, init.as_ref())?;
    let model = out.checkpoint.to_model()?;
    let threshold = out.checkpoint.meta.threshold.unwrap_or(ft_cfg.inference.default_threshold);
    let test: Vec<&CaseRecord> = strong.iter().filter(|c| c.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let (evaluation, predictions) = evaluate_model(&model, threshold, &test, &ft_cfg.inference, &ft_cfg.eval)?;
    info!(
        "{}: lesion AUC {:.4} SE {:.3} SP {:.3} (threshold {threshold:.3})",
        ablation.name(),
        evaluation.lesion.roc_auc,
        evaluation.lesion.se,
        evaluation.lesion.sp
    );
    Ok(ConfigRun {
        ablation,
        pretrain_log,
        finetune_log: out.log,
        checkpoint: out.checkpoint,
        threshold,
        evaluation,
        predictions,
    })
}

/// One row per distinct preset, in table order.
pub fn run_ablation(
    grid: &[Ablation],
    cfg: &AblationConfig,
    weak: &[CaseRecord],
    strong: &[CaseRecord],
) -> Result<Vec<ConfigRun>> {
    let mut presets = grid.to_vec();
    presets.sort();
    presets.dedup();
    presets.into_iter().map(|a| run_config(a, cfg, weak, strong)).collect()
}
