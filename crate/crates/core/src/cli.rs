//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::dataset::{generate_dataset, load_manifest, write_dataset};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_case, Evaluation};
use crate::inference::{extract_lesions, patient_score, predict_case, write_candidates, write_montage, PredictionResult};
use crate::io::{read_volume, write_volume};
use crate::report::{PanelExport, ReportTable};
use crate::training::{evaluate_model, run_ablation, train_stage, write_loss_log, CaseRecord, Split, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const OUT_ENV: &str = "VOXLESION_OUT";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "voxlesion", version, about = "Volumetric lesion detection on phantom and NIfTI data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration (or a previous run.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    /// Pretrain when the fine-tuning section asks for it, then fine-tune.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn keep(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom cohort with strong and weak manifests.
    GeneratePhantoms {
        #[command(flatten)]
        common: Common,
    },
    /// Train one or both stages.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Source checkpoint for fine-tuning.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Predict probability and entropy volumes and lesion candidates.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Lesion- and patient-level metrics for a checkpoint or stored predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the ablation presets end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Merge run directories into a comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GeneratePhantoms { common }
            | Command::Train { common, .. }
            | Command::Infer { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common }
            | Command::Report { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GeneratePhantoms { .. } => "generate-phantoms",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    workers: Option<usize>,
    device: &'a str,
    started_unix: f64,
    finished_unix: f64,
    config: &'a Config,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cmd: &Command) -> Result<()> {
    let started = now();
    let common = cmd.common();
    if common.device != "cpu" {
        return Err(Error::InvalidArgument(format!("unsupported device {:?}; only cpu", common.device)));
    }
    let mut config = match &common.config {
        Some(p) => Config::load(p)?,
        None => {
            let mut c = Config::default();
            c.resolve();
            c
        }
    };
    if let Some(s) = common.seed {
        config.set_seed(s);
    }
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("no output directory: pass --out or set {OUT_ENV}")))?;
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::InvalidArgument("--workers must be positive".into()));
        }
        // Fails only if the global pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    match cmd {
        Command::GeneratePhantoms { .. } => generate(&config, &out)?,
        Command::Train { stage, init, .. } => train(&config, &out, *stage, init.as_deref())?,
        Command::Infer { checkpoint, split, .. } => infer(&config, &out, checkpoint.as_deref(), *split)?,
        Command::Evaluate { checkpoint, predictions, split, .. } => {
            evaluate(&config, &out, checkpoint.as_deref(), predictions.as_deref(), *split)?
        }
        Command::Ablate { .. } => ablate(&config, &out)?,
        Command::Report { runs, .. } => report(&config, &out, runs)?,
    }

    let meta = RunMetadata {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.effective_seed(),
        workers: common.workers,
        device: &common.device,
        started_unix: started,
        finished_unix: now(),
        config: &config,
    };
    let path = out.join(RUN_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn required<'a>(p: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    p.ok_or_else(|| Error::InvalidConfig(format!("no {what} given")))
}

fn generate(config: &Config, out: &Path) -> Result<()> {
    let cases = generate_dataset(&config.dataset)?;
    let w = write_dataset(out, &cases, config.format)?;
    info!("wrote {} cases, manifest {}", cases.len(), w.strong_manifest.display());
    Ok(())
}

fn save_stage(out: &Path, o: &TrainOutcome) -> Result<()> {
    let name = o.checkpoint.meta.stage.to_string();
    o.checkpoint.save(&out.join(format!("{name}.ckpt")))?;
    write_loss_log(&out.join(format!("{name}_loss.csv")), &o.log)
}

fn train(config: &Config, out: &Path, stage: StageArg, init: Option<&Path>) -> Result<()> {
    let run_pretrain = match stage {
        StageArg::Pretrain => true,
        StageArg::Finetune => false,
        StageArg::Both => config.finetune.use_pretrained && init.is_none(),
    };
    let mut source = match init {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    if run_pretrain {
        let weak = load_manifest(required(config.data.weak_manifest.as_deref(), "data.weak_manifest")?)?;
        let o = train_stage(&config.pretrain, &config.model, &weak, None)?;
        save_stage(out, &o)?;
        source = Some(o.checkpoint);
    }
    if stage != StageArg::Pretrain {
        let strong = load_manifest(required(config.data.manifest.as_deref(), "data.manifest")?)?;
        let init = if config.finetune.use_pretrained { source.as_ref() } else { None };
        let o = train_stage(&config.finetune, &config.model, &strong, init)?;
        save_stage(out, &o)?;
    }
    Ok(())
}

fn load_model(config: &Config, checkpoint: Option<&Path>) -> Result<(crate::network::Model, f64)> {
    let path = required(checkpoint.or(config.data.checkpoint.as_deref()), "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    if ck.meta.stage != Stage::Finetune {
        info!("using a {} checkpoint for inference", ck.meta.stage);
    }
    let thr = ck.meta.threshold.unwrap_or(config.inference.default_threshold);
    Ok((ck.to_model()?, thr))
}

fn selected(config: &Config, split: SplitArg) -> Result<Vec<CaseRecord>> {
    let cases = load_manifest(required(config.data.manifest.as_deref(), "data.manifest")?)?;
    let keep: Vec<CaseRecord> = cases.into_iter().filter(|c| split.keep(c.split)).collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("no cases in the selected split".into()));
    }
    Ok(keep)
}

fn infer(config: &Config, out: &Path, checkpoint: Option<&Path>, split: SplitArg) -> Result<()> {
    let (model, thr) = load_model(config, checkpoint)?;
    let cases = selected(config, split)?;
    let ext = config.format.extension();
    let mut w = csv::Writer::from_path(out.join("candidates.csv"))?;
    for c in &cases {
        let p = predict_case(&model, &c.image, &c.prostate, &config.inference, thr)?;
        write_volume(&out.join(format!("{}_prob.{ext}", c.id)), &p.probability)?;
        write_volume(&out.join(format!("{}_entropy.{ext}", c.id)), &p.entropy)?;
        write_montage(&out.join(format!("{}_montage.png", c.id)), &c.image, &p.probability, &p.entropy)?;
        write_candidates(&mut w, &c.id, &p.candidates)?;
        info!("{}: {} candidates, patient score {:.3}", c.id, p.candidates.len(), p.patient_score);
    }
    w.flush().map_err(|e| Error::io(out, e))
}

fn stored_prediction(dir: &Path, case: &CaseRecord, config: &Config, thr: f64) -> Result<PredictionResult> {
    let ext = config.format.extension();
    let probability = read_volume(&dir.join(format!("{}_prob.{ext}", case.id)))?;
    let entropy = read_volume(&dir.join(format!("{}_entropy.{ext}", case.id)))?;
    let candidates = extract_lesions(&probability, &case.prostate, thr, config.inference.min_size)?;
    let patient_score = patient_score(&candidates);
    Ok(PredictionResult { probability, entropy, candidates, patient_score })
}

fn write_evaluation(out: &Path, run: &str, ev: &Evaluation) -> Result<()> {
    PanelExport::from_evaluation(run, ev).write(out)?;
    let path = out.join("evaluation.json");
    std::fs::write(&path, serde_json::to_string_pretty(ev)?).map_err(|e| Error::io(&path, e))
}

fn evaluate(
    config: &Config,
    out: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    split: SplitArg,
) -> Result<()> {
    let cases = selected(config, split)?;
    let predictions = predictions.or(config.data.predictions.as_deref());
    let ev = match predictions {
        Some(dir) => {
            let thr = match checkpoint.or(config.data.checkpoint.as_deref()) {
                Some(p) => Checkpoint::load(p)?.meta.threshold.unwrap_or(config.inference.default_threshold),
                None => config.inference.default_threshold,
            };
            let per = cases
                .iter()
                .map(|c| {
                    let p = stored_prediction(dir, c, config, thr)?;
                    evaluate_case(&c.id, &p, &c.prostate, &c.label, config.inference.min_size, &config.evaluation)
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate(per)
        }
        None => {
            let (model, thr) = load_model(config, checkpoint)?;
            let refs: Vec<&CaseRecord> = cases.iter().collect();
            evaluate_model(&model, thr, &refs, &config.inference, &config.evaluation)?.0
        }
    };
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
    write_evaluation(out, &name, &ev)
}

fn ablate(config: &Config, out: &Path) -> Result<()> {
    let weak = load_manifest(required(config.data.weak_manifest.as_deref(), "data.weak_manifest")?)?;
    let strong = load_manifest(required(config.data.manifest.as_deref(), "data.manifest")?)?;
    let runs = run_ablation(&config.ablate.presets, &config.ablation(), &weak, &strong)?;
    let mut dirs = Vec::new();
    for r in &runs {
        let dir = out.join(r.ablation.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if !r.pretrain_log.is_empty() {
            write_loss_log(&dir.join("pretrain_loss.csv"), &r.pretrain_log)?;
        }
        write_loss_log(&dir.join("finetune_loss.csv"), &r.finetune_log)?;
        r.checkpoint.save(&dir.join("finetune.ckpt"))?;
        write_evaluation(&dir, r.ablation.name(), &r.evaluation)?;
        dirs.push(dir);
    }
    ReportTable::from_dirs(&dirs)?.write(out)?;
    Ok(())
}

fn report(config: &Config, out: &Path, runs: &[PathBuf]) -> Result<()> {
    let dirs = if runs.is_empty() { &config.report.runs } else { runs };
    let table = ReportTable::from_dirs(dirs)?;
    table.write(out)?;
    print!("{}", table.render());
    Ok(())
}
