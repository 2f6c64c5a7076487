use voxlesion::checkpoint::{Checkpoint, Stage};
use voxlesion::dataset::{generate_dataset, DatasetSpec};
use voxlesion::network::{Model, ModelConfig, Objectives, Sample};
use voxlesion::training::{train_stage, CaseRecord, Split, TrainConfig};
use voxlesion::volume::Provenance;
use voxlesion::Error;

fn desk_model() -> ModelConfig {
    ModelConfig { base_channels: 8, patch_size: [32; 3], ..Default::default() }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { base_channels: 2, levels: 3, num_scales: 2, patch_size: [16; 3], pool_kernel: 16, ..Default::default() }
}

fn cohort(n_train: usize, n_val: usize, seed: u64, p: Provenance) -> Vec<CaseRecord> {
    let n = (n_train + n_val).max(10);
    let spec = DatasetSpec {
        n_cases: n,
        positive_fraction: 0.75,
        splits: Some([n_train, n_val, n - n_train - n_val]),
        seed,
        ..Default::default()
    };
    generate_dataset(&spec).unwrap().iter().map(|c| c.record(p)).filter(|c| c.split != Split::Test).collect()
}

#[test]
fn five_epochs_reduce_the_loss() {
    let cases = cohort(8, 0, 1, Provenance::Strong);
    let cfg = TrainConfig { epochs: 5, lr: Some(1e-3), use_pretrained: false, seed: 3, ..TrainConfig::default() };
    let out = train_stage(&cfg, &desk_model(), &cases, None).unwrap();
    assert_eq!(out.log.len(), 5);
    let first = out.log[0].l_total;
    let last = out.log[4].l_total;
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.log.iter().all(|e| e.val_auc.is_none()));
    assert_eq!(out.checkpoint.meta.threshold, None);
}

#[test]
fn identical_seeds_identical_runs_across_worker_counts() {
    let cases = cohort(4, 2, 2, Provenance::Strong);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        lr: Some(1e-3),
        use_pretrained: false,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_stage(&cfg, &tiny_model(), &cases, None).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let other = train_stage(&TrainConfig { seed: 12, ..cfg.clone() }, &tiny_model(), &cases, None).unwrap();
    assert_ne!(a.log, other.log);
    assert!(a.log.last().unwrap().val_auc.is_some());
}

#[test]
fn provenance_is_checked() {
    let weak = cohort(4, 0, 3, Provenance::Weak);
    let ft = TrainConfig { epochs: 1, use_pretrained: false, ..TrainConfig::default() };
    let err = train_stage(&ft, &tiny_model(), &weak, None).unwrap_err();
    assert!(matches!(err, Error::Provenance(_)), "{err}");
    assert!(err.is_validation());
    let over = TrainConfig { allow_provenance_mismatch: true, ..ft };
    train_stage(&over, &tiny_model(), &weak, None).unwrap();
    let pt = TrainConfig { epochs: 1, ..TrainConfig::for_stage(Stage::Pretrain) };
    train_stage(&pt, &tiny_model(), &weak, None).unwrap();
}

#[test]
fn pretrained_finetune_contract() {
    let weak = cohort(4, 0, 4, Provenance::Weak);
    let strong = cohort(4, 0, 5, Provenance::Strong);
    let pt = TrainConfig { epochs: 1, ..TrainConfig::for_stage(Stage::Pretrain) };
    let src = train_stage(&pt, &tiny_model(), &weak, None).unwrap().checkpoint;
    assert_eq!(src.meta.stage, Stage::Pretrain);
    let ft = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(matches!(train_stage(&ft, &tiny_model(), &strong, None), Err(Error::InvalidConfig(_))));
    let out = train_stage(&ft, &tiny_model(), &strong, Some(&src)).unwrap();
    assert_eq!(out.checkpoint.meta.stage, Stage::Finetune);
    let other_arch = ModelConfig { base_channels: 4, ..tiny_model() };
    assert!(train_stage(&ft, &other_arch, &strong, Some(&src)).is_err());
    let no_pre = TrainConfig { use_pretrained: false, ..ft };
    assert!(train_stage(&no_pre, &tiny_model(), &strong, Some(&src)).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cases = cohort(4, 0, 6, Provenance::Strong);
    let cfg = TrainConfig { epochs: 1, use_pretrained: false, ..TrainConfig::default() };
    let ck = train_stage(&cfg, &tiny_model(), &cases, None).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(ck.optimizer().is_some());
}

#[test]
fn every_parameter_tensor_receives_gradient() {
    let cfg = ModelConfig { base_channels: 4, patch_size: [32; 3], ..Default::default() };
    let model = Model::new(cfg.clone(), 5).unwrap();
    let n = 32 * 32 * 32;
    let image: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
    let label: Vec<u8> = (0..n).map(|i| u8::from((i / 32 / 32) % 32 > 12 && (i % 32) > 10)).collect();
    let valid = vec![true; n];
    let sample = Sample { image: &image, label: &label, valid: &valid, patch_class: 1 };
    let objectives = Objectives { use_cls: true, use_ent: true };
    let (_, grad) = model.loss_and_grad(sample, &Default::default(), objectives).unwrap();
    let mut off = 0;
    for info in model.params().infos() {
        let len: usize = info.shape.iter().product();
        let g = &grad[off..off + len];
        assert!(g.iter().any(|v| *v != 0.0), "no gradient reaches {}", info.name);
        off += len;
    }
    assert_eq!(off, grad.len());
}
