//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL line
//! per criterion. The process fails when a correctness criterion fails;
//! experiment outcomes (7 and 8) are reported without failing it.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxlesion::evaluation::{
    aggregate, evaluate_case, roc_auc, CaseEvaluation, Confusion, EvalConfig, Evaluation,
};
use voxlesion::experiment::{build_cohorts, fp_region_entropy, run_preset, Cohorts, ExperimentConfig};
use voxlesion::inference::{extract_lesions, patient_score, predict_volume, PredictionResult};
use voxlesion::losses::{
    classification_loss, classification_loss_grad, dice_loss, dice_loss_grad, entropy_loss,
    entropy_loss_grad, focal_loss, focal_loss_grad, total_loss, LossWeights,
};
use voxlesion::network::{rescale_to_full, Feat, Model, ModelConfig, LESION};
use voxlesion::patching::{stitch_predictions, tile_volume, Blend, PatchSpec};
use voxlesion::training::{Ablation, ConfigRun};
use voxlesion::volume::{BinaryMask, Geometry, Grid, LabelVolume, Provenance, Volume3D};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

// ---------------------------------------------------------------- criterion 1

fn entropy_values() -> Verdict {
    let t = Instant::now();
    let n = 64;
    let uniform = vec![0.5; 2 * n];
    let mut onehot = vec![0.0; 2 * n];
    for i in 0..n {
        onehot[(i % 2) * n + i] = 1.0;
    }
    let mut skew = vec![0.9; n];
    skew.extend(vec![0.1; n]);
    let a = entropy_loss(&uniform, 2, None).unwrap();
    let b = entropy_loss(&onehot, 2, None).unwrap();
    let c = entropy_loss(&skew, 2, None).unwrap();
    let direct = -(0.9f64 * 0.9f64.ln() + 0.1f64 * 0.1f64.ln());
    let secs = seconds(t);
    let pass = (a - std::f64::consts::LN_2).abs() <= 1e-9
        && b.abs() <= 1e-9
        && (c - 0.325083).abs() <= 1e-6
        && (c - direct).abs() <= 1e-12
        && secs < 1.0;
    verdict(pass, format!("uniform {a:.12}, one-hot {b:.3e}, (0.9, 0.1) {c:.9}, {secs:.3}s"))
}

// ---------------------------------------------------------------- criterion 2

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst elementwise relative error between `grad` and central differences of `f`.
fn fd_error(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + FD_STEP;
        let up = f(&y);
        y[i] = x[i] - FD_STEP;
        let down = f(&y);
        y[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let lesion: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut p: Vec<f64> = lesion.iter().map(|v| 1.0 - v).collect();
    p.extend(lesion);
    p
}

fn gradient_checks() -> Verdict {
    let t = Instant::now();
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for inst in 0..20 {
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let valid: Option<Vec<bool>> =
            (inst % 2 == 1).then(|| (0..n).map(|_| rng.random_bool(0.8)).collect());
        let v = valid.as_deref();

        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let (_, g) = dice_loss_grad(&p, &y, v, 1e-5).unwrap();
        worst[0] = worst[0].max(fd_error(&p, &g, |q| dice_loss(q, &y, v, 1e-5).unwrap()));

        let probs = random_probs(&mut rng, n);
        let (_, g) = focal_loss_grad(&probs, 2, &y, 2.0, v).unwrap();
        worst[1] = worst[1].max(fd_error(&probs, &g, |q| focal_loss(q, 2, &y, 2.0, v).unwrap()));

        let (_, g) = entropy_loss_grad(&probs, 2, v).unwrap();
        worst[2] = worst[2].max(fd_error(&probs, &g, |q| entropy_loss(q, 2, v).unwrap()));

        let k = 2 + inst % 2;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let cp: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let class = inst % k;
        let (_, g) = classification_loss_grad(&cp, class).unwrap();
        worst[3] = worst[3].max(fd_error(&cp, &g, |q| classification_loss(q, class).unwrap()));
    }
    let secs = seconds(t);
    let pass = worst.iter().all(|&w| w <= 1e-3) && secs < 60.0;
    verdict(
        pass,
        format!(
            "max rel err dice {:.2e}, focal {:.2e}, entropy {:.2e}, classification {:.2e}, {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn objective_composition() -> Verdict {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (s, c, e) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let got = total_loss(s, c, e, &w).unwrap();
        worst = worst.max((got - (s + 1.0 * c + 0.2 * e)).abs());
    }
    let pass = w.lambda_cls == 1.0 && w.lambda_ent == 0.2 && worst <= 1e-12;
    verdict(pass, format!("lambda_cls {}, lambda_ent {}, max abs err {worst:.2e}", w.lambda_cls, w.lambda_ent))
}

// ---------------------------------------------------------------- criterion 4

fn max_sum_err(f: &Feat) -> f64 {
    let n = f.voxels();
    (0..n)
        .map(|i| ((0..f.channels).map(|c| f64::from(f.data[c * n + i])).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn shape_suite(cfg: ModelConfig, expect_pooled: [usize; 3]) -> Result<String, String> {
    let model = Model::new(cfg.clone(), 4).map_err(|e| e.to_string())?;
    let n: usize = cfg.patch_size.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let pyr = model.forward(&image).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for s in 0..cfg.num_scales {
        let want = cfg.patch_size.map(|d| d >> s);
        if pyr.raw[s].dims != want || pyr.raw[s].channels != cfg.num_classes {
            return Err(format!("scale {s} has {:?}, want {want:?}", pyr.raw[s].dims));
        }
        if pyr.rescaled[s].dims != cfg.patch_size {
            return Err(format!("rescaled scale {s} has {:?}", pyr.rescaled[s].dims));
        }
        err = err.max(max_sum_err(&pyr.raw[s])).max(max_sum_err(&pyr.rescaled[s]));
    }
    if err > 1e-5 {
        return Err(format!("class distribution off by {err:.2e}"));
    }
    let (pooled, dims) = model.pool_features(pyr.rescaled[0].channel(LESION)).map_err(|e| e.to_string())?;
    if dims != expect_pooled || pooled.len() != expect_pooled.iter().product::<usize>() {
        return Err(format!("pooled grid {dims:?}, want {expect_pooled:?}"));
    }
    let cls_err = (pyr.class_probs.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs();
    if pyr.class_probs.len() != cfg.num_classes || cls_err > 1e-6 {
        return Err(format!("class_probs {:?}", pyr.class_probs));
    }
    let shapes: Vec<String> = pyr.raw.iter().map(|r| format!("{}", r.dims[0])).collect();
    Ok(format!("{} pooled {:?} sum err {err:.1e}", shapes.join("/"), dims))
}

/// Trilinear (half-voxel, edge-clamped) 2³ → 4³ of a one-hot grid.
fn trilinear_oracle() -> Result<(), String> {
    let mut lesion = [0.0f32; 8];
    lesion[5] = 1.0;
    let mut data: Vec<f32> = lesion.iter().map(|v| 1.0 - v).collect();
    data.extend(lesion);
    let up = rescale_to_full(&Feat::from_vec(2, [2; 3], data), [4; 3]).map_err(|e| e.to_string())?;
    let w1 = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                let mut v = 0.0;
                for (c, &l) in lesion.iter().enumerate() {
                    let (a, b, d) = (c / 4, (c / 2) % 2, c % 2);
                    let f = |o: usize, bit: usize| if bit == 1 { w1(o) } else { 1.0 - w1(o) };
                    v += f64::from(l) * f(i, a) * f(j, b) * f(k, d);
                }
                let got = f64::from(up.channel(LESION)[(i * 4 + j) * 4 + k]);
                worst = worst.max((got - v).abs());
            }
        }
    }
    if worst > 1e-6 {
        return Err(format!("trilinear oracle off by {worst:.2e}"));
    }
    Ok(())
}

fn architecture_contract() -> Verdict {
    let full = ModelConfig {
        levels: 4,
        base_channels: 2,
        num_scales: 3,
        patch_size: [128; 3],
        pool_kernel: 32,
        ..ModelConfig::default()
    };
    let desk = ExperimentConfig::desk(0).ablation.model;
    let results = [
        shape_suite(full, [4; 3]),
        shape_suite(desk, [1; 3]),
        trilinear_oracle().map(|_| "one-hot 2³→4³ exact".to_string()),
    ];
    let pass = results.iter().all(Result::is_ok);
    let detail: Vec<String> = results.iter().map(|r| r.clone().unwrap_or_else(|e| e)).collect();
    verdict(pass, format!("128³: {}; 32³: {}; {}", detail[0], detail[1], detail[2]))
}

// ---------------------------------------------------------------- criterion 5

const OFFSETS: usize = 26;

fn flat(c: [usize; 3], s: [usize; 3]) -> usize {
    (c[0] * s[1] + c[1]) * s[2] + c[2]
}

fn coords(i: usize, s: [usize; 3]) -> [usize; 3] {
    [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]]
}

/// 26-connected components by breadth-first search, in raster order of their
/// first voxel.
fn bfs_components(on: &[bool], s: [usize; 3]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; on.len()];
    let mut out = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            let c = coords(v, s);
            let mut nb = Vec::with_capacity(OFFSETS);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        let n = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                        if (0..3).all(|a| n[a] >= 0 && n[a] < s[a] as i64) {
                            nb.push(flat([n[0] as usize, n[1] as usize, n[2] as usize], s));
                        }
                    }
                }
            }
            for u in nb {
                if on[u] && !seen[u] {
                    seen[u] = true;
                    comp.push(u);
                    q.push_back(u);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Pairwise rank statistic: P(pos > neg) + ½ P(pos = neg).
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

struct Oracle {
    tp: usize,
    fn_: usize,
    fp_candidates: usize,
    pairs: Vec<(usize, usize)>,
    region_fp: usize,
    tn: usize,
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

/// Sextant per prostate voxel from the tight bounding box.
fn oracle_sextants(m: &[bool], s: [usize; 3]) -> Vec<Option<usize>> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for (i, _) in m.iter().enumerate().filter(|(_, &v)| v) {
        let c = coords(i, s);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a] + 1);
        }
    }
    m.iter()
        .enumerate()
        .map(|(i, &v)| {
            v.then(|| {
                let c = coords(i, s);
                let side = usize::from(2 * (c[0] - lo[0]) >= hi[0] - lo[0]);
                side * 3 + 3 * (c[2] - lo[2]) / (hi[2] - lo[2])
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn oracle_case(
    p: &[f32],
    m: &[bool],
    t: &[u8],
    s: [usize; 3],
    cands: &[(Vec<usize>, f64)],
    min_size: usize,
    min_overlap: f64,
) -> Oracle {
    let truth = bfs_components(&t.iter().map(|&v| v != 0).collect::<Vec<_>>(), s);
    let mut comp_of = vec![usize::MAX; p.len()];
    for (ti, c) in truth.iter().enumerate() {
        for &v in c {
            comp_of[v] = ti;
        }
    }
    // Matching by exhaustive overlap counts.
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].1.partial_cmp(&cands[a].1).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; truth.len()];
    let mut pairs = Vec::new();
    let mut fp_candidates = 0;
    for ci in order {
        let mut ov = vec![0usize; truth.len()];
        for &v in &cands[ci].0 {
            if comp_of[v] != usize::MAX {
                ov[comp_of[v]] += 1;
            }
        }
        let mut best: Option<usize> = None;
        for ti in 0..truth.len() {
            let smaller = cands[ci].0.len().min(truth[ti].len()) as f64;
            if !taken[ti] && ov[ti] > 0 && ov[ti] as f64 >= min_overlap * smaller && best.is_none_or(|b| ov[ti] > ov[b]) {
                best = Some(ti);
            }
        }
        match best {
            Some(ti) => {
                taken[ti] = true;
                pairs.push((ci, ti));
            }
            None => fp_candidates += 1,
        }
    }
    let sx = oracle_sextants(m, s);
    let mut present = [false; 6];
    let mut has_truth = [false; 6];
    for i in 0..p.len() {
        if let Some(k) = sx[i] {
            present[k] = true;
            has_truth[k] |= t[i] != 0;
        }
    }
    let negative: Vec<usize> = (0..6).filter(|&k| present[k] && !has_truth[k]).collect();
    let flagged = |k: usize, comps: &[Vec<usize>]| {
        comps.iter().any(|c| c.iter().any(|&v| sx[v] == Some(k)))
    };
    let cand_sets: Vec<Vec<usize>> = cands.iter().map(|c| c.0.clone()).collect();
    let region_fp = negative.iter().filter(|&&k| flagged(k, &cand_sets)).count();

    // Unit scores: the first (highest) level at which each unit is hit.
    let mut levels: Vec<f32> = p.iter().zip(m).filter(|(&v, &i)| i && v > 0.0).map(|(&v, _)| v).collect();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let mut positives: Vec<Option<f64>> = vec![None; truth.len()];
    let mut negatives: Vec<Option<f64>> = vec![None; negative.len()];
    for &lv in &levels {
        let on: Vec<bool> = p.iter().zip(m).map(|(&v, &i)| i && v >= lv).collect();
        let comps: Vec<Vec<usize>> = bfs_components(&on, s).into_iter().filter(|c| c.len() >= min_size).collect();
        for (ti, tc) in truth.iter().enumerate() {
            if positives[ti].is_none() && comps.iter().any(|c| c.iter().any(|v| tc.binary_search(v).is_ok())) {
                positives[ti] = Some(f64::from(lv));
            }
        }
        for (ni, &k) in negative.iter().enumerate() {
            if negatives[ni].is_none() && flagged(k, &comps) {
                negatives[ni] = Some(f64::from(lv));
            }
        }
    }
    let positives = positives.into_iter().map(|v| v.unwrap_or(0.0)).collect();
    let negatives = negatives.into_iter().map(|v| v.unwrap_or(0.0)).collect();
    Oracle {
        tp: pairs.len(),
        fn_: truth.len() - pairs.len(),
        fp_candidates,
        pairs,
        region_fp,
        tn: negative.len() - region_fp,
        positives,
        negatives,
    }
}

fn random_box(rng: &mut ChaCha8Rng, s: [usize; 3], max: usize) -> ([usize; 3], [usize; 3]) {
    let e: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=max));
    let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=s[a] - e[a]));
    (lo, std::array::from_fn(|a| lo[a] + e[a]))
}

fn in_box(c: [usize; 3], b: &([usize; 3], [usize; 3])) -> bool {
    (0..3).all(|a| c[a] >= b.0[a] && c[a] < b.1[a])
}

struct RandomCase {
    prob: Volume3D,
    prostate: BinaryMask,
    truth: LabelVolume,
    threshold: f64,
    min_size: usize,
    min_overlap: f64,
}

fn random_case(rng: &mut ChaCha8Rng) -> RandomCase {
    loop {
        let s: [usize; 3] = std::array::from_fn(|_| rng.random_range(8..=16));
        let n = s.iter().product::<usize>();
        let full = rng.random_bool(0.3);
        let m: Vec<bool> = (0..n)
            .map(|i| {
                let c = coords(i, s);
                full || (0..3)
                    .map(|a| {
                        let h = s[a] as f64 / 2.0;
                        ((c[a] as f64 + 0.5 - h) / (0.45 * s[a] as f64)).powi(2)
                    })
                    .sum::<f64>()
                    <= 1.0
            })
            .collect();
        let lesions: Vec<_> = (0..rng.random_range(0..=4)).map(|_| random_box(rng, s, 4)).collect();
        let t: Vec<u8> = (0..n).map(|i| u8::from(m[i] && lesions.iter().any(|b| in_box(coords(i, s), b)))).collect();
        if bfs_components(&t.iter().map(|&v| v != 0).collect::<Vec<_>>(), s).len() > 5 {
            continue;
        }
        let blobs: Vec<_> = (0..rng.random_range(0..=5)).map(|_| random_box(rng, s, 5)).collect();
        let p: Vec<f32> = (0..n)
            .map(|i| {
                let c = coords(i, s);
                let hot = blobs.iter().any(|b| in_box(c, b)) || (t[i] != 0 && rng.random_bool(0.7));
                let level = if hot { rng.random_range(4..=10) } else { rng.random_range(0..=3) };
                level as f32 / 10.0
            })
            .collect();
        let g = Geometry::default();
        let prostate = BinaryMask::new(Array3::from_shape_vec(s, m).unwrap(), g).unwrap();
        let Ok(_) = voxlesion::evaluation::sextant_map(&prostate) else { continue };
        return RandomCase {
            prob: Volume3D::new(Array3::from_shape_vec(s, p).unwrap(), g).unwrap(),
            truth: LabelVolume::new(Array3::from_shape_vec(s, t).unwrap(), g, Provenance::Strong).unwrap(),
            prostate,
            threshold: [0.35, 0.45, 0.55, 0.65][rng.random_range(0..4)],
            min_size: rng.random_range(1..=4),
            min_overlap: [0.1, 0.3, 0.5][rng.random_range(0..3)],
        };
    }
}

fn check_case(rc: &RandomCase, ev: &CaseEvaluation, o: &Oracle, cands: &[(Vec<usize>, f64)]) -> Result<(), String> {
    let s = rc.prob.shape();
    let truth = bfs_components(&rc.truth.as_slice().iter().map(|&v| v != 0).collect::<Vec<_>>(), s);
    // Library truth components are identified by their smallest voxel.
    let lib_truth = voxlesion::evaluation::truth_components(&rc.truth);
    let to_oracle: Vec<usize> = lib_truth
        .iter()
        .map(|c| truth.iter().position(|t| t[0] == c.voxels()[0]).unwrap())
        .collect();
    let mut lib_pairs: Vec<(usize, usize)> = ev.matches.pairs.iter().map(|&(c, t)| (c, to_oracle[t])).collect();
    lib_pairs.sort_unstable();
    let mut want = o.pairs.clone();
    want.sort_unstable();
    let r = &ev.matches;
    if (r.tp, r.fn_, r.fp, r.region_fp, r.tn) != (o.tp, o.fn_, o.fp_candidates, o.region_fp, o.tn) {
        return Err(format!(
            "counts {:?} vs oracle {:?}",
            (r.tp, r.fn_, r.fp, r.region_fp, r.tn),
            (o.tp, o.fn_, o.fp_candidates, o.region_fp, o.tn)
        ));
    }
    if lib_pairs != want {
        return Err(format!("pairs {lib_pairs:?} vs oracle {want:?}"));
    }
    let lib_pos: Vec<f64> = (0..truth.len())
        .map(|ti| ev.units.positives[to_oracle.iter().position(|&x| x == ti).unwrap()])
        .collect();
    if lib_pos != o.positives || ev.units.negatives != o.negatives {
        return Err(format!(
            "unit scores {lib_pos:?}/{:?} vs oracle {:?}/{:?}",
            ev.units.negatives, o.positives, o.negatives
        ));
    }
    let best = cands.iter().map(|c| c.1).fold(0.0, f64::max);
    if ev.patient_score != best || ev.called_positive != !cands.is_empty() {
        return Err("patient score".into());
    }
    Ok(())
}

fn pooled_oracle(cases: &[(bool, f64, bool)], oracles: &[Oracle]) -> (Confusion, Confusion, Option<f64>, Option<f64>) {
    let mut lc = Confusion::default();
    let mut pc = Confusion::default();
    let (mut ls, mut ll, mut ps, mut pl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (o, &(has, score, called)) in oracles.iter().zip(cases) {
        lc.tp += o.tp;
        lc.fn_ += o.fn_;
        lc.fp += o.region_fp;
        lc.tn += o.tn;
        ls.extend(&o.positives);
        ll.extend(std::iter::repeat_n(true, o.positives.len()));
        ls.extend(&o.negatives);
        ll.extend(std::iter::repeat_n(false, o.negatives.len()));
        match (has, called) {
            (true, true) => pc.tp += 1,
            (true, false) => pc.fn_ += 1,
            (false, true) => pc.fp += 1,
            (false, false) => pc.tn += 1,
        }
        ps.push(score);
        pl.push(has);
    }
    (lc, pc, pairwise_auc(&ls, &ll), pairwise_auc(&ps, &pl))
}

fn same(a: f64, b: Option<f64>) -> bool {
    match b {
        Some(b) => a == b,
        None => a.is_nan(),
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

fn panel_matches(p: &voxlesion::evaluation::MetricPanel, c: &Confusion, auc: Option<f64>) -> bool {
    let eq = |x: f64, y: f64| x == y || (x.is_nan() && y.is_nan());
    same(p.roc_auc, auc)
        && eq(p.se, ratio(c.tp, c.tp + c.fn_))
        && eq(p.sp, ratio(c.tn, c.tn + c.fp))
        && eq(p.ppv, ratio(c.tp, c.tp + c.fp))
        && eq(p.npv, ratio(c.tn, c.tn + c.fn_))
        && eq(p.acc, ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut per = Vec::new();
    let mut oracles = Vec::new();
    let mut patient = Vec::new();
    let mut failures = Vec::new();
    let mut units = 0;
    for case in 0..50 {
        let rc = random_case(&mut rng);
        let s = rc.prob.shape();
        let cands = extract_lesions(&rc.prob, &rc.prostate, rc.threshold, rc.min_size).unwrap();
        // Extraction itself against BFS.
        let p = rc.prob.as_slice();
        let on: Vec<bool> =
            p.iter().zip(rc.prostate.as_slice()).map(|(&v, &i)| i && f64::from(v) > rc.threshold).collect();
        let mut want: Vec<Vec<usize>> = bfs_components(&on, s).into_iter().filter(|c| c.len() >= rc.min_size).collect();
        let mut got: Vec<Vec<usize>> = cands.iter().map(|c| c.component.voxels().to_vec()).collect();
        want.sort();
        got.sort();
        if want != got {
            failures.push(format!("case {case}: candidate extraction"));
        }
        let oc: Vec<(Vec<usize>, f64)> = cands.iter().map(|c| (c.component.voxels().to_vec(), c.score)).collect();
        let pred = PredictionResult {
            patient_score: patient_score(&cands),
            probability: rc.prob.clone(),
            entropy: Volume3D::zeros(s, Geometry::default()).unwrap(),
            candidates: cands,
        };
        let cfg = EvalConfig { min_overlap: rc.min_overlap };
        let ev = evaluate_case(&format!("r{case}"), &pred, &rc.prostate, &rc.truth, rc.min_size, &cfg).unwrap();
        let o = oracle_case(p, rc.prostate.as_slice(), rc.truth.as_slice(), s, &oc, rc.min_size, rc.min_overlap);
        if let Err(e) = check_case(&rc, &ev, &o, &oc) {
            failures.push(format!("case {case}: {e}"));
        }
        units += o.positives.len() + o.negatives.len();
        let best = oc.iter().map(|c| c.1).fold(0.0, f64::max);
        patient.push((rc.truth.lesion_voxels() > 0, best, !oc.is_empty()));
        per.push(ev);
        oracles.push(o);
    }
    let ev: Evaluation = aggregate(per);
    let (lc, pc, lauc, pauc) = pooled_oracle(&patient, &oracles);
    if ev.lesion_counts != lc || ev.patient_counts != pc {
        failures.push(format!("pooled counts {:?}/{:?} vs {lc:?}/{pc:?}", ev.lesion_counts, ev.patient_counts));
    }
    if !panel_matches(&ev.lesion, &lc, lauc) || !panel_matches(&ev.patient, &pc, pauc) {
        failures.push("metric panels".into());
    }
    // Both AUC implementations on random tied data.
    for k in 0..50 {
        let n = rng.random_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let a = roc_auc(&s, &l).ok();
        if a != pairwise_auc(&s, &l) {
            failures.push(format!("auc draw {k}: {a:?}"));
        }
    }
    let detail = format!(
        "50 cases, {units} units, lesion AUC {:.4}, patient AUC {:.4}, {} mismatches{}",
        ev.lesion.roc_auc,
        ev.patient.roc_auc,
        failures.len(),
        failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
    );
    verdict(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- criterion 6

fn stitching() -> Verdict {
    let mut worst = 0.0f64;
    let c = 0.37f32;
    for blend in [Blend::Uniform, Blend::Gaussian] {
        for shape in [[50usize, 40, 37], [16, 16, 16], [33, 17, 24]] {
            let spec = PatchSpec::cubic(16);
            let tiles: Vec<_> = tile_volume(shape, &spec)
                .into_iter()
                .map(|o| (o, Array3::from_elem([16; 3], c)))
                .collect();
            let out = stitch_predictions(&tiles, shape, blend).unwrap();
            worst = worst.max(out.iter().map(|&v| (f64::from(v) - f64::from(c)).abs()).fold(0.0, f64::max));
        }
    }
    let cfg = ModelConfig { base_channels: 4, patch_size: [32; 3], pool_kernel: 32, ..ModelConfig::default() };
    let model = Model::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Geometry::default();
    let img = Array3::from_shape_fn([32; 3], |_| rng.random_range(-1.0f32..1.0));
    let vol = Volume3D::new(img.clone(), g).unwrap();
    let prostate = BinaryMask::full([32; 3], g).unwrap();
    let direct = model.predict_full_res(img.as_slice().unwrap()).unwrap();
    let mut single = 0.0f64;
    for blend in [Blend::Uniform, Blend::Gaussian] {
        let pred = predict_volume(&model, &vol, &prostate, &PatchSpec::cubic(32), blend, 0).unwrap();
        let d = pred
            .probability
            .as_slice()
            .iter()
            .zip(direct.channel(LESION))
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max);
        single = single.max(d);
    }
    verdict(
        worst <= 1e-12 && single <= 1e-6,
        format!("constant error {worst:.1e}, single-tile vs direct {single:.1e}"),
    )
}

// ------------------------------------------------------------ criteria 7 to 9

const SEEDS: [u64; 3] = [0, 1, 2];
const EXPERIMENT_OUTCOMES: [usize; 2] = [7, 8];

struct SeedRuns {
    full: ConfigRun,
    baseline: ConfigRun,
    full_secs: f64,
    fp_entropy: (f64, f64, usize),
}

fn run_seed(seed: u64) -> (SeedRuns, Cohorts, ExperimentConfig) {
    let cfg = ExperimentConfig::desk(seed);
    let t = Instant::now();
    let cohorts = build_cohorts(&cfg).unwrap();
    let full = run_preset(&cfg, &cohorts, Ablation::ClsEnt).unwrap();
    let full_secs = seconds(t);
    let baseline = run_preset(&cfg, &cohorts, Ablation::Baseline).unwrap();
    let (means, src, n) = fp_region_entropy(&[&full, &baseline], &cohorts).unwrap();
    eprintln!(
        "seed {seed}: full AUC {:.4} SP {:.3} FP {} | baseline AUC {:.4} SP {:.3} FP {} | FP-region entropy {:.4} vs {:.4} ({n} voxels, {src:?}) | {:.0}s",
        full.evaluation.lesion.roc_auc,
        full.evaluation.lesion.sp,
        full.evaluation.lesion_counts.fp,
        baseline.evaluation.lesion.roc_auc,
        baseline.evaluation.lesion.sp,
        baseline.evaluation.lesion_counts.fp,
        means[0],
        means[1],
        seconds(t)
    );
    (SeedRuns { full, baseline, full_secs, fp_entropy: (means[0], means[1], n) }, cohorts, cfg)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn experiment() -> [Verdict; 3] {
    let mut runs = Vec::new();
    let mut first: Option<(Cohorts, ExperimentConfig)> = None;
    for seed in SEEDS {
        let (r, co, cfg) = run_seed(seed);
        runs.push(r);
        if first.is_none() {
            first = Some((co, cfg));
        }
    }
    let s0 = &runs[0];
    let auc = s0.full.evaluation.lesion.roc_auc;
    let c7 = verdict(
        auc >= 0.85 && s0.full_secs < 1800.0,
        format!("seed 0 +cls+ent lesion AUC {auc:.4} in {:.0}s", s0.full_secs),
    );

    let fp = |f: fn(&SeedRuns) -> &ConfigRun| median(runs.iter().map(|r| f(r).evaluation.lesion_counts.fp as f64).collect());
    let sp = |f: fn(&SeedRuns) -> &ConfigRun| median(runs.iter().map(|r| f(r).evaluation.lesion.sp).collect());
    let (fp_full, fp_base) = (fp(|r| &r.full), fp(|r| &r.baseline));
    let (sp_full, sp_base) = (sp(|r| &r.full), sp(|r| &r.baseline));
    // Entropy pooled over every seed's shared false-positive region.
    let total: usize = runs.iter().map(|r| r.fp_entropy.2).sum();
    let ent_full = runs.iter().map(|r| r.fp_entropy.0 * r.fp_entropy.2 as f64).sum::<f64>() / total as f64;
    let ent_base = runs.iter().map(|r| r.fp_entropy.1 * r.fp_entropy.2 as f64).sum::<f64>() / total as f64;
    let c8 = verdict(
        fp_full <= fp_base && sp_full > sp_base && ent_full < ent_base,
        format!(
            "median FP {fp_full} vs {fp_base}, median SP {sp_full:.4} vs {sp_base:.4}, FP-region entropy {ent_full:.4} vs {ent_base:.4} (+cls+ent vs baseline)"
        ),
    );

    let (co, cfg) = first.unwrap();
    let again = run_preset(&cfg, &co, Ablation::ClsEnt).unwrap();
    let a = &s0.full;
    let same_logs = a.pretrain_log == again.pretrain_log && a.finetune_log == again.finetune_log;
    let same_panels = a.evaluation.lesion == again.evaluation.lesion && a.evaluation.patient == again.evaluation.patient;
    let same_ckpt = a.checkpoint.to_bytes().unwrap() == again.checkpoint.to_bytes().unwrap();
    let c9 = verdict(
        same_logs && same_panels && same_ckpt,
        format!("loss logs equal {same_logs}, panels equal {same_panels}, checkpoints equal {same_ckpt}"),
    );
    [c7, c8, c9]
}

fn main() {
    // `cargo test` passes harness flags; listing prints nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let quick: [(usize, fn() -> Verdict); 6] = [
        (1, entropy_values),
        (2, gradient_checks),
        (3, objective_composition),
        (4, architecture_contract),
        (5, metric_oracles),
        (6, stitching),
    ];
    let mut results = Vec::new();
    for (k, f) in quick {
        let v = f();
        println!("criterion {k}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((k, v));
    }
    let [c7, c8, c9] = experiment();
    for (k, v) in [(7, c7), (8, c8), (9, c9)] {
        println!("criterion {k}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((k, v));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(k, _)| *k).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        return;
    }
    println!("acceptance: failed {failed:?}");
    // Criteria 7 and 8 are outcomes of the phantom experiment and are reported
    // as such; every other criterion is a correctness property.
    if failed.iter().any(|k| !EXPERIMENT_OUTCOMES.contains(k)) {
        std::process::exit(1);
    }
}
