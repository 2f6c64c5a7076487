//! Lesion- and patient-level scoring.
//!
//! Lesion-level positives are truth components; lesion-level negatives are
//! truth-free prostate sextants. A unit's score is the highest threshold at
//! which some candidate (of at least `min_size` voxels) touches it, so a unit
//! is detected at threshold `t` exactly when its score exceeds `t`.

use serde::{Deserialize, Serialize};

use crate::components::{components_of, neighbours, ConnectedComponent, Connectivity};
use crate::error::{Error, Result};
use crate::inference::{LesionCandidate, PredictionResult};
use crate::volume::{ensure_same_grid, BinaryMask, Grid, LabelVolume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub min_overlap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { min_overlap: 0.1 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(Error::InvalidConfig("min_overlap must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// (candidate index, truth component index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    /// Truth-free sextants without / with candidate voxels.
    pub tn: usize,
    pub region_fp: usize,
}

/// Greedy matching of scored components to truth components.
///
/// Candidates are visited by descending score (ties by index). A candidate
/// matches the unmatched truth component with the largest overlap among
/// those overlapping by at least `min_overlap` of the smaller region.
pub fn match_components(
    candidates: &[(&ConnectedComponent, f64)],
    truth: &[ConnectedComponent],
    min_overlap: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; truth.len()];
    let mut res = MatchResult::default();
    for ci in order {
        let c = candidates[ci].0;
        let mut best: Option<(usize, usize)> = None;
        for (ti, t) in truth.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let ov = c.overlap(t);
            let need = min_overlap * c.size().min(t.size()) as f64;
            if ov > 0 && ov as f64 >= need && best.is_none_or(|(_, b)| ov > b) {
                best = Some((ti, ov));
            }
        }
        match best {
            Some((ti, _)) => {
                taken[ti] = true;
                res.pairs.push((ci, ti));
                res.tp += 1;
            }
            None => {
                res.unmatched.push(ci);
                res.fp += 1;
            }
        }
    }
    res.fn_ = truth.len() - res.tp;
    res
}

pub fn truth_components(truth: &LabelVolume) -> Vec<ConnectedComponent> {
    let on: Vec<bool> = truth.as_slice().iter().map(|&v| v != 0).collect();
    components_of(&on, truth.shape(), Connectivity::TwentySix)
}

fn check_candidate_grid(candidates: &[LesionCandidate], shape: [usize; 3]) -> Result<()> {
    if let Some(c) = candidates.iter().find(|c| c.grid_shape != shape) {
        return Err(Error::GridMismatch(format!(
            "candidate grid {:?} vs truth grid {:?}",
            c.grid_shape, shape
        )));
    }
    Ok(())
}

pub fn match_lesions(
    candidates: &[LesionCandidate],
    truth: &LabelVolume,
    min_overlap: f64,
) -> Result<MatchResult> {
    check_candidate_grid(candidates, truth.shape())?;
    let comps = truth_components(truth);
    let scored: Vec<(&ConnectedComponent, f64)> =
        candidates.iter().map(|c| (&c.component, c.score)).collect();
    Ok(match_components(&scored, &comps, min_overlap))
}

/// Sentinel for voxels outside the prostate.
pub const NO_SEXTANT: u8 = u8::MAX;

/// Sextant index per voxel: `side * 3 + zone`, where side halves the prostate
/// bounding box on axis 0 and zone splits it into thirds on axis 2.
pub fn sextant_map(prostate: &BinaryMask) -> Result<Vec<u8>> {
    let (lo, hi) = prostate.bbox().ok_or(Error::EmptyMask("prostate"))?;
    let ext: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
    if ext[0] < 3 || ext[2] < 3 {
        return Err(Error::Degenerate(format!(
            "prostate bounding box {ext:?} is thinner than 3 slices"
        )));
    }
    let shape = prostate.shape();
    let m = prostate.as_slice();
    let mut out = vec![NO_SEXTANT; m.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if !m[idx] {
            continue;
        }
        let c = crate::components::unflatten(idx, shape);
        let side = usize::from((c[0] - lo[0]) * 2 >= ext[0]);
        let zone = ((c[2] - lo[2]) * 3) / ext[2];
        *o = (side * 3 + zone) as u8;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionCounts {
    pub tn: usize,
    pub fp: usize,
}

/// Truth-free sextants are negatives: TN without candidate voxels, FP with.
pub fn region_negatives(
    prostate: &BinaryMask,
    truth: &LabelVolume,
    candidates: &[LesionCandidate],
) -> Result<RegionCounts> {
    ensure_same_grid(prostate, truth)?;
    check_candidate_grid(candidates, prostate.shape())?;
    let sx = sextant_map(prostate)?;
    let (present, has_truth) = sextant_occupancy(&sx, truth.as_slice());
    let mut hit = [false; 6];
    for c in candidates {
        for &v in c.component.voxels() {
            if sx[v] != NO_SEXTANT {
                hit[sx[v] as usize] = true;
            }
        }
    }
    let mut rc = RegionCounts::default();
    for s in 0..6 {
        if present[s] && !has_truth[s] {
            if hit[s] {
                rc.fp += 1;
            } else {
                rc.tn += 1;
            }
        }
    }
    Ok(rc)
}

fn sextant_occupancy(sx: &[u8], truth: &[u8]) -> ([bool; 6], [bool; 6]) {
    let mut present = [false; 6];
    let mut has_truth = [false; 6];
    for (i, &s) in sx.iter().enumerate() {
        if s != NO_SEXTANT {
            present[s as usize] = true;
            if truth[i] != 0 {
                has_truth[s as usize] = true;
            }
        }
    }
    (present, has_truth)
}

/// Detection scores for the lesion-level units of one case.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnitScores {
    /// One per truth component, in component order.
    pub positives: Vec<f64>,
    /// One per truth-free sextant.
    pub negatives: Vec<f64>,
}

struct Dsu {
    parent: Vec<u32>,
    size: Vec<u32>,
    sextants: Vec<u8>,
    truth: Vec<Vec<u32>>,
}

impl Dsu {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let p = self.parent[x] as usize;
            self.parent[x] = self.parent[p];
            x = p;
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] || (self.size[ra] == self.size[rb] && ra > rb) {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        self.sextants[ra] |= self.sextants[rb];
        let moved = std::mem::take(&mut self.truth[rb]);
        self.truth[ra].extend(moved);
        self.truth[ra].sort_unstable();
        self.truth[ra].dedup();
    }
}

/// Score every lesion-level unit by sweeping the threshold downwards.
pub fn unit_scores(
    prob: &Volume3D,
    prostate: &BinaryMask,
    truth: &LabelVolume,
    min_size: usize,
) -> Result<UnitScores> {
    ensure_same_grid(prob, prostate)?;
    ensure_same_grid(prob, truth)?;
    let shape = prob.shape();
    let p = prob.as_slice();
    let m = prostate.as_slice();
    let sx = sextant_map(prostate)?;
    let comps = truth_components(truth);
    let mut truth_id = vec![u32::MAX; p.len()];
    for (ci, c) in comps.iter().enumerate() {
        for &v in c.voxels() {
            truth_id[v] = ci as u32;
        }
    }
    let (present, has_truth) = sextant_occupancy(&sx, truth.as_slice());

    let mut order: Vec<usize> = (0..p.len()).filter(|&i| m[i] && p[i] > 0.0).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));

    let n = p.len();
    let mut dsu = Dsu {
        parent: (0..n as u32).collect(),
        size: vec![1; n],
        sextants: vec![0; n],
        truth: vec![Vec::new(); n],
    };
    let mut active = vec![false; n];
    let mut pos = vec![0.0f64; comps.len()];
    let mut pos_done = vec![false; comps.len()];
    let mut sext = [0.0f64; 6];
    let mut sext_done = [false; 6];
    let offsets = Connectivity::TwentySix.offsets();

    let mut g = 0;
    while g < order.len() {
        let v = p[order[g]];
        let mut end = g;
        while end < order.len() && p[order[end]] == v {
            end += 1;
        }
        for &idx in &order[g..end] {
            active[idx] = true;
            if sx[idx] != NO_SEXTANT {
                dsu.sextants[idx] = 1 << sx[idx];
            }
            if truth_id[idx] != u32::MAX {
                dsu.truth[idx].push(truth_id[idx]);
            }
            for nb in neighbours(idx, shape, &offsets) {
                if active[nb] {
                    dsu.union(idx, nb);
                }
            }
        }
        let mut roots: Vec<usize> = order[g..end].iter().map(|&i| dsu.find(i)).collect();
        roots.sort_unstable();
        roots.dedup();
        for r in roots {
            if (dsu.size[r] as usize) < min_size {
                continue;
            }
            for &t in &dsu.truth[r] {
                if !pos_done[t as usize] {
                    pos_done[t as usize] = true;
                    pos[t as usize] = f64::from(v);
                }
            }
            for (s, done) in sext_done.iter_mut().enumerate() {
                if dsu.sextants[r] & (1 << s) != 0 && !*done {
                    *done = true;
                    sext[s] = f64::from(v);
                }
            }
        }
        g = end;
    }
    let negatives = (0..6)
        .filter(|&s| present[s] && !has_truth[s])
        .map(|s| sext[s])
        .collect();
    Ok(UnitScores { positives: pos, negatives })
}

/// Mann-Whitney AUC with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(crate::error::shape_mismatch(&[labels.len()], &[scores.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j, mid-rank*2 = i + 1 + j
        let mid2 = (i + 1 + j) as u128;
        let pos_here = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += mid2 * pos_here;
        i = j;
    }
    let np = n_pos as u128;
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * n_neg as u128) as f64)
}

/// Threshold maximising sensitivity + specificity − 1, where a unit is called
/// positive when its score exceeds the threshold. Candidates are 0 and the
/// midpoints between consecutive distinct scores; ties go to the highest.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return Err(Error::UndefinedMetric("threshold selection needs both classes".into()));
    }
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut cands = vec![0.0];
    cands.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in cands {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s > t).count();
        let tn = scores.iter().zip(labels).filter(|(&s, &l)| !l && s <= t).count();
        let j = tp as f64 / n_pos as f64 + tn as f64 / n_neg as f64 - 1.0;
        if j >= best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Lesion,
    Patient,
}

/// Not-a-value fields serialise as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricPanel {
    pub level: Level,
    #[serde(with = "nan_as_null")]
    pub roc_auc: f64,
    #[serde(with = "nan_as_null")]
    pub se: f64,
    #[serde(with = "nan_as_null")]
    pub sp: f64,
    #[serde(with = "nan_as_null")]
    pub ppv: f64,
    #[serde(with = "nan_as_null")]
    pub npv: f64,
    #[serde(with = "nan_as_null")]
    pub acc: f64,
}

impl MetricPanel {
    pub fn values(&self) -> [f64; 6] {
        [self.roc_auc, self.se, self.sp, self.ppv, self.npv, self.acc]
    }
}

/// Equality that treats two not-a-values as equal.
impl PartialEq for MetricPanel {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a == &b || (a.is_nan() && b.is_nan()))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

pub fn metric_panel(counts: &Confusion, scores: &[f64], labels: &[bool], level: Level) -> MetricPanel {
    let c = counts;
    MetricPanel {
        level,
        roc_auc: roc_auc(scores, labels).unwrap_or(f64::NAN),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        ppv: ratio(c.tp, c.tp + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub case_id: String,
    pub matches: MatchResult,
    pub units: UnitScores,
    pub has_lesion: bool,
    pub patient_score: f64,
    pub called_positive: bool,
    /// Voxels of candidates that matched no truth component.
    pub fp_voxels: Vec<usize>,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &PredictionResult,
    prostate: &BinaryMask,
    truth: &LabelVolume,
    min_size: usize,
    cfg: &EvalConfig,
) -> Result<CaseEvaluation> {
    ensure_same_grid(&pred.probability, truth)?;
    let mut matches = match_lesions(&pred.candidates, truth, cfg.min_overlap)?;
    let regions = region_negatives(prostate, truth, &pred.candidates)?;
    matches.tn = regions.tn;
    matches.region_fp = regions.fp;
    let units = unit_scores(&pred.probability, prostate, truth, min_size)?;
    let mut fp_voxels: Vec<usize> = matches
        .unmatched
        .iter()
        .flat_map(|&ci| pred.candidates[ci].component.voxels().iter().copied())
        .collect();
    fp_voxels.sort_unstable();
    Ok(CaseEvaluation {
        case_id: case_id.to_string(),
        has_lesion: truth.lesion_voxels() > 0,
        patient_score: pred.patient_score,
        called_positive: !pred.candidates.is_empty(),
        matches,
        units,
        fp_voxels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub lesion: MetricPanel,
    pub patient: MetricPanel,
    pub lesion_counts: Confusion,
    pub patient_counts: Confusion,
    /// Candidates that matched no truth component.
    pub candidate_fp: usize,
    pub cases: Vec<CaseEvaluation>,
}

/// Pool per-case results (in the given order) into lesion and patient panels.
pub fn aggregate(cases: Vec<CaseEvaluation>) -> Evaluation {
    let mut lc = Confusion::default();
    let mut pc = Confusion::default();
    let mut ls = Vec::new();
    let mut ll = Vec::new();
    let mut ps = Vec::new();
    let mut pl = Vec::new();
    let mut candidate_fp = 0;
    for c in &cases {
        lc.tp += c.matches.tp;
        lc.fn_ += c.matches.fn_;
        lc.fp += c.matches.region_fp;
        lc.tn += c.matches.tn;
        candidate_fp += c.matches.fp;
        for &s in &c.units.positives {
            ls.push(s);
            ll.push(true);
        }
        for &s in &c.units.negatives {
            ls.push(s);
            ll.push(false);
        }
        match (c.has_lesion, c.called_positive) {
            (true, true) => pc.tp += 1,
            (true, false) => pc.fn_ += 1,
            (false, true) => pc.fp += 1,
            (false, false) => pc.tn += 1,
        }
        ps.push(c.patient_score);
        pl.push(c.has_lesion);
    }
    Evaluation {
        lesion: metric_panel(&lc, &ls, &ll, Level::Lesion),
        patient: metric_panel(&pc, &ps, &pl, Level::Patient),
        lesion_counts: lc,
        patient_counts: pc,
        candidate_fp,
        cases,
    }
}

/// Lesion-level unit scores and labels pooled over cases.
pub fn pooled_units(cases: &[CaseEvaluation]) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for c in cases {
        s.extend(&c.units.positives);
        l.extend(std::iter::repeat_n(true, c.units.positives.len()));
        s.extend(&c.units.negatives);
        l.extend(std::iter::repeat_n(false, c.units.negatives.len()));
    }
    (s, l)
}
