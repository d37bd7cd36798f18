//! PCK / PCKh and OKS-based AP / AR over union-skeleton instances.
//!
//! Predictions and ground truth are both [`UnifiedInstance`]s in the same
//! coordinate frame. A prediction slot whose mask is false counts as "not
//! predicted": it is never correct for PCK and contributes zero similarity
//! to OKS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::UnifiedInstance;
use crate::schema::{UnionSchema, COCO17};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0} predictions for {1} ground-truth instances")]
    Unpaired(usize, usize),
    #[error("invalid OKS parameters: {0}")]
    Oks(String),
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// `head_scale * |head_top - upper_neck|`.
    HeadSegment,
    BboxDiag,
    /// `|left_shoulder - right_hip|`.
    Torso,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub threshold: f64,
    pub normalizer: Normalizer,
    pub head_scale: f64,
}

impl PckConfig {
    pub fn pckh(threshold: f64) -> Self {
        Self {
            threshold,
            normalizer: Normalizer::HeadSegment,
            head_scale: 0.6,
        }
    }

    pub fn bbox(threshold: f64) -> Self {
        Self {
            threshold,
            normalizer: Normalizer::BboxDiag,
            head_scale: 0.6,
        }
    }
}

/// Which union slots an evaluation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Coco,
    Mpii,
    Shared,
}

impl std::str::FromStr for Subset {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "coco" | "coco17" => Ok(Self::Coco),
            "mpii" | "mpii16" => Ok(Self::Mpii),
            "shared" => Ok(Self::Shared),
            other => Err(MetricError::UnknownSubset(other.to_string())),
        }
    }
}

/// Slot indices of a subset of the COCO + MPII union.
pub fn subset_slots(union: &UnionSchema, subset: Subset) -> Vec<usize> {
    let coco = union.slots_of("coco17");
    let mpii = union.slots_of("mpii16");
    match subset {
        Subset::All => (0..union.len()).collect(),
        Subset::Coco => coco,
        Subset::Mpii => mpii,
        Subset::Shared => coco.into_iter().filter(|s| mpii.contains(s)).collect(),
    }
}

/// Standard COCO per-keypoint sigmas (pycocotools values).
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Per-slot falloff constants `k` in `exp(-d^2 / (2 * area * k^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct SigmaFile {
    sigmas: BTreeMap<String, f64>,
}

impl OksParams {
    /// Defaults for a union: COCO keypoints use `2 * sigma` from
    /// [`COCO_SIGMAS`], which makes the OKS formula agree with pycocotools.
    /// MPII-only slots borrow a neighbour's constant.
    pub fn defaults(union: &UnionSchema) -> Self {
        let coco_k = |name: &str| {
            let i = COCO17.iter().position(|n| *n == name).unwrap();
            2.0 * COCO_SIGMAS[i]
        };
        let sigmas = union
            .keypoints()
            .iter()
            .map(|k| match k.as_str() {
                "pelvis" => coco_k("left_hip"),
                "thorax" | "upper_neck" => coco_k("left_shoulder"),
                "head_top" => coco_k("left_ear"),
                name if COCO17.contains(&name) => coco_k(name),
                _ => coco_k("left_hip"),
            })
            .collect();
        Self { sigmas }
    }

    /// Defaults overridden by a `{"sigmas": {name: value}}` file.
    pub fn from_json(bytes: &[u8], union: &UnionSchema) -> Result<Self, MetricError> {
        let file: SigmaFile =
            serde_json::from_slice(bytes).map_err(|e| MetricError::Oks(e.to_string()))?;
        let mut params = Self::defaults(union);
        for (name, value) in file.sigmas {
            let slot = union
                .index_of(&name)
                .ok_or_else(|| MetricError::Oks(format!("no keypoint {name:?} in union")))?;
            params.sigmas[slot] = value;
        }
        params.validate(union.len())?;
        Ok(params)
    }

    pub fn validate(&self, slots: usize) -> Result<(), MetricError> {
        if self.sigmas.len() != slots {
            return Err(MetricError::Oks(format!(
                "{} sigmas for {slots} slots",
                self.sigmas.len()
            )));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(MetricError::Oks("sigmas must be positive".into()));
        }
        Ok(())
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Object keypoint similarity over the labeled slots of `gt` within
/// `subset`. `None` when no such slot exists.
pub fn oks(
    pred: &UnifiedInstance,
    gt: &UnifiedInstance,
    params: &OksParams,
    subset: &[usize],
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &k in subset {
        if !gt.mask[k] {
            continue;
        }
        n += 1;
        if pred.mask[k] {
            let s = params.sigmas[k];
            sum += (-dist2(pred.coords[k], gt.coords[k]) / (2.0 * gt.area * s * s)).exp();
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub instances: usize,
    pub keypoints: usize,
    pub predictions: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointScore {
    pub name: String,
    pub score: f64,
    pub count: usize,
}

/// Scores are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_keypoint: Vec<KeypointScore>,
    /// Aggregates keyed by table column name (`PCK`, `AP`, `AP50`, `AR_M`, ...).
    pub means: BTreeMap<String, f64>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn mean(&self, key: &str) -> Option<f64> {
        self.means.get(key).copied()
    }

    pub fn keypoint(&self, name: &str) -> Option<f64> {
        self.per_keypoint
            .iter()
            .find(|k| k.name == name)
            .map(|k| k.score)
    }
}

/// `0.50:0.05:0.95`, computed the way numpy's `linspace` does.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + i as f64 * 0.05).collect()
}

/// The 101 recall sample points.
pub fn recall_points() -> Vec<f64> {
    let mut r: Vec<f64> = (0..101).map(|i| i as f64 * 0.01).collect();
    r[100] = 1.0;
    r
}

pub const MAX_DETS: usize = 20;

#[derive(Debug, Clone, Copy)]
struct AreaRange {
    lo: f64,
    hi: f64,
    lo_inclusive: bool,
}

impl AreaRange {
    fn contains(&self, a: f64) -> bool {
        let above = if self.lo_inclusive { a >= self.lo } else { a > self.lo };
        above && a <= self.hi
    }
}

const AREA_ALL: AreaRange = AreaRange {
    lo: 0.0,
    hi: f64::INFINITY,
    lo_inclusive: true,
};
const AREA_M: AreaRange = AreaRange {
    lo: 32.0 * 32.0,
    hi: 96.0 * 96.0,
    lo_inclusive: false,
};
const AREA_L: AreaRange = AreaRange {
    lo: 96.0 * 96.0,
    hi: f64::INFINITY,
    lo_inclusive: false,
};

/// Per-threshold precision (101-point interpolated) and final recall for one
/// area range. `None` when no ground truth is in range.
fn ap_for_range(
    preds: &[UnifiedInstance],
    gts: &[UnifiedInstance],
    params: &OksParams,
    subset: &[usize],
    thresholds: &[f64],
    range: AreaRange,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut images: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        images.entry(g.image_id).or_default().1.push(i);
    }
    for (i, p) in preds.iter().enumerate() {
        images.entry(p.image_id).or_default().0.push(i);
    }

    let t_n = thresholds.len();
    // (score, pred id, matched per threshold, ignored per threshold)
    let mut dets: Vec<(f64, usize, Vec<bool>, Vec<bool>)> = Vec::new();
    let mut num_gt = 0usize;

    for (pred_ids, gt_ids) in images.values() {
        let gt_oks_ok: Vec<bool> = gt_ids
            .iter()
            .map(|&g| subset.iter().any(|&k| gts[g].mask[k]))
            .collect();
        let gt_ignore: Vec<bool> = gt_ids
            .iter()
            .zip(&gt_oks_ok)
            .map(|(&g, &ok)| !ok || !range.contains(gts[g].area))
            .collect();
        // non-ignored first, then ascending id
        let mut gorder: Vec<usize> = (0..gt_ids.len()).collect();
        gorder.sort_by_key(|&i| (gt_ignore[i], gt_ids[i]));
        num_gt += gt_ignore.iter().filter(|&&ig| !ig).count();

        let mut dorder: Vec<usize> = pred_ids.clone();
        dorder.sort_by(|&a, &b| {
            let (sa, sb) = (preds[a].score.unwrap_or(0.0), preds[b].score.unwrap_or(0.0));
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        dorder.truncate(MAX_DETS);

        let sims: Vec<Vec<f64>> = dorder
            .iter()
            .map(|&d| {
                gorder
                    .iter()
                    .map(|&gi| oks(&preds[d], &gts[gt_ids[gi]], params, subset).unwrap_or(0.0))
                    .collect()
            })
            .collect();

        let mut gt_taken = vec![vec![false; gorder.len()]; t_n];
        let mut det_rows: Vec<(Vec<bool>, Vec<bool>)> =
            vec![(vec![false; t_n], vec![false; t_n]); dorder.len()];
        for (t_idx, &thr) in thresholds.iter().enumerate() {
            for (di, row) in sims.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (gpos, &sim) in row.iter().enumerate() {
                    if gt_taken[t_idx][gpos] {
                        continue;
                    }
                    let ignored = gt_ignore[gorder[gpos]];
                    if let Some((m, _)) = best {
                        if !gt_ignore[gorder[m]] && ignored {
                            break;
                        }
                    }
                    if sim < thr {
                        continue;
                    }
                    if best.is_none_or(|(_, s)| sim > s) {
                        best = Some((gpos, sim));
                    }
                }
                if let Some((m, _)) = best {
                    gt_taken[t_idx][m] = true;
                    det_rows[di].0[t_idx] = true;
                    det_rows[di].1[t_idx] = gt_ignore[gorder[m]];
                } else {
                    det_rows[di].1[t_idx] = !range.contains(preds[dorder[di]].area);
                }
            }
        }
        for (di, (matched, ignored)) in det_rows.into_iter().enumerate() {
            let d = dorder[di];
            dets.push((preds[d].score.unwrap_or(0.0), d, matched, ignored));
        }
    }

    if num_gt == 0 {
        return None;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let rpts = recall_points();
    let mut precisions = Vec::with_capacity(t_n);
    let mut recalls = Vec::with_capacity(t_n);
    for t_idx in 0..t_n {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut rc = Vec::new();
        let mut pr = Vec::new();
        for (_, _, matched, ignored) in &dets {
            if ignored[t_idx] {
                continue;
            }
            if matched[t_idx] {
                tp += 1;
            } else {
                fp += 1;
            }
            rc.push(tp as f64 / num_gt as f64);
            pr.push(tp as f64 / (tp + fp) as f64);
        }
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let q: f64 = rpts
            .iter()
            .map(|&r| {
                let i = rc.partition_point(|&x| x < r);
                pr.get(i).copied().unwrap_or(0.0)
            })
            .sum();
        precisions.push(q / rpts.len() as f64);
        recalls.push(rc.last().copied().unwrap_or(0.0));
    }
    Some((precisions, recalls))
}

fn threshold_index(thresholds: &[f64], t: f64) -> Option<usize> {
    thresholds.iter().position(|&x| (x - t).abs() < 1e-9)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// COCO-style keypoint AP / AR with greedy per-image matching.
///
/// Predictions are ordered by descending score, ties by ascending index;
/// each ground truth is matched at most once per threshold, preferring the
/// highest OKS and, on ties, the lowest index.
pub fn average_precision(
    preds: &[UnifiedInstance],
    gts: &[UnifiedInstance],
    params: &OksParams,
    subset: &[usize],
    thresholds: &[f64],
    union: &UnionSchema,
) -> EvalReport {
    let mut means = BTreeMap::new();
    for (suffix, range) in [("", AREA_ALL), ("_M", AREA_M), ("_L", AREA_L)] {
        let (ap, ar) = match ap_for_range(preds, gts, params, subset, thresholds, range) {
            Some((p, r)) => (p, r),
            None => (vec![0.0; thresholds.len()], vec![0.0; thresholds.len()]),
        };
        means.insert(format!("AP{suffix}"), mean(&ap));
        means.insert(format!("AR{suffix}"), mean(&ar));
        if suffix.is_empty() {
            for (t, tag) in [(0.5, "50"), (0.75, "75")] {
                if let Some(i) = threshold_index(thresholds, t) {
                    means.insert(format!("AP{tag}"), ap[i]);
                    means.insert(format!("AR{tag}"), ar[i]);
                }
            }
        }
    }

    // Per-keypoint similarity, averaged over same-image (pred, gt) pairs
    // taken at the best OKS for each gt.
    let mut sums = vec![0.0; union.len()];
    let mut counts = vec![0usize; union.len()];
    let mut labeled_kpts = 0;
    let mut scored = 0;
    for gt in gts {
        let labeled: Vec<usize> = subset.iter().copied().filter(|&k| gt.mask[k]).collect();
        if labeled.is_empty() {
            continue;
        }
        scored += 1;
        labeled_kpts += labeled.len();
        let best = preds
            .iter()
            .filter(|p| p.image_id == gt.image_id)
            .filter_map(|p| oks(p, gt, params, subset).map(|s| (s, p)))
            .fold(None::<(f64, &UnifiedInstance)>, |acc, (s, p)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, p)),
            });
        for &k in &labeled {
            counts[k] += 1;
            if let Some((_, p)) = best {
                if p.mask[k] {
                    let s = params.sigmas[k];
                    sums[k] += (-dist2(p.coords[k], gt.coords[k]) / (2.0 * gt.area * s * s)).exp();
                }
            }
        }
    }
    let per_keypoint = subset
        .iter()
        .map(|&k| KeypointScore {
            name: union.keypoints()[k].to_string(),
            score: if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 },
            count: counts[k],
        })
        .collect();

    EvalReport {
        metric: "ap".into(),
        per_keypoint,
        means,
        counts: EvalCounts {
            instances: scored,
            keypoints: labeled_kpts,
            predictions: preds.len(),
            skipped: gts.len() - scored,
        },
    }
}

fn normalizer(gt: &UnifiedInstance, cfg: &PckConfig, union: &UnionSchema) -> Option<f64> {
    let seg = |a: &str, b: &str| {
        let (a, b) = (union.index_of(a)?, union.index_of(b)?);
        (gt.mask[a] && gt.mask[b]).then(|| dist2(gt.coords[a], gt.coords[b]).sqrt())
    };
    let n = match cfg.normalizer {
        Normalizer::HeadSegment => cfg.head_scale * seg("head_top", "upper_neck")?,
        Normalizer::Torso => seg("left_shoulder", "right_hip")?,
        Normalizer::BboxDiag => (gt.bbox[2] * gt.bbox[2] + gt.bbox[3] * gt.bbox[3]).sqrt(),
    };
    (n > 0.0).then_some(n)
}

/// Joint groups used in per-joint PCK tables.
pub const PCK_GROUPS: [(&str, &[&str]); 7] = [
    ("Head", &["head_top", "upper_neck"]),
    ("Shoulder", &["left_shoulder", "right_shoulder"]),
    ("Elbow", &["left_elbow", "right_elbow"]),
    ("Wrist", &["left_wrist", "right_wrist"]),
    ("Hip", &["left_hip", "right_hip"]),
    ("Knee", &["left_knee", "right_knee"]),
    ("Ankle", &["left_ankle", "right_ankle"]),
];

/// Fraction of labeled ground-truth keypoints whose prediction lies within
/// `threshold * normalizer` (inclusive). `preds[i]` pairs with `gts[i]`.
pub fn pck(
    preds: &[UnifiedInstance],
    gts: &[UnifiedInstance],
    cfg: &PckConfig,
    subset: &[usize],
    union: &UnionSchema,
) -> Result<EvalReport, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::Unpaired(preds.len(), gts.len()));
    }
    let mut hits = vec![0usize; union.len()];
    let mut counts = vec![0usize; union.len()];
    let mut counted = EvalCounts {
        predictions: preds.len(),
        ..EvalCounts::default()
    };
    for (p, g) in preds.iter().zip(gts) {
        let Some(norm) = normalizer(g, cfg, union) else {
            counted.skipped += 1;
            continue;
        };
        let radius = cfg.threshold * norm;
        let mut any = false;
        for &k in subset {
            if !g.mask[k] {
                continue;
            }
            any = true;
            counts[k] += 1;
            counted.keypoints += 1;
            if p.mask[k] && dist2(p.coords[k], g.coords[k]).sqrt() <= radius {
                hits[k] += 1;
            }
        }
        if any {
            counted.instances += 1;
        }
    }
    let frac = |k: usize| hits[k] as f64 / counts[k] as f64;
    let per_keypoint: Vec<KeypointScore> = subset
        .iter()
        .map(|&k| KeypointScore {
            name: union.keypoints()[k].to_string(),
            score: if counts[k] > 0 { frac(k) } else { 0.0 },
            count: counts[k],
        })
        .collect();
    let scored: Vec<f64> = subset
        .iter()
        .filter(|&&k| counts[k] > 0)
        .map(|&k| frac(k))
        .collect();
    let mut means = BTreeMap::new();
    means.insert(
        "PCK".to_string(),
        if scored.is_empty() { 0.0 } else { mean(&scored) },
    );
    for (group, names) in PCK_GROUPS {
        let (h, c) = names
            .iter()
            .filter_map(|n| union.index_of(n))
            .filter(|s| subset.contains(s))
            .fold((0, 0), |(h, c), s| (h + hits[s], c + counts[s]));
        if c > 0 {
            means.insert(group.to_string(), h as f64 / c as f64);
        }
    }
    let metric = match cfg.normalizer {
        Normalizer::HeadSegment => "pckh",
        _ => "pck",
    };
    Ok(EvalReport {
        metric: metric.into(),
        per_keypoint,
        means,
        counts: counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::coco_mpii_union;

    fn person(image_id: u64, coords: Vec<[f64; 2]>, area: f64) -> UnifiedInstance {
        let n = coords.len();
        UnifiedInstance {
            image_id,
            bbox: [0.0, 0.0, area.sqrt(), area.sqrt()],
            area,
            coords,
            mask: vec![true; n],
            vis: vec![2; n],
            score: Some(1.0),
        }
    }

    fn grid_pose(offset: f64) -> Vec<[f64; 2]> {
        (0..21).map(|k| [offset + 10.0 * k as f64, 5.0 * k as f64]).collect()
    }

    #[test]
    fn oks_identity_and_analytic_point() {
        let union = coco_mpii_union();
        let params = OksParams::defaults(&union);
        let gt = person(1, grid_pose(0.0), 5000.0);
        let all: Vec<usize> = (0..21).collect();
        assert_eq!(oks(&gt, &gt, &params, &all), Some(1.0));

        let k = 7;
        let d = params.sigmas[k] * (2.0 * gt.area).sqrt();
        let mut pred = gt.clone();
        pred.coords[k][0] += d;
        let v = oks(&pred, &gt, &params, &[k]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn oks_no_labeled_is_none() {
        let union = coco_mpii_union();
        let params = OksParams::defaults(&union);
        let mut gt = person(1, grid_pose(0.0), 5000.0);
        gt.mask[0] = false;
        assert_eq!(oks(&gt, &gt, &params, &[0]), None);
    }

    #[test]
    fn default_sigmas_match_pycocotools_scale() {
        let union = coco_mpii_union();
        let p = OksParams::defaults(&union);
        assert_eq!(p.sigmas[0], 0.052);
        assert_eq!(p.sigmas[union.slot("pelvis")], p.sigmas[union.slot("left_hip")]);
        assert_eq!(p.sigmas[union.slot("head_top")], p.sigmas[union.slot("left_ear")]);
        let o = OksParams::from_json(br#"{"sigmas":{"thorax":0.5}}"#, &union).unwrap();
        assert_eq!(o.sigmas[union.slot("thorax")], 0.5);
        assert!(OksParams::from_json(br#"{"sigmas":{"tail":0.5}}"#, &union).is_err());
        assert!(OksParams::from_json(br#"{"sigmas":{"nose":-1}}"#, &union).is_err());
    }

    #[test]
    fn perfect_predictions_give_unit_ap_ar() {
        let union = coco_mpii_union();
        let params = OksParams::defaults(&union);
        let gts: Vec<_> = (0..6)
            .map(|i| person(i / 2, grid_pose(i as f64 * 300.0), [500.0, 5000.0, 20000.0][i as usize % 3]))
            .collect();
        let all: Vec<usize> = (0..21).collect();
        let r = average_precision(&gts, &gts, &params, &all, &coco_thresholds(), &union);
        for key in ["AP", "AP50", "AP75", "AR", "AR50", "AR75", "AP_M", "AP_L", "AR_M", "AR_L"] {
            assert_eq!(r.mean(key), Some(1.0), "{key}");
        }
    }

    #[test]
    fn no_predictions_give_zero_ap() {
        let union = coco_mpii_union();
        let params = OksParams::defaults(&union);
        let gts = vec![person(0, grid_pose(0.0), 5000.0)];
        let all: Vec<usize> = (0..21).collect();
        let r = average_precision(&[], &gts, &params, &all, &coco_thresholds(), &union);
        assert_eq!(r.mean("AP"), Some(0.0));
        assert_eq!(r.mean("AR"), Some(0.0));
        let empty = average_precision(&[], &[], &params, &all, &coco_thresholds(), &union);
        assert_eq!(empty.counts.instances, 0);
    }

    #[test]
    fn duplicate_prediction_is_false_positive() {
        let union = coco_mpii_union();
        let params = OksParams::defaults(&union);
        let gt = person(0, grid_pose(0.0), 5000.0);
        let mut dup = gt.clone();
        dup.score = Some(2.0);
        let all: Vec<usize> = (0..21).collect();
        let r = average_precision(&[gt.clone(), dup], &[gt], &params, &all, &coco_thresholds(), &union);
        // first detection in score order matches, so precision stays 1 at full recall
        assert_eq!(r.mean("AP"), Some(1.0));
    }

    #[test]
    fn pck_boundary_is_inclusive() {
        let union = coco_mpii_union();
        let all: Vec<usize> = (0..21).collect();
        let gt = person(0, grid_pose(0.0), 100.0 * 100.0);
        let mut pred = gt.clone();
        // bbox diag of a 3x4 box is 5; threshold 0.2 gives radius exactly 1
        let mut gt = gt;
        gt.bbox = [0.0, 0.0, 3.0, 4.0];
        pred.coords[0][0] += 1.0;
        pred.coords[1][0] += 1.0 + 1e-9;
        let r = pck(&[pred], &[gt], &PckConfig::bbox(0.2), &all, &union).unwrap();
        assert_eq!(r.keypoint("nose"), Some(1.0));
        assert_eq!(r.keypoint("left_eye"), Some(0.0));
    }

    #[test]
    fn pckh_needs_head_segment() {
        let union = coco_mpii_union();
        let all: Vec<usize> = (0..21).collect();
        let mut gt = person(0, grid_pose(0.0), 100.0);
        gt.mask[union.slot("head_top")] = false;
        let r = pck(&[gt.clone()], &[gt], &PckConfig::pckh(0.5), &all, &union).unwrap();
        assert_eq!(r.counts.skipped, 1);
        assert_eq!(r.counts.instances, 0);
    }

    #[test]
    fn subsets() {
        let union = coco_mpii_union();
        assert_eq!(subset_slots(&union, Subset::All).len(), 21);
        assert_eq!(subset_slots(&union, Subset::Coco).len(), 17);
        assert_eq!(subset_slots(&union, Subset::Mpii).len(), 16);
        assert_eq!(subset_slots(&union, Subset::Shared).len(), 12);
        assert!("bogus".parse::<Subset>().is_err());
    }
}
