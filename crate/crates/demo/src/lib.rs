//! Browser demo: skeleton union, loss and OKS explorers.
//!
//! Each explorer is a plain function returning JSON so it can be tested
//! natively; the `#[wasm_bindgen]` wrappers only translate errors.

use posemerge::losses::{total_loss_with, KlOptions, LossWeights, StudentPrediction};
use posemerge::metrics::{oks, OksParams};
use posemerge::model::{gaussian_bins, teacher_predict, TeacherOracle};
use posemerge::schema::{build_union, SchemaRegistry, UnionSchema};
use posemerge::synth::{PoseMap, SyntheticPoseGenerator};
use posemerge::UnifiedInstance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub const BINS: usize = 64;

/// Limbs drawn between named union slots.
const EDGES: [(&str, &str); 22] = [
    ("head_top", "upper_neck"),
    ("upper_neck", "thorax"),
    ("thorax", "pelvis"),
    ("nose", "left_eye"),
    ("nose", "right_eye"),
    ("left_eye", "left_ear"),
    ("right_eye", "right_ear"),
    ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_hip", "right_hip"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
    ("left_big_toe", "left_ankle"),
    ("right_big_toe", "right_ankle"),
    ("head", "neck"),
];

fn union_of(a: &str, b: &str) -> Result<UnionSchema, String> {
    if a == b {
        return Err(format!("pick two different schemas (both are {a})"));
    }
    let registry = SchemaRegistry::builtin();
    let sa = registry.get(a).map_err(|e| e.to_string())?.clone();
    let sb = registry.get(b).map_err(|e| e.to_string())?.clone();
    build_union(&[sa, sb]).map_err(|e| e.to_string())
}

fn sample_pose(union: &UnionSchema, seed: u64, spread: f64) -> Vec<[f64; 2]> {
    let gen = SyntheticPoseGenerator {
        spread,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..gen.latent_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    PoseMap::new(&gen, union).pose(&u)
}

fn truth_instance(coords: Vec<[f64; 2]>) -> UnifiedInstance {
    let mut gt = UnifiedInstance::empty(1, [0.0, 0.0, 1.0, 1.0], 1.0, coords.len());
    gt.mask.fill(true);
    gt.vis.fill(2);
    gt.coords = coords;
    gt
}

/// The union of two builtin schemas with a sampled pose laid on it.
pub fn skeleton_json(a: &str, b: &str, seed: u64, spread: f64) -> Result<String, String> {
    let union = union_of(a, b)?;
    let pose = sample_pose(&union, seed, spread);
    let slots: Vec<Value> = union
        .keypoints()
        .iter()
        .zip(union.provenance())
        .zip(&pose)
        .enumerate()
        .map(|(slot, ((name, sources), p))| {
            json!({"slot": slot, "name": name.as_str(), "sources": sources, "x": p[0], "y": p[1]})
        })
        .collect();
    let edges: Vec<[usize; 2]> = EDGES
        .iter()
        .filter_map(|(p, q)| Some([union.index_of(p)?, union.index_of(q)?]))
        .collect();
    let shared = union.provenance().iter().filter(|s| s.len() > 1).count();
    Ok(json!({
        "a": a, "b": b, "count": union.len(), "shared": shared,
        "only_a": union.slots_of(a).len() - shared,
        "only_b": union.slots_of(b).len() - shared,
        "slots": slots, "edges": edges,
    })
    .to_string())
}

/// Loss settings picked in the loss explorer.
#[derive(Debug, Clone, Copy)]
pub struct LossKnobs {
    pub alpha: f64,
    pub beta_mpii: f64,
    pub beta_coco: f64,
    /// Student offset from the truth, in bins.
    pub shift_bins: f64,
    /// Student Gaussian width, in bins.
    pub width_bins: f64,
    pub temperature: f64,
    /// Label the instance as an MPII sample (else COCO).
    pub from_mpii: bool,
}

/// Weighted objective for one synthetic instance whose student prediction is
/// a shifted Gaussian, with both teachers distilling into it.
pub fn loss_json(seed: u64, k: LossKnobs, focus: &str) -> Result<String, String> {
    let union = union_of("coco17", "mpii16")?;
    let truth = truth_instance(sample_pose(&union, seed, 0.13));
    let shift = k.shift_bins / BINS as f64;
    let mut logits = Vec::with_capacity(union.len() * 2 * BINS);
    for c in &truth.coords {
        for axis in 0..2 {
            let d = gaussian_bins(c[axis] + shift, k.width_bins.max(0.05), BINS);
            logits.extend(d.iter().map(|p| p.max(1e-300).ln()));
        }
    }
    let pred = StudentPrediction::from_logits(union.len(), BINS, logits).map_err(|e| e.to_string())?;

    let mut labels = truth.clone();
    let own = union.slots_of(if k.from_mpii { "mpii16" } else { "coco17" });
    for s in 0..union.len() {
        labels.mask[s] = own.contains(&s);
    }
    let teachers: Vec<TeacherOracle> = [("mpii", "mpii16", 1u64), ("coco", "coco17", 2)]
        .iter()
        .map(|&(id, schema, seed)| TeacherOracle {
            teacher_id: id.into(),
            covered: union.slots_of(schema),
            concentration: 1.5,
            noise: 0.005,
            seed,
            bins: BINS,
        })
        .collect();
    let outputs: Vec<_> = teachers.iter().map(|t| teacher_predict(t, &truth)).collect();
    let weights = LossWeights::new(
        k.alpha,
        [("mpii".to_string(), k.beta_mpii), ("coco".to_string(), k.beta_coco)],
    )
    .map_err(|e| e.to_string())?;
    let opts = KlOptions {
        temperature: k.temperature,
        ..Default::default()
    };
    let tl = total_loss_with(&pred, &labels, &outputs, &weights, opts).map_err(|e| e.to_string())?;

    let slot = union.index_of(focus).ok_or_else(|| format!("unknown keypoint {focus:?}"))?;
    let teacher_x: Vec<Value> = outputs
        .iter()
        .filter_map(|o| o.dist_for(slot).map(|d| json!({"id": o.teacher_id, "p": d.x})))
        .collect();
    let distill: serde_json::Map<String, Value> = tl.distill.iter().map(|(id, v)| (id.clone(), json!(v))).collect();
    let weighted: serde_json::Map<String, Value> = tl
        .distill
        .iter()
        .map(|(id, v)| {
            let beta = weights.beta(id).unwrap_or(0.0);
            (id.clone(), json!((1.0 - k.alpha) * beta * v))
        })
        .collect();
    Ok(json!({
        "keypoint": tl.keypoint,
        "keypoint_term": k.alpha * tl.keypoint,
        "distill": distill,
        "distill_terms": weighted,
        "total": tl.value,
        "labeled": labels.mask,
        "focus": {"name": focus, "labeled": labels.mask[slot], "truth_x": truth.coords[slot][0],
                  "student_x": pred.dists[slot].x, "teachers": teacher_x},
    })
    .to_string())
}

/// OKS and per-keypoint similarity of a prediction displaced by `(dx, dy)`
/// (in units of `sqrt(area)`) from a sampled person.
pub fn oks_json(seed: u64, dx: f64, dy: f64, area: f64, jitter: f64) -> Result<String, String> {
    if !(area > 0.0) {
        return Err(format!("area must be positive, got {area}"));
    }
    let union = union_of("coco17", "mpii16")?;
    let side = area.sqrt();
    let pose = sample_pose(&union, seed, 0.13);
    let mut gt = truth_instance(pose.iter().map(|p| [p[0] * side, p[1] * side]).collect());
    gt.bbox = [0.0, 0.0, side, side];
    gt.area = area;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pred = gt.clone();
    for c in &mut pred.coords {
        let (jx, jy): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        c[0] += (dx + jitter * jx) * side;
        c[1] += (dy + jitter * jy) * side;
    }
    let params = OksParams::defaults(&union);
    let all: Vec<usize> = (0..union.len()).collect();
    let per: Vec<Value> = all
        .iter()
        .map(|&k| {
            let s = oks(&pred, &gt, &params, &[k]).unwrap_or(0.0);
            json!({"name": union.keypoints()[k].as_str(), "k": params.sigmas[k], "similarity": s,
                   "gt": gt.coords[k], "pred": pred.coords[k]})
        })
        .collect();
    let score = |src: &str| oks(&pred, &gt, &params, &union.slots_of(src));
    Ok(json!({
        "oks": oks(&pred, &gt, &params, &all),
        "oks_coco": score("coco17"),
        "oks_mpii": score("mpii16"),
        "side": side,
        "keypoints": per,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn skeleton(a: &str, b: &str, seed: u32, spread: f64) -> Result<String, JsError> {
    skeleton_json(a, b, seed.into(), spread).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn loss(
    seed: u32,
    alpha: f64,
    beta_mpii: f64,
    beta_coco: f64,
    shift_bins: f64,
    width_bins: f64,
    temperature: f64,
    from_mpii: bool,
    focus: &str,
) -> Result<String, JsError> {
    let knobs = LossKnobs {
        alpha,
        beta_mpii,
        beta_coco,
        shift_bins,
        width_bins,
        temperature,
        from_mpii,
    };
    loss_json(seed.into(), knobs, focus).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = oksExplorer)]
pub fn oks_explorer(seed: u32, dx: f64, dy: f64, area: f64, jitter: f64) -> Result<String, JsError> {
    oks_json(seed.into(), dx, dy, area, jitter).map_err(|e| JsError::new(&e))
}
