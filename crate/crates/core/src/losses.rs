//! Training objective: conditional keypoint loss, per-teacher KL distillation
//! and their weighted sum, each with an analytic gradient.
//!
//! Keypoints are represented the coordinate-classification way: per keypoint
//! one categorical distribution over `bins` x-positions and one over
//! y-positions, bin `b` centred at `(b + 0.5) / bins` in the unit frame of the
//! instance bbox. Coordinates are read off with a soft-argmax.
//!
//! Logit layout everywhere is `[keypoint][axis][bin]`, flattened.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::UnifiedInstance;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("teacher {0:?} has no beta weight")]
    UnknownTeacher(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("teacher {teacher:?} assigns zero mass to slot {slot} bin {bin}; student-target KL is infinite")]
    TeacherZeroBin {
        teacher: String,
        slot: usize,
        bin: usize,
    },
}

pub const AXES: usize = 2;

/// Centre of bin `b` out of `bins` in the unit interval.
pub fn bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) / bins as f64
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `z - logsumexp(z)`, finite even where `softmax` underflows to zero.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `KL(target || approx)` with `0 * log 0 = 0`.
pub fn kl_divergence(target: &[f64], approx: &[f64]) -> f64 {
    target
        .iter()
        .zip(approx)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - p.ln()))
        .sum()
}

/// Per-keypoint pair of axis distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointDistribution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl KeypointDistribution {
    pub fn uniform(bins: usize) -> Self {
        let p = vec![1.0 / bins as f64; bins];
        Self { x: p.clone(), y: p }
    }

    pub fn point_mass(bx: usize, by: usize, bins: usize) -> Self {
        let mut x = vec![0.0; bins];
        let mut y = vec![0.0; bins];
        x[bx] = 1.0;
        y[by] = 1.0;
        Self { x, y }
    }

    pub fn axis(&self, axis: usize) -> &[f64] {
        if axis == 0 {
            &self.x
        } else {
            &self.y
        }
    }

    pub fn bins(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, p) in [("x", &self.x), ("y", &self.y)] {
            if p.len() < 2 {
                return Err(LossError::InvalidDistribution(format!(
                    "{name} axis has {} bins, need at least 2",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(LossError::InvalidDistribution(format!(
                    "{name} axis has a negative or non-finite entry"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidDistribution(format!(
                    "{name} axis sums to {sum}"
                )));
            }
        }
        if self.x.len() != self.y.len() {
            return Err(LossError::InvalidDistribution(
                "x and y axes differ in bin count".into(),
            ));
        }
        Ok(())
    }
}

/// Soft-argmax coordinate of each axis and its derivative with respect to
/// that axis' logits: `d coord / d logit_b = p_b (c_b - coord)`.
pub fn soft_argmax_decode(d: &KeypointDistribution) -> ([f64; 2], [Vec<f64>; 2]) {
    let decode = |p: &[f64]| {
        let bins = p.len();
        let coord: f64 = p
            .iter()
            .enumerate()
            .map(|(b, &pb)| pb * bin_center(b, bins))
            .sum();
        let jac = p
            .iter()
            .enumerate()
            .map(|(b, &pb)| pb * (bin_center(b, bins) - coord))
            .collect::<Vec<_>>();
        (coord, jac)
    };
    let (x, jx) = decode(&d.x);
    let (y, jy) = decode(&d.y);
    ([x, y], [jx, jy])
}

/// Student output for one instance: logits, their per-axis softmax, and the
/// decoded coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPrediction {
    pub bins: usize,
    pub logits: Vec<f64>,
    pub dists: Vec<KeypointDistribution>,
    pub coords: Vec<[f64; 2]>,
}

impl StudentPrediction {
    pub fn from_logits(keypoints: usize, bins: usize, logits: Vec<f64>) -> Result<Self, LossError> {
        if logits.len() != keypoints * AXES * bins {
            return Err(LossError::SizeMismatch(format!(
                "{} logits for {keypoints} keypoints x {AXES} axes x {bins} bins",
                logits.len()
            )));
        }
        let dists: Vec<KeypointDistribution> = logits
            .chunks_exact(AXES * bins)
            .map(|kp| KeypointDistribution {
                x: softmax(&kp[..bins]),
                y: softmax(&kp[bins..]),
            })
            .collect();
        let coords = dists.iter().map(|d| soft_argmax_decode(d).0).collect();
        Ok(Self {
            bins,
            logits,
            dists,
            coords,
        })
    }

    pub fn keypoints(&self) -> usize {
        self.coords.len()
    }

    fn offset(&self, k: usize, axis: usize) -> usize {
        (k * AXES + axis) * self.bins
    }

    pub fn axis_logits(&self, k: usize, axis: usize) -> &[f64] {
        let o = self.offset(k, axis);
        &self.logits[o..o + self.bins]
    }
}

/// Distributions a teacher produces for the union slots it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherPrediction {
    pub teacher_id: String,
    pub covered: Vec<usize>,
    pub dists: Vec<KeypointDistribution>,
}

impl TeacherPrediction {
    pub fn dist_for(&self, slot: usize) -> Option<&KeypointDistribution> {
        self.covered
            .iter()
            .position(|&s| s == slot)
            .map(|i| &self.dists[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub betas: BTreeMap<String, f64>,
}

impl LossWeights {
    pub fn new(alpha: f64, betas: impl IntoIterator<Item = (String, f64)>) -> Result<Self, LossError> {
        let w = Self {
            alpha,
            betas: betas.into_iter().collect(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidWeights(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if let Some((id, b)) = self.betas.iter().find(|(_, &b)| !(b >= 0.0)) {
            return Err(LossError::InvalidWeights(format!("beta for {id} is {b}")));
        }
        Ok(())
    }

    pub fn beta(&self, teacher_id: &str) -> Result<f64, LossError> {
        self.betas
            .get(teacher_id)
            .copied()
            .ok_or_else(|| LossError::UnknownTeacher(teacher_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher || student)`; gradient `p - t`.
    #[default]
    TeacherTarget,
    /// `KL(student || teacher)`.
    StudentTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlOptions {
    pub direction: KlDirection,
    /// Softmax temperature applied to the student logits inside the KL term.
    pub temperature: f64,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self {
            direction: KlDirection::TeacherTarget,
            temperature: 1.0,
        }
    }
}

/// The loss configuration block as stored in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub betas: BTreeMap<String, f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_bins() -> usize {
    64
}

fn default_temperature() -> f64 {
    1.0
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights, LossError> {
        LossWeights::new(self.alpha, self.betas.clone())
    }

    pub fn kl_options(&self) -> KlOptions {
        KlOptions {
            direction: self.kl_direction,
            temperature: self.temperature,
        }
    }
}

/// `sum over labeled k of ||p_k - g_k||^2`, with `g` already in the bbox
/// unit frame. The gradient is exactly zero on unlabeled slots.
pub fn conditional_keypoint_loss(
    pred: &StudentPrediction,
    gt: &UnifiedInstance,
) -> Result<(f64, Vec<[f64; 2]>), LossError> {
    if pred.keypoints() != gt.len() || gt.mask.len() != gt.len() {
        return Err(LossError::SizeMismatch(format!(
            "prediction has {} keypoints, ground truth {}",
            pred.keypoints(),
            gt.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![[0.0; 2]; gt.len()];
    for k in gt.labeled() {
        let dx = pred.coords[k][0] - gt.coords[k][0];
        let dy = pred.coords[k][1] - gt.coords[k][1];
        value += dx * dx + dy * dy;
        grad[k] = [2.0 * dx, 2.0 * dy];
    }
    Ok((value, grad))
}

pub fn kl_distill_loss(
    pred: &StudentPrediction,
    teacher: &TeacherPrediction,
) -> Result<(f64, Vec<f64>), LossError> {
    kl_distill_loss_with(pred, teacher, KlOptions::default())
}

/// Sum of per-axis KL terms over the teacher's covered slots, and the
/// gradient with respect to the student logits (zero off the covered slots).
pub fn kl_distill_loss_with(
    pred: &StudentPrediction,
    teacher: &TeacherPrediction,
    opts: KlOptions,
) -> Result<(f64, Vec<f64>), LossError> {
    if teacher.covered.len() != teacher.dists.len() {
        return Err(LossError::SizeMismatch(format!(
            "teacher {} lists {} slots but {} distributions",
            teacher.teacher_id,
            teacher.covered.len(),
            teacher.dists.len()
        )));
    }
    let bins = pred.bins;
    let tau = opts.temperature;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.logits.len()];
    for (&slot, dist) in teacher.covered.iter().zip(&teacher.dists) {
        if slot >= pred.keypoints() {
            return Err(LossError::SizeMismatch(format!(
                "teacher {} covers slot {slot}, student has {}",
                teacher.teacher_id,
                pred.keypoints()
            )));
        }
        if dist.bins() != bins {
            return Err(LossError::SizeMismatch(format!(
                "teacher {} uses {} bins, student {bins}",
                teacher.teacher_id,
                dist.bins()
            )));
        }
        for axis in 0..AXES {
            let t = dist.axis(axis);
            let p = if tau == 1.0 {
                pred.dists[slot].axis(axis).to_vec()
            } else {
                let scaled: Vec<f64> = pred.axis_logits(slot, axis).iter().map(|z| z / tau).collect();
                softmax(&scaled)
            };
            let g = &mut grad[pred.offset(slot, axis)..pred.offset(slot, axis) + bins];
            match opts.direction {
                KlDirection::TeacherTarget => {
                    let scaled: Vec<f64> = pred.axis_logits(slot, axis).iter().map(|z| z / tau).collect();
                    let log_p = log_softmax(&scaled);
                    value += t
                        .iter()
                        .zip(&log_p)
                        .filter(|(&tb, _)| tb > 0.0)
                        .map(|(&tb, &lp)| tb * (tb.ln() - lp))
                        .sum::<f64>();
                    for b in 0..bins {
                        g[b] = (p[b] - t[b]) / tau;
                    }
                }
                KlDirection::StudentTarget => {
                    if let Some(bin) = t.iter().position(|&tb| tb <= 0.0) {
                        return Err(LossError::TeacherZeroBin {
                            teacher: teacher.teacher_id.clone(),
                            slot,
                            bin,
                        });
                    }
                    let kl = kl_divergence(&p, t);
                    value += kl;
                    for b in 0..bins {
                        g[b] = p[b] * (p[b].ln() - t[b].ln() - kl) / tau;
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

/// Components and gradients of the weighted objective for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub keypoint: f64,
    /// Unweighted distillation loss per teacher, in input order.
    pub distill: Vec<(String, f64)>,
    pub grad_coords: Vec<[f64; 2]>,
    pub grad_logits: Vec<f64>,
}

pub fn total_loss(
    pred: &StudentPrediction,
    gt: &UnifiedInstance,
    teachers: &[TeacherPrediction],
    weights: &LossWeights,
) -> Result<TotalLoss, LossError> {
    total_loss_with(pred, gt, teachers, weights, KlOptions::default())
}

/// `alpha * L_ck + (1 - alpha) * sum_j beta_j * L_d(T_j)`.
pub fn total_loss_with(
    pred: &StudentPrediction,
    gt: &UnifiedInstance,
    teachers: &[TeacherPrediction],
    weights: &LossWeights,
    opts: KlOptions,
) -> Result<TotalLoss, LossError> {
    weights.validate()?;
    let alpha = weights.alpha;
    let (l_ck, g_ck) = conditional_keypoint_loss(pred, gt)?;
    let mut value = alpha * l_ck;
    let grad_coords = g_ck
        .iter()
        .map(|g| [alpha * g[0], alpha * g[1]])
        .collect();
    let mut grad_logits = vec![0.0; pred.logits.len()];
    let mut distill = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        let beta = weights.beta(&teacher.teacher_id)?;
        let (l_d, g_d) = kl_distill_loss_with(pred, teacher, opts)?;
        let w = (1.0 - alpha) * beta;
        value += w * l_d;
        for (acc, g) in grad_logits.iter_mut().zip(&g_d) {
            *acc += w * g;
        }
        distill.push((teacher.teacher_id.clone(), l_d));
    }
    Ok(TotalLoss {
        value,
        keypoint: l_ck,
        distill,
        grad_coords,
        grad_logits,
    })
}

/// Folds a coordinate gradient back onto the logits through the soft-argmax
/// and adds the direct logit gradient.
pub fn logit_gradient(
    pred: &StudentPrediction,
    grad_coords: &[[f64; 2]],
    grad_logits: &[f64],
) -> Vec<f64> {
    let bins = pred.bins;
    let mut out = grad_logits.to_vec();
    for (k, gc) in grad_coords.iter().enumerate() {
        for (axis, &g) in gc.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let p = pred.dists[k].axis(axis);
            let coord = pred.coords[k][axis];
            let o = pred.offset(k, axis);
            for b in 0..bins {
                out[o + b] += g * p[b] * (bin_center(b, bins) - coord);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    fn random_dist(rng: &mut ChaCha8Rng, bins: usize) -> KeypointDistribution {
        let x = softmax(&random_logits(rng, bins));
        let y = softmax(&random_logits(rng, bins));
        KeypointDistribution { x, y }
    }

    fn gt_with(coords: Vec<[f64; 2]>, mask: Vec<bool>) -> UnifiedInstance {
        UnifiedInstance {
            image_id: 0,
            bbox: [0.0, 0.0, 1.0, 1.0],
            area: 1.0,
            coords,
            vis: mask.iter().map(|&m| if m { 2 } else { 0 }).collect(),
            mask,
            score: None,
        }
    }

    #[test]
    fn softmax_is_normalised_and_shift_invariant() {
        // 1000 + ln 3 is only representable to ~1e-13.
        let p = softmax(&[1000.0, 1000.0 + 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let q = softmax(&[0.0, 3f64.ln()]);
        assert!((q[0] - 0.25).abs() < 1e-15 && (q[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[1e308, -1e308]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn soft_argmax_examples() {
        for bins in [2, 7, 64] {
            for b in [0, bins / 2, bins - 1] {
                let d = KeypointDistribution::point_mass(b, b, bins);
                let (c, _) = soft_argmax_decode(&d);
                assert_eq!(c[0], (b as f64 + 0.5) / bins as f64);
            }
            let (c, _) = soft_argmax_decode(&KeypointDistribution::uniform(bins));
            assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn ck_loss_three_four_five() {
        // one keypoint, B = 2: logits (0, ln 3) put the x coord at 0.625
        let pred = StudentPrediction::from_logits(1, 2, vec![0.0, 3f64.ln(), 0.0, 3f64.ln()]).unwrap();
        let p = pred.coords[0];
        let gt = gt_with(vec![[p[0] - 0.3, p[1] - 0.4]], vec![true]);
        let (v, g) = conditional_keypoint_loss(&pred, &gt).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ck_loss_identity_and_size_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = StudentPrediction::from_logits(3, 8, random_logits(&mut rng, 48)).unwrap();
        let gt = gt_with(pred.coords.clone(), vec![true, false, true]);
        let (v, g) = conditional_keypoint_loss(&pred, &gt).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|c| c == &[0.0, 0.0]));
        let short = gt_with(vec![[0.0; 2]; 2], vec![true; 2]);
        assert!(matches!(
            conditional_keypoint_loss(&pred, &short),
            Err(LossError::SizeMismatch(_))
        ));
    }

    #[test]
    fn kl_identity_and_uniform_vs_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bins = 16;
        let pred = StudentPrediction::from_logits(2, bins, random_logits(&mut rng, 2 * 2 * bins)).unwrap();
        let same = TeacherPrediction {
            teacher_id: "t".into(),
            covered: vec![0, 1],
            dists: pred.dists.clone(),
        };
        let (v, g) = kl_distill_loss(&pred, &same).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-15));

        let uniform = StudentPrediction::from_logits(1, bins, vec![0.0; 2 * bins]).unwrap();
        let point = TeacherPrediction {
            teacher_id: "t".into(),
            covered: vec![0],
            dists: vec![KeypointDistribution::point_mass(0, 0, bins)],
        };
        let (v, _) = kl_distill_loss(&uniform, &point).unwrap();
        assert!((v - 2.0 * (bins as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_uncovered_slots_get_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bins = 8;
        let pred = StudentPrediction::from_logits(4, bins, random_logits(&mut rng, 4 * 2 * bins)).unwrap();
        let t = TeacherPrediction {
            teacher_id: "t".into(),
            covered: vec![2],
            dists: vec![random_dist(&mut rng, bins)],
        };
        let (_, g) = kl_distill_loss(&pred, &t).unwrap();
        for k in [0, 1, 3] {
            assert!(g[k * 2 * bins..(k + 1) * 2 * bins].iter().all(|x| x.to_bits() == 0));
        }
    }

    #[test]
    fn kl_direction_and_temperature_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bins = 6;
        let h = 1e-6;
        for opts in [
            KlOptions { direction: KlDirection::StudentTarget, temperature: 1.0 },
            KlOptions { direction: KlDirection::TeacherTarget, temperature: 2.5 },
            KlOptions { direction: KlDirection::StudentTarget, temperature: 0.7 },
        ] {
            let logits = random_logits(&mut rng, 2 * 2 * bins);
            let t = TeacherPrediction {
                teacher_id: "t".into(),
                covered: vec![1],
                dists: vec![random_dist(&mut rng, bins)],
            };
            let f = |l: &[f64]| {
                let p = StudentPrediction::from_logits(2, bins, l.to_vec()).unwrap();
                kl_distill_loss_with(&p, &t, opts).unwrap().0
            };
            let pred = StudentPrediction::from_logits(2, bins, logits.clone()).unwrap();
            let (_, g) = kl_distill_loss_with(&pred, &t, opts).unwrap();
            for i in 0..logits.len() {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{opts:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn student_target_rejects_zero_teacher_bins() {
        let pred = StudentPrediction::from_logits(1, 4, vec![0.0; 8]).unwrap();
        let t = TeacherPrediction {
            teacher_id: "t".into(),
            covered: vec![0],
            dists: vec![KeypointDistribution::point_mass(1, 1, 4)],
        };
        let opts = KlOptions { direction: KlDirection::StudentTarget, temperature: 1.0 };
        assert!(matches!(
            kl_distill_loss_with(&pred, &t, opts),
            Err(LossError::TeacherZeroBin { slot: 0, bin: 0, .. })
        ));
    }

    #[test]
    fn total_loss_weight_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bins = 8;
        let pred = StudentPrediction::from_logits(3, bins, random_logits(&mut rng, 3 * 2 * bins)).unwrap();
        let gt = gt_with(vec![[0.2, 0.7], [0.5, 0.5], [0.9, 0.1]], vec![true, false, true]);
        let t = TeacherPrediction {
            teacher_id: "a".into(),
            covered: vec![0, 1],
            dists: vec![random_dist(&mut rng, bins), random_dist(&mut rng, bins)],
        };
        let (l_ck, _) = conditional_keypoint_loss(&pred, &gt).unwrap();
        let (l_d, _) = kl_distill_loss(&pred, &t).unwrap();

        let w1 = LossWeights::new(1.0, [("a".to_string(), 0.5)]).unwrap();
        let tot = total_loss(&pred, &gt, std::slice::from_ref(&t), &w1).unwrap();
        assert_eq!(tot.value, l_ck);
        assert!(tot.grad_logits.iter().all(|&g| g == 0.0));

        let w0 = LossWeights::new(0.0, [("a".to_string(), 1.0)]).unwrap();
        let tot = total_loss(&pred, &gt, std::slice::from_ref(&t), &w0).unwrap();
        assert_eq!(tot.value, l_d);

        let w = LossWeights::new(0.5, [("b".to_string(), 1.0)]).unwrap();
        assert_eq!(
            total_loss(&pred, &gt, &[t], &w).unwrap_err(),
            LossError::UnknownTeacher("a".into())
        );
        assert!(LossWeights::new(1.5, []).is_err());
        assert!(LossWeights::new(0.5, [("a".to_string(), -1.0)]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(KeypointDistribution::uniform(4).validate().is_ok());
        let bad = KeypointDistribution { x: vec![0.5, 0.6], y: vec![0.5, 0.5] };
        assert!(bad.validate().is_err());
        let one_bin = KeypointDistribution { x: vec![1.0], y: vec![1.0] };
        assert!(one_bin.validate().is_err());
    }

    #[test]
    fn loss_config_json_defaults() {
        let cfg: LossConfig = serde_json::from_str(r#"{"alpha":0.3,"betas":{"mpii":0.25,"coco":0.45}}"#).unwrap();
        assert_eq!(cfg.bins, 64);
        assert_eq!(cfg.kl_direction, KlDirection::TeacherTarget);
        assert_eq!(cfg.temperature, 1.0);
        let cfg: LossConfig = serde_json::from_str(
            r#"{"alpha":0.3,"betas":{},"bins":32,"kl_direction":"student_target","temperature":2.0}"#,
        )
        .unwrap();
        assert_eq!(cfg.kl_options().direction, KlDirection::StudentTarget);
    }
}
