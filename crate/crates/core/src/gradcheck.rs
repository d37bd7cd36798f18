//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random small problems, compares every analytic partial
//! derivative with `(f(x + h) - f(x - h)) / 2h` and records the worst
//! relative error `|a - n| / max(|a|, |n|, FLOOR * max(1, |f|))`.
//!
//! The floor grows with `|f|` because the rounding noise of a central
//! difference is about `eps * |f| / h`: derivatives far below that cannot be
//! resolved to relative precision and are effectively compared absolutely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::UnifiedInstance;
use crate::losses::{
    conditional_keypoint_loss, kl_distill_loss_with, logit_gradient, soft_argmax_decode, softmax,
    total_loss_with, KeypointDistribution, KlDirection, KlOptions, LossWeights, StudentPrediction,
    TeacherPrediction,
};
use crate::model::StudentModel;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative floor of the error denominator, per unit of `max(1, |f|)`.
pub const FLOOR: f64 = 1e-3;

/// Deliberate corruption of one analytic gradient, used to prove the
/// checker catches errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    None,
    /// Flip the sign of the conditional keypoint gradient.
    FlipKeypointSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub cases: usize,
    pub step: f64,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            cases: 1000,
            step: DEFAULT_STEP,
            seed: 0,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.max_rel_error <= tol)
    }
}

#[derive(Default)]
struct Tally {
    entries: usize,
    rel: f64,
    abs: f64,
}

impl Tally {
    fn push(&mut self, analytic: f64, numeric: f64, value: f64) {
        let mut abs = (analytic - numeric).abs();
        if abs.is_nan() {
            abs = f64::INFINITY;
        }
        let rel = abs / analytic.abs().max(numeric.abs()).max(FLOOR * value.abs().max(1.0));
        self.entries += 1;
        self.rel = self.rel.max(rel);
        self.abs = self.abs.max(abs);
    }

    fn finish(self, name: &str, cases: usize) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            cases,
            entries: self.entries,
            max_rel_error: self.rel,
            max_abs_error: self.abs,
        }
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

struct Problem {
    keypoints: usize,
    bins: usize,
    logits: Vec<f64>,
    gt: UnifiedInstance,
    teachers: Vec<TeacherPrediction>,
    weights: LossWeights,
    opts: KlOptions,
}

fn random_problem(rng: &mut ChaCha8Rng) -> Problem {
    let keypoints = rng.random_range(1..=5);
    let bins = rng.random_range(2..=12);
    let logits = (0..keypoints * 2 * bins)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let mut gt = UnifiedInstance::empty(0, [0.0, 0.0, 1.0, 1.0], 1.0, keypoints);
    for k in 0..keypoints {
        if rng.random_bool(0.6) {
            gt.mask[k] = true;
            gt.vis[k] = 2;
            gt.coords[k] = [rng.random(), rng.random()];
        }
    }
    let mut teachers = Vec::new();
    let mut betas = Vec::new();
    for j in 0..rng.random_range(0..=2) {
        let id = format!("t{j}");
        let covered: Vec<usize> = (0..keypoints).filter(|_| rng.random_bool(0.6)).collect();
        let dists = covered
            .iter()
            .map(|_| {
                let mut axis = || {
                    let z: Vec<f64> = (0..bins).map(|_| rng.random_range(-2.0..2.0)).collect();
                    softmax(&z)
                };
                KeypointDistribution { x: axis(), y: axis() }
            })
            .collect();
        betas.push((id.clone(), rng.random_range(0.0..1.0)));
        teachers.push(TeacherPrediction {
            teacher_id: id,
            covered,
            dists,
        });
    }
    let opts = KlOptions {
        direction: if rng.random_bool(0.5) {
            KlDirection::TeacherTarget
        } else {
            KlDirection::StudentTarget
        },
        temperature: if rng.random_bool(0.5) {
            1.0
        } else {
            rng.random_range(0.5..3.0)
        },
    };
    Problem {
        keypoints,
        bins,
        logits,
        gt,
        weights: LossWeights::new(rng.random_range(0.0..=1.0), betas).expect("valid weights"),
        teachers,
        opts,
    }
}

impl Problem {
    fn pred(&self, logits: &[f64]) -> StudentPrediction {
        StudentPrediction::from_logits(self.keypoints, self.bins, logits.to_vec()).expect("shape")
    }

    fn with_logit(&self, i: usize, v: f64) -> StudentPrediction {
        let mut l = self.logits.clone();
        l[i] = v;
        self.pred(&l)
    }
}

fn check_keypoint_loss(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::default();
    let sign = if opts.fault == Fault::FlipKeypointSign { -1.0 } else { 1.0 };
    for _ in 0..opts.cases {
        let p = random_problem(rng);
        let pred = p.pred(&p.logits);
        let (value, grad) = conditional_keypoint_loss(&pred, &p.gt).expect("shapes agree");
        for k in 0..p.keypoints {
            for a in 0..2 {
                let f = |v: f64| {
                    let mut q = pred.clone();
                    q.coords[k][a] = v;
                    conditional_keypoint_loss(&q, &p.gt).expect("shapes agree").0
                };
                tally.push(sign * grad[k][a], central(f, pred.coords[k][a], opts.step), value);
            }
        }
    }
    tally.finish("conditional_keypoint_loss", opts.cases)
}

fn check_distill_loss(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::default();
    let mut cases = 0;
    while cases < opts.cases {
        let p = random_problem(rng);
        let Some(teacher) = p.teachers.first() else {
            continue;
        };
        cases += 1;
        let (value, grad) = kl_distill_loss_with(&p.pred(&p.logits), teacher, p.opts).expect("valid");
        for (i, &g) in grad.iter().enumerate() {
            let f = |v: f64| kl_distill_loss_with(&p.with_logit(i, v), teacher, p.opts).expect("valid").0;
            tally.push(g, central(f, p.logits[i], opts.step), value);
        }
    }
    tally.finish("kl_distill_loss", cases)
}

fn check_soft_argmax(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::default();
    for _ in 0..opts.cases {
        let bins = rng.random_range(2..=16);
        let logits: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..bins).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let dist = |lx: &[f64], ly: &[f64]| KeypointDistribution {
            x: softmax(lx),
            y: softmax(ly),
        };
        let (coord, jac) = soft_argmax_decode(&dist(&logits[0], &logits[1]));
        for a in 0..2 {
            for b in 0..bins {
                let f = |v: f64| {
                    let mut l = logits.clone();
                    l[a][b] = v;
                    soft_argmax_decode(&dist(&l[0], &l[1])).0[a]
                };
                tally.push(jac[a][b], central(f, logits[a][b], opts.step), coord[a]);
            }
        }
    }
    tally.finish("soft_argmax", opts.cases)
}

fn check_total_loss(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::default();
    let sign = if opts.fault == Fault::FlipKeypointSign { -1.0 } else { 1.0 };
    for _ in 0..opts.cases {
        let p = random_problem(rng);
        let value = |pred: &StudentPrediction| {
            total_loss_with(pred, &p.gt, &p.teachers, &p.weights, p.opts)
                .expect("valid")
        };
        let pred = p.pred(&p.logits);
        let tl = value(&pred);
        let coords: Vec<[f64; 2]> = tl.grad_coords.iter().map(|g| [sign * g[0], sign * g[1]]).collect();
        let grad = logit_gradient(&pred, &coords, &tl.grad_logits);
        for (i, &g) in grad.iter().enumerate() {
            let f = |v: f64| value(&p.with_logit(i, v)).value;
            tally.push(g, central(f, p.logits[i], opts.step), tl.value);
        }
    }
    tally.finish("total_loss", opts.cases)
}

fn check_model_backward(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::default();
    for _ in 0..opts.cases {
        let d_in = rng.random_range(1..=5);
        let hidden = rng.random_range(1..=6);
        let keypoints = rng.random_range(1..=2);
        let bins = rng.random_range(2..=5);
        let model = StudentModel::new(d_in, hidden, keypoints, bins, rng.random());
        let z: Vec<f64> = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..model.out_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Scalar objective whose logit gradient is exactly `up`.
        let objective = |m: &StudentModel| -> f64 {
            m.forward(&z)
                .expect("shape")
                .logits
                .iter()
                .zip(&up)
                .map(|(l, u)| l * u)
                .sum()
        };
        let analytic = model.backward(&z, &up).expect("shape").flatten();
        let flat = model.flatten();
        let at = objective(&model);
        for (i, &g) in analytic.iter().enumerate() {
            let f = |v: f64| {
                let mut m = model.clone();
                let mut w = flat.clone();
                w[i] = v;
                m.set_flat(&w).expect("shape");
                objective(&m)
            };
            tally.push(g, central(f, flat[i], opts.step), at);
        }
    }
    tally.finish("model_backward", opts.cases)
}

/// Runs all five checks.
pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let checks = vec![
        check_keypoint_loss(opts, &mut rng),
        check_distill_loss(opts, &mut rng),
        check_soft_argmax(opts, &mut rng),
        check_total_loss(opts, &mut rng),
        check_model_backward(opts, &mut rng),
    ];
    GradcheckReport {
        step: opts.step,
        checks,
    }
}
