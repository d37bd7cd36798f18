//! Small student network, teacher oracles and the momentum-SGD optimizer.
//!
//! The student is `logits = W2 tanh(W1 z + b1) + b2`, reshaped to
//! `[keypoint][axis][bin]`. Gradients are derived by hand.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::UnifiedInstance;
use crate::losses::{softmax, KeypointDistribution, LossError, StudentPrediction, TeacherPrediction, AXES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub keypoints: usize,
    pub bins: usize,
    /// `hidden x d_in`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `out x hidden`, `out = keypoints * 2 * bins`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept from a batched forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `n x hidden`, post-tanh
    pub hidden: Array2<f64>,
    /// `n x out`
    pub logits: Array2<f64>,
}

/// Parameter-shaped buffer: gradients, or the momentum velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ParamGrads {
    pub fn zeros_like(m: &StudentModel) -> Self {
        Self {
            w1: Array2::zeros(m.w1.raw_dim()),
            b1: Array1::zeros(m.b1.raw_dim()),
            w2: Array2::zeros(m.w2.raw_dim()),
            b2: Array1::zeros(m.b2.raw_dim()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        if self.w1.iter().any(|x| !x.is_finite()) {
            Some("w1")
        } else if self.b1.iter().any(|x| !x.is_finite()) {
            Some("b1")
        } else if self.w2.iter().any(|x| !x.is_finite()) {
            Some("w2")
        } else if self.b2.iter().any(|x| !x.is_finite()) {
            Some("b2")
        } else {
            None
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }
}

impl StudentModel {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation per layer.
    pub fn new(d_in: usize, hidden: usize, keypoints: usize, bins: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = keypoints * AXES * bins;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let w1 = uniform(hidden, d_in, d_in);
        let b1 = uniform(1, hidden, d_in).remove_axis(Axis(0));
        let w2 = uniform(out, hidden, hidden);
        let b2 = uniform(1, out, hidden).remove_axis(Axis(0));
        Self {
            keypoints,
            bins,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, keypoints: usize, bins: usize) -> Self {
        let out = keypoints * AXES * bins;
        Self {
            keypoints,
            bins,
            w1: Array2::zeros((hidden, d_in)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((out, hidden)),
            b2: Array1::zeros(out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.keypoints * AXES * self.bins
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for x in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *x = it.next().unwrap();
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<(), ModelError> {
        if cols != self.d_in() {
            return Err(ModelError::Shape(format!(
                "input has {cols} features, model expects {}",
                self.d_in()
            )));
        }
        Ok(())
    }

    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<BatchForward, ModelError> {
        self.check_input(inputs.ncols())?;
        let mut hidden = inputs.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut logits = hidden.dot(&self.w2.t());
        logits += &self.b2;
        Ok(BatchForward { hidden, logits })
    }

    pub fn prediction_from_logits(&self, logits: &[f64]) -> Result<StudentPrediction, ModelError> {
        Ok(StudentPrediction::from_logits(
            self.keypoints,
            self.bins,
            logits.to_vec(),
        )?)
    }

    pub fn forward(&self, z: &[f64]) -> Result<StudentPrediction, ModelError> {
        self.check_input(z.len())?;
        let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        let fwd = self.forward_batch(view)?;
        self.prediction_from_logits(fwd.logits.row(0).as_slice().expect("contiguous"))
    }

    /// Parameter gradients summed over the batch, given the loss gradient
    /// with respect to each row of logits.
    pub fn backward_batch(
        &self,
        inputs: ArrayView2<f64>,
        fwd: &BatchForward,
        upstream: ArrayView2<f64>,
    ) -> Result<ParamGrads, ModelError> {
        self.check_input(inputs.ncols())?;
        if upstream.dim() != fwd.logits.dim() {
            return Err(ModelError::Shape(format!(
                "upstream {:?} vs logits {:?}",
                upstream.dim(),
                fwd.logits.dim()
            )));
        }
        let w2 = upstream.t().dot(&fwd.hidden);
        let b2 = upstream.sum_axis(Axis(0));
        let mut grad_pre = upstream.dot(&self.w2);
        grad_pre.zip_mut_with(&fwd.hidden, |g, &h| *g *= 1.0 - h * h);
        let w1 = grad_pre.t().dot(&inputs);
        let b1 = grad_pre.sum_axis(Axis(0));
        Ok(ParamGrads { w1, b1, w2, b2 })
    }

    pub fn backward(&self, z: &[f64], upstream: &[f64]) -> Result<ParamGrads, ModelError> {
        self.check_input(z.len())?;
        if upstream.len() != self.out_dim() {
            return Err(ModelError::Shape(format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        let uv = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let fwd = self.forward_batch(zv)?;
        self.backward_batch(zv, &fwd, uv)
    }
}

/// Stand-in for a pretrained subset-expert network: emits a discretised
/// Gaussian around the (jittered) ground truth for each covered slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherOracle {
    pub teacher_id: String,
    pub covered: Vec<usize>,
    /// Gaussian width in bins.
    pub concentration: f64,
    /// Std of the coordinate jitter, in unit-frame coordinates.
    pub noise: f64,
    pub seed: u64,
    pub bins: usize,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Discretised Gaussian over `bins` centred at unit-frame coordinate `mu`.
pub fn gaussian_bins(mu: f64, width_bins: f64, bins: usize) -> Vec<f64> {
    let centre = mu * bins as f64 - 0.5;
    let logits: Vec<f64> = (0..bins)
        .map(|b| {
            let d = b as f64 - centre;
            -d * d / (2.0 * width_bins * width_bins)
        })
        .collect();
    softmax(&logits)
}

impl TeacherOracle {
    fn jitter(&self, image_id: u64, slot: usize) -> [f64; 2] {
        if self.noise == 0.0 {
            return [0.0, 0.0];
        }
        let key = splitmix64(splitmix64(self.seed ^ splitmix64(image_id)) ^ slot as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let normal = Normal::new(0.0, self.noise).expect("noise >= 0");
        [normal.sample(&mut rng), normal.sample(&mut rng)]
    }
}

/// Teacher output for one instance whose coordinates are in the bbox unit
/// frame. Covered slots that are unlabeled in `gt` are left out.
pub fn teacher_predict(t: &TeacherOracle, gt: &UnifiedInstance) -> TeacherPrediction {
    let mut covered = Vec::with_capacity(t.covered.len());
    let mut dists = Vec::with_capacity(t.covered.len());
    for &slot in &t.covered {
        if slot >= gt.len() || !gt.mask[slot] {
            continue;
        }
        let j = t.jitter(gt.image_id, slot);
        let c = gt.coords[slot];
        dists.push(KeypointDistribution {
            x: gaussian_bins(c[0] + j[0], t.concentration, t.bins),
            y: gaussian_bins(c[1] + j[1], t.concentration, t.bins),
        });
        covered.push(slot);
    }
    TeacherPrediction {
        teacher_id: t.teacher_id.clone(),
        covered,
        dists,
    }
}

/// Linear warmup, a flat phase, then cosine annealing to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: u64,
    /// Step at which cosine annealing begins.
    pub cosine_start: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_start_lr: lr,
            warmup_steps: 0,
            cosine_start: u64::MAX,
            total_steps: u64::MAX,
            min_lr: lr,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_start_lr + f * (self.base_lr - self.warmup_start_lr);
        }
        if step < self.cosine_start {
            return self.base_lr;
        }
        let span = self.total_steps.saturating_sub(self.cosine_start).max(1);
        let f = ((step - self.cosine_start) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: StudentModel,
    pub velocity: ParamGrads,
    pub step: u64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: StudentModel, sgd: &SgdConfig) -> Self {
        let velocity = ParamGrads::zeros_like(&params);
        Self {
            params,
            velocity,
            step: 0,
            lr: sgd.schedule.lr(0),
        }
    }
}

/// `v <- mu v - lr g; w <- w + v`. Rejects non-finite gradients without
/// touching the state.
pub fn sgd_step(state: &mut TrainState, grads: &ParamGrads, sgd: &SgdConfig) -> Result<(), ModelError> {
    if let Some(part) = grads.first_non_finite() {
        return Err(ModelError::NonFinite {
            step: state.step,
            detail: format!("gradient of {part}"),
        });
    }
    if grads.w1.dim() != state.params.w1.dim() || grads.w2.dim() != state.params.w2.dim() {
        return Err(ModelError::Shape("gradient does not match parameters".into()));
    }
    let lr = sgd.schedule.lr(state.step);
    let mu = sgd.momentum;
    let v = &mut state.velocity;
    let p = &mut state.params;
    macro_rules! update {
        ($f:ident) => {
            v.$f.zip_mut_with(&grads.$f, |vi, &gi| *vi = mu * *vi - lr * gi);
            p.$f += &v.$f;
        };
    }
    update!(w1);
    update!(b1);
    update!(w2);
    update!(b2);
    state.step += 1;
    state.lr = sgd.schedule.lr(state.step);
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "posemerge-student";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    d_in: usize,
    hidden: usize,
    keypoints: usize,
    bins: usize,
    step: u64,
    config_digest: String,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub fn save_checkpoint<W: Write>(
    m: &StudentModel,
    step: u64,
    config_digest: &str,
    sink: W,
) -> Result<(), ModelError> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        d_in: m.d_in(),
        hidden: m.hidden(),
        keypoints: m.keypoints,
        bins: m.bins,
        step,
        config_digest: config_digest.into(),
        w1: m.w1.iter().copied().collect(),
        b1: m.b1.to_vec(),
        w2: m.w2.iter().copied().collect(),
        b2: m.b2.to_vec(),
    };
    serde_json::to_writer(sink, &ck).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

/// Returns the model, its step count and config digest.
pub fn load_checkpoint<R: Read>(source: R) -> Result<(StudentModel, u64, String), ModelError> {
    let ck: Checkpoint =
        serde_json::from_reader(source).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported container {} v{}",
            ck.format, ck.version
        )));
    }
    let out = ck.keypoints * AXES * ck.bins;
    let shape_err = |what: &str| ModelError::Checkpoint(format!("{what} has the wrong length"));
    let w1 = Array2::from_shape_vec((ck.hidden, ck.d_in), ck.w1).map_err(|_| shape_err("w1"))?;
    let w2 = Array2::from_shape_vec((out, ck.hidden), ck.w2).map_err(|_| shape_err("w2"))?;
    if ck.b1.len() != ck.hidden {
        return Err(shape_err("b1"));
    }
    if ck.b2.len() != out {
        return Err(shape_err("b2"));
    }
    let m = StudentModel {
        keypoints: ck.keypoints,
        bins: ck.bins,
        w1,
        b1: Array1::from(ck.b1),
        w2,
        b2: Array1::from(ck.b2),
    };
    Ok((m, ck.step, ck.config_digest))
}
