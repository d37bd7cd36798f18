//! Two-dataset synthetic experiment: data generation, training of the
//! unified student, evaluation, comparison tables and ablation matrices.
//!
//! Dataset A carries MPII-style labels and dataset B COCO-style labels over
//! the shared 21-point union. Every run is a pure function of its config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{sha256_hex, UnifiedInstance};
use crate::losses::{logit_gradient, total_loss_with, LossConfig, LossError, LossWeights, StudentPrediction, TeacherPrediction};
use crate::metrics::{
    average_precision, coco_thresholds, pck, subset_slots, EvalReport, MetricError, OksParams,
    PckConfig, Subset,
};
use crate::model::{
    sgd_step, splitmix64, teacher_predict, LrSchedule, ModelError, SgdConfig, StudentModel,
    TeacherOracle, TrainState,
};
use crate::schema::{build_union, mapping_into, SchemaError, SchemaRegistry, SkeletonSchema, UnionSchema};
use crate::synth::{generate_dataset, SyntheticDataset, SyntheticPoseGenerator};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("diverged at epoch {epoch}, step {step}: {detail}; batch image ids {batch:?}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
        batch: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub id: String,
    /// Schema whose slots the teacher covers.
    pub schema: String,
    /// Gaussian width in bins.
    pub concentration: f64,
    /// Std of the per-keypoint jitter in unit-frame coordinates.
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    /// Fraction of training after which cosine annealing starts.
    pub cosine_from: f64,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.25,
            momentum: 0.9,
            warmup_epochs: 2,
            warmup_start_lr: 0.025,
            cosine_from: 0.5,
            min_lr: 0.0025,
        }
    }
}

/// Missing fields take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_a: String,
    pub dataset_b: String,
    /// Schemas whose union defines the output slots, in slot order.
    pub union: Vec<String>,
    pub train_a: usize,
    pub train_b: usize,
    pub test_a: usize,
    pub test_b: usize,
    pub generator: SyntheticPoseGenerator,
    pub hidden: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub distill: bool,
    pub teachers: Vec<TeacherConfig>,
    /// Evaluate on the held-out sets every this many epochs (0 = never).
    #[serde(default)]
    pub eval_every: usize,
    /// Wall-clock time breaks bit-identical logs, so it is opt-in.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_a: "mpii16".into(),
            dataset_b: "coco17".into(),
            union: vec!["coco17".into(), "mpii16".into()],
            train_a: 1000,
            train_b: 1000,
            test_a: 300,
            test_b: 300,
            generator: SyntheticPoseGenerator::default(),
            hidden: 256,
            loss: LossConfig {
                alpha: 0.30,
                betas: [("mpii".to_string(), 0.25), ("coco".to_string(), 0.45)].into(),
                bins: 64,
                kl_direction: Default::default(),
                temperature: 1.0,
            },
            optimizer: OptimizerConfig::default(),
            epochs: 60,
            batch_size: 64,
            seed: 0,
            distill: true,
            teachers: vec![
                TeacherConfig {
                    id: "mpii".into(),
                    schema: "mpii16".into(),
                    concentration: 1.5,
                    noise: 0.005,
                    seed: 1,
                },
                TeacherConfig {
                    id: "coco".into(),
                    schema: "coco17".into(),
                    concentration: 1.5,
                    noise: 0.005,
                    seed: 2,
                },
            ],
            eval_every: 0,
            record_wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, HarnessError> {
        serde_json::from_slice(bytes).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.train_a + self.train_b == 0 {
            return bad("no training instances");
        }
        if self.generator.latent_dim == 0 || self.generator.d_in == 0 || self.hidden == 0 {
            return bad("generator and network widths must be positive");
        }
        if self.loss.bins < 2 {
            return bad("at least two bins are required");
        }
        if !(self.loss.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.optimizer.cosine_from) {
            return bad("cosine_from must lie in [0, 1]");
        }
        self.loss.weights()?;
        let registry = SchemaRegistry::builtin();
        for id in [&self.dataset_a, &self.dataset_b].into_iter().chain(&self.union) {
            registry.get(id)?;
        }
        if self.distill {
            for t in &self.teachers {
                registry.get(&t.schema)?;
                if !self.loss.betas.contains_key(&t.id) {
                    return Err(LossError::UnknownTeacher(t.id.clone()).into());
                }
                if !(t.concentration > 0.0) || !(t.noise >= 0.0) {
                    return bad("teacher concentration must be positive and noise non-negative");
                }
            }
        }
        Ok(())
    }

    /// Weights actually used: without distillation the keypoint term gets
    /// the full weight.
    pub fn effective_weights(&self) -> Result<LossWeights, HarnessError> {
        let mut w = self.loss.weights()?;
        if !self.distill {
            w.alpha = 1.0;
        }
        Ok(w)
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.train_a + self.train_b).div_ceil(self.batch_size)
    }

    pub fn sgd(&self) -> SgdConfig {
        let spe = self.steps_per_epoch() as u64;
        let total = spe * self.epochs as u64;
        let o = &self.optimizer;
        SgdConfig {
            momentum: o.momentum,
            schedule: LrSchedule {
                base_lr: o.lr,
                warmup_start_lr: o.warmup_start_lr,
                warmup_steps: spe * o.warmup_epochs as u64,
                cosine_start: (total as f64 * o.cosine_from).round() as u64,
                total_steps: total,
                min_lr: o.min_lr,
            },
        }
    }
}

/// Sub-seeds derived from the run seed. Dataset seeds stay small and
/// distinct so image ids never collide.
fn data_seed(seed: u64, which: u64) -> u64 {
    (seed % (1 << 40)) * 4 + which
}

fn init_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x1A17)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(splitmix64(seed ^ 0x5407) ^ epoch as u64)
}

/// Training and held-out data of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub union: UnionSchema,
    pub schema_a: SkeletonSchema,
    pub schema_b: SkeletonSchema,
    pub train_a: SyntheticDataset,
    pub train_b: SyntheticDataset,
    pub test_a: SyntheticDataset,
    pub test_b: SyntheticDataset,
}

impl ExperimentData {
    pub fn generate(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let registry = SchemaRegistry::builtin();
        let union_schemas = config
            .union
            .iter()
            .map(|id| registry.get(id).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let union = build_union(&union_schemas)?;
        let schema_a = registry.get(&config.dataset_a)?.clone();
        let schema_b = registry.get(&config.dataset_b)?.clone();
        let g = &config.generator;
        let s = config.seed;
        Ok(Self {
            train_a: generate_dataset(g, config.train_a, &schema_a, &union, data_seed(s, 1))?,
            train_b: generate_dataset(g, config.train_b, &schema_b, &union, data_seed(s, 2))?,
            test_a: generate_dataset(g, config.test_a, &schema_a, &union, data_seed(s, 3))?,
            test_b: generate_dataset(g, config.test_b, &schema_b, &union, data_seed(s, 4))?,
            union,
            schema_a,
            schema_b,
        })
    }

    /// Training instance `i` of the concatenation A ++ B.
    fn train_item(&self, i: usize) -> (&[f64], &UnifiedInstance, &UnifiedInstance) {
        let na = self.train_a.len();
        let d = if i < na { &self.train_a } else { &self.train_b };
        let j = if i < na { i } else { i - na };
        (&d.inputs[j], &d.instances[j], &d.truth[j])
    }

    fn train_len(&self) -> usize {
        self.train_a.len() + self.train_b.len()
    }
}

pub fn teacher_oracles(
    config: &ExperimentConfig,
    union: &UnionSchema,
) -> Result<Vec<TeacherOracle>, HarnessError> {
    if !config.distill {
        return Ok(Vec::new());
    }
    let registry = SchemaRegistry::builtin();
    config
        .teachers
        .iter()
        .map(|t| {
            let schema = registry.get(&t.schema)?;
            Ok(TeacherOracle {
                teacher_id: t.id.clone(),
                covered: mapping_into(schema, union)?.index_map,
                concentration: t.concentration,
                noise: t.noise,
                seed: splitmix64(config.seed ^ splitmix64(t.seed)),
                bins: config.loss.bins,
            })
        })
        .collect()
}

/// Slots that receive a training signal: labeled in a non-empty training
/// set or covered by a teacher.
pub fn trained_slots(config: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<usize>, HarnessError> {
    let mut on = vec![false; data.union.len()];
    if config.train_a > 0 {
        for s in mapping_into(&data.schema_a, &data.union)?.index_map {
            on[s] = true;
        }
    }
    if config.train_b > 0 {
        for s in mapping_into(&data.schema_b, &data.union)?.index_map {
            on[s] = true;
        }
    }
    for t in teacher_oracles(config, &data.union)? {
        for s in t.covered {
            on[s] = true;
        }
    }
    Ok((0..on.len()).filter(|&s| on[s]).collect())
}

/// The untrained student of a run.
pub fn initial_model(config: &ExperimentConfig, keypoints: usize) -> StudentModel {
    StudentModel::new(
        config.generator.d_in,
        config.hidden,
        keypoints,
        config.loss.bins,
        init_seed(config.seed),
    )
}

/// Visiting order of the concatenated training set in `epoch`.
pub fn epoch_order(config: &ExperimentConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..config.train_a + config.train_b).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(config.seed, epoch)));
    order
}

/// Batch means of the loss components at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Mean unweighted conditional keypoint loss.
    pub keypoint: f64,
    /// Mean unweighted distillation loss per teacher.
    pub distill: BTreeMap<String, f64>,
    /// `alpha * keypoint`.
    pub keypoint_term: f64,
    /// `(1 - alpha) * beta_j * distill_j` per teacher.
    pub distill_terms: BTreeMap<String, f64>,
    /// Mean of the per-instance weighted objective.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub instances: usize,
    pub keypoint: f64,
    pub distill: BTreeMap<String, f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    /// Mean full-union PCK@0.1 against the hidden truth, per test set.
    pub full_pck_a: f64,
    pub full_pck_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_digest: String,
    pub seed: u64,
    pub alpha: f64,
    pub betas: BTreeMap<String, f64>,
    pub union: Vec<String>,
    pub trained_slots: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<EvalSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ExperimentReport>,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serialises")
    }
}

fn batch_matrix(rows: &[&[f64]], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), width));
    for (r, row) in rows.iter().enumerate() {
        m.row_mut(r).assign(&ndarray::ArrayView1::from(*row));
    }
    m
}

/// Trains the student on the shuffled union of both training sets.
pub fn train(config: &ExperimentConfig) -> Result<(StudentModel, RunLog), HarnessError> {
    let data = ExperimentData::generate(config)?;
    train_on(config, &data)
}

pub fn train_on(
    config: &ExperimentConfig,
    data: &ExperimentData,
) -> Result<(StudentModel, RunLog), HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let weights = config.effective_weights()?;
    let kl = config.loss.kl_options();
    let union = &data.union;
    let oracles = teacher_oracles(config, union)?;
    // Teachers are deterministic, so their outputs are computed once.
    let teacher_outputs: Vec<Vec<TeacherPrediction>> = (0..data.train_len())
        .map(|i| {
            let truth = data.train_item(i).2;
            oracles.iter().map(|t| teacher_predict(t, truth)).collect()
        })
        .collect();

    let model = initial_model(config, union.len());
    let sgd = config.sgd();
    let mut state = TrainState::new(model, &sgd);
    let mut log = RunLog {
        config_digest: config.digest(),
        seed: config.seed,
        alpha: weights.alpha,
        betas: weights.betas.clone(),
        union: union.keypoints().iter().map(|k| k.as_str().to_string()).collect(),
        trained_slots: trained_slots(config, data)?,
        epochs: Vec::with_capacity(config.epochs),
        steps: Vec::new(),
        snapshots: Vec::new(),
        wall_clock_secs: None,
        report: None,
    };

    for epoch in 0..config.epochs {
        let order = epoch_order(config, epoch);
        let mut ep = EpochRecord {
            epoch,
            instances: 0,
            keypoint: 0.0,
            distill: BTreeMap::new(),
            total: 0.0,
            lr: state.lr,
        };
        for batch in order.chunks(config.batch_size) {
            let rec = train_step(&mut state, &sgd, data, batch, &teacher_outputs, &weights, kl, epoch)?;
            let n = rec.batch_size as f64;
            ep.instances += rec.batch_size;
            ep.keypoint += rec.keypoint * n;
            ep.total += rec.total * n;
            for (id, v) in &rec.distill {
                *ep.distill.entry(id.clone()).or_default() += v * n;
            }
            log.steps.push(rec);
        }
        let n = ep.instances as f64;
        ep.keypoint /= n;
        ep.total /= n;
        ep.distill.values_mut().for_each(|v| *v /= n);
        ep.lr = state.lr;
        log.epochs.push(ep);
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 {
            log.snapshots.push(snapshot(&state.params, data, epoch)?);
        }
    }
    if config.record_wall_clock {
        log.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok((state.params, log))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    sgd: &SgdConfig,
    data: &ExperimentData,
    batch: &[usize],
    teacher_outputs: &[Vec<TeacherPrediction>],
    weights: &LossWeights,
    kl: crate::losses::KlOptions,
    epoch: usize,
) -> Result<StepRecord, HarnessError> {
    let model = &state.params;
    let rows: Vec<&[f64]> = batch.iter().map(|&i| data.train_item(i).0).collect();
    let inputs = batch_matrix(&rows, model.d_in());
    let fwd = model.forward_batch(inputs.view())?;
    let n = batch.len() as f64;
    let mut upstream = Array2::zeros(fwd.logits.dim());
    let mut keypoint = 0.0;
    let mut total = 0.0;
    let mut distill: BTreeMap<String, f64> = BTreeMap::new();
    let ids = || batch.iter().map(|&i| data.train_item(i).1.image_id).collect();
    for (r, &i) in batch.iter().enumerate() {
        let logits = fwd.logits.row(r).to_vec();
        let pred = StudentPrediction::from_logits(model.keypoints, model.bins, logits)?;
        let gt = data.train_item(i).1;
        let tl = total_loss_with(&pred, gt, &teacher_outputs[i], weights, kl)?;
        if !tl.value.is_finite() {
            return Err(HarnessError::Diverged {
                epoch,
                step: state.step,
                detail: "non-finite loss".into(),
                batch: ids(),
            });
        }
        keypoint += tl.keypoint / n;
        total += tl.value / n;
        for (id, v) in &tl.distill {
            *distill.entry(id.clone()).or_default() += v / n;
        }
        let g = logit_gradient(&pred, &tl.grad_coords, &tl.grad_logits);
        for (dst, v) in upstream.row_mut(r).iter_mut().zip(g) {
            *dst = v / n;
        }
    }
    let grads = model.backward_batch(inputs.view(), &fwd, upstream.view())?;
    let lr = state.lr;
    let step = state.step;
    sgd_step(state, &grads, sgd).map_err(|e| HarnessError::Diverged {
        epoch,
        step,
        detail: e.to_string(),
        batch: ids(),
    })?;
    let alpha = weights.alpha;
    let distill_terms = distill
        .iter()
        .map(|(id, v)| Ok((id.clone(), (1.0 - alpha) * weights.beta(id)? * v)))
        .collect::<Result<_, LossError>>()?;
    Ok(StepRecord {
        step,
        epoch,
        batch_size: batch.len(),
        lr,
        keypoint,
        distill,
        keypoint_term: alpha * keypoint,
        distill_terms,
        total,
    })
}

/// Decoded predictions for `inputs`; `mask` marks the slots reported as
/// predicted, and the score is the mean peak confidence over those slots.
pub fn predict(
    model: &StudentModel,
    inputs: &[Vec<f64>],
    like: &[UnifiedInstance],
    mask_slots: &[usize],
) -> Result<Vec<UnifiedInstance>, HarnessError> {
    let mut out = Vec::with_capacity(inputs.len());
    if inputs.is_empty() {
        return Ok(out);
    }
    let rows: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let fwd = model.forward_batch(batch_matrix(&rows, model.d_in()).view())?;
    for (r, gt) in like.iter().enumerate() {
        let pred = model.prediction_from_logits(fwd.logits.row(r).as_slice().expect("contiguous"))?;
        let mut inst = UnifiedInstance::empty(gt.image_id, gt.bbox, gt.area, model.keypoints);
        let mut conf = 0.0;
        for &s in mask_slots {
            inst.mask[s] = true;
            inst.vis[s] = 2;
            let peak = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            conf += (peak(&pred.dists[s].x) * peak(&pred.dists[s].y)).sqrt();
        }
        inst.coords = pred
            .coords
            .iter()
            .map(|c| [gt.bbox[0] + c[0] * gt.bbox[2], gt.bbox[1] + c[1] * gt.bbox[3]])
            .collect();
        inst.score = Some(if mask_slots.is_empty() {
            0.0
        } else {
            conf / mask_slots.len() as f64
        });
        out.push(inst);
    }
    Ok(out)
}

fn snapshot(model: &StudentModel, data: &ExperimentData, epoch: usize) -> Result<EvalSnapshot, HarnessError> {
    let all: Vec<usize> = (0..data.union.len()).collect();
    let full = |d: &SyntheticDataset| -> Result<f64, HarnessError> {
        if d.is_empty() {
            return Ok(0.0);
        }
        let preds = predict(model, &d.inputs, &d.truth, &all)?;
        Ok(pck(&preds, &d.truth, &PckConfig::bbox(0.1), &all, &data.union)?
            .mean("PCK")
            .unwrap_or(0.0))
    };
    Ok(EvalSnapshot {
        epoch,
        full_pck_a: full(&data.test_a)?,
        full_pck_b: full(&data.test_b)?,
    })
}

/// One row of the comparison table; scores are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub pck: f64,
    pub pck_01: f64,
    pub ap: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub ar: f64,
    pub ar_50: f64,
    pub ar_75: f64,
    pub kpts: usize,
    /// Mean of `pck` and `ap`.
    pub avg: f64,
}

pub const TABLE_COLUMNS: [&str; 11] = [
    "Model", "PCK", "PCK^0.1", "AP", "AP^0.5", "AP^0.75", "AR", "AR^0.5", "AR^0.75", "Kpts", "Avg",
];

impl TableRow {
    fn cells(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.2}");
        vec![
            self.label.clone(),
            f(self.pck),
            f(self.pck_01),
            f(self.ap),
            f(self.ap_50),
            f(self.ap_75),
            f(self.ar),
            f(self.ar_50),
            f(self.ar_75),
            self.kpts.to_string(),
            f(self.avg),
        ]
    }
}

/// Aligned plain-text table.
pub fn render_text(rows: &[TableRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(TableRow::cells).collect();
    let widths: Vec<usize> = (0..TABLE_COLUMNS.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([TABLE_COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule);
    for r in &body {
        line(&mut out, r);
    }
    out
}

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let mut cells = r.cells();
        if cells[0].contains([',', '"']) {
            cells[0] = format!("\"{}\"", cells[0].replace('"', "\"\""));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// All evaluation results of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// PCKh@0.5 on dataset-A labels.
    pub pckh: EvalReport,
    /// PCKh@0.1 on dataset-A labels.
    pub pckh_01: EvalReport,
    /// OKS AP/AR on dataset-B labels.
    pub ap: EvalReport,
    /// Full-union PCK@0.1 (bbox-normalised) against the hidden truth.
    pub full_a: EvalReport,
    pub full_b: EvalReport,
    pub row: TableRow,
}

/// Scores predictions for the two held-out sets. `preds_a` / `preds_b`
/// must carry the masks of the slots the model claims to predict; the
/// full-union scores ignore masks and use every slot.
pub fn evaluate_predictions(
    label: &str,
    preds_a: &[UnifiedInstance],
    preds_b: &[UnifiedInstance],
    data: &ExperimentData,
) -> Result<ExperimentReport, HarnessError> {
    let union = &data.union;
    let a_slots = mapping_into(&data.schema_a, union)?.index_map;
    let b_slots = mapping_into(&data.schema_b, union)?.index_map;
    let pckh = pck(preds_a, &data.test_a.instances, &PckConfig::pckh(0.5), &a_slots, union)?;
    let pckh_01 = pck(preds_a, &data.test_a.instances, &PckConfig::pckh(0.1), &a_slots, union)?;
    let ap = average_precision(
        preds_b,
        &data.test_b.instances,
        &OksParams::defaults(union),
        &b_slots,
        &coco_thresholds(),
        union,
    );
    let all = subset_slots(union, Subset::All);
    let unmask = |ps: &[UnifiedInstance]| -> Vec<UnifiedInstance> {
        ps.iter()
            .map(|p| {
                let mut p = p.clone();
                p.mask.fill(true);
                p
            })
            .collect()
    };
    let bbox = PckConfig::bbox(0.1);
    let full_a = pck(&unmask(preds_a), &data.test_a.truth, &bbox, &all, union)?;
    let full_b = pck(&unmask(preds_b), &data.test_b.truth, &bbox, &all, union)?;
    let kpts = preds_a
        .iter()
        .chain(preds_b)
        .next()
        .map_or(0, |p| p.mask.iter().filter(|&&m| m).count());
    let pct = |r: &EvalReport, k: &str| 100.0 * r.mean(k).unwrap_or(0.0);
    let row = TableRow {
        label: label.to_string(),
        pck: pct(&pckh, "PCK"),
        pck_01: pct(&pckh_01, "PCK"),
        ap: pct(&ap, "AP"),
        ap_50: pct(&ap, "AP50"),
        ap_75: pct(&ap, "AP75"),
        ar: pct(&ap, "AR"),
        ar_50: pct(&ap, "AR50"),
        ar_75: pct(&ap, "AR75"),
        kpts,
        avg: 0.5 * (pct(&pckh, "PCK") + pct(&ap, "AP")),
    };
    Ok(ExperimentReport {
        pckh,
        pckh_01,
        ap,
        full_a,
        full_b,
        row,
    })
}

pub fn evaluate_experiment(
    label: &str,
    model: &StudentModel,
    data: &ExperimentData,
    trained: &[usize],
) -> Result<ExperimentReport, HarnessError> {
    let preds_a = predict(model, &data.test_a.inputs, &data.test_a.instances, trained)?;
    let preds_b = predict(model, &data.test_b.inputs, &data.test_b.instances, trained)?;
    evaluate_predictions(label, &preds_a, &preds_b, data)
}

/// Train, then evaluate on the held-out sets; the report is stored in the log.
pub fn run_experiment(
    label: &str,
    config: &ExperimentConfig,
) -> Result<(StudentModel, RunLog), HarnessError> {
    let data = ExperimentData::generate(config)?;
    let (model, mut log) = train_on(config, &data)?;
    log.report = Some(evaluate_experiment(label, &model, &data, &log.trained_slots)?);
    Ok((model, log))
}

/// Reference configurations: the dataset-A-only baseline and the unified
/// student trained on both datasets.
pub fn baseline_config(base: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        train_b: 0,
        distill: false,
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub distill: Vec<bool>,
    pub alphas: Vec<f64>,
    pub betas: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub distill: bool,
    pub alpha: f64,
    pub betas: BTreeMap<String, f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<RunLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub distill: bool,
    pub alpha: f64,
    pub betas: BTreeMap<String, f64>,
    pub runs: usize,
    pub failures: usize,
    pub mean: TableRow,
    /// Population standard deviation over seeds.
    pub std: TableRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellOutcome>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean_rows(&self) -> Vec<TableRow> {
        self.rows.iter().map(|r| r.mean.clone()).collect()
    }
}

fn cell_label(distill: bool, alpha: f64, betas: &BTreeMap<String, f64>) -> String {
    let b: Vec<String> = betas.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!(
        "distill={} alpha={alpha} {}",
        if distill { "on" } else { "off" },
        b.join(" ")
    )
}

fn aggregate(label: String, rows: &[&TableRow]) -> (TableRow, TableRow) {
    let n = rows.len().max(1) as f64;
    let field = |f: fn(&TableRow) -> f64| -> (f64, f64) {
        let m = rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let v = rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let cols: [fn(&TableRow) -> f64; 9] = [
        |r| r.pck,
        |r| r.pck_01,
        |r| r.ap,
        |r| r.ap_50,
        |r| r.ap_75,
        |r| r.ar,
        |r| r.ar_50,
        |r| r.ar_75,
        |r| r.avg,
    ];
    let stats: Vec<(f64, f64)> = cols.iter().map(|&f| field(f)).collect();
    let kpts = rows.first().map_or(0, |r| r.kpts);
    let build = |pick: fn(&(f64, f64)) -> f64, label: String| TableRow {
        label,
        pck: pick(&stats[0]),
        pck_01: pick(&stats[1]),
        ap: pick(&stats[2]),
        ap_50: pick(&stats[3]),
        ap_75: pick(&stats[4]),
        ar: pick(&stats[5]),
        ar_50: pick(&stats[6]),
        ar_75: pick(&stats[7]),
        kpts,
        avg: pick(&stats[8]),
    };
    (build(|s| s.0, label.clone()), build(|s| s.1, label))
}

/// Runs every (distill, alpha, beta, seed) cell. Cells run in parallel but
/// the report is assembled in grid order; failing cells are recorded and
/// the matrix continues.
pub fn run_ablation_matrix(
    base: &ExperimentConfig,
    axes: &AblationAxes,
    seeds: &[u64],
) -> Result<AblationReport, HarnessError> {
    if axes.distill.is_empty() || axes.alphas.is_empty() || axes.betas.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("ablation grids must be non-empty".into()));
    }
    let mut grid = Vec::new();
    for &distill in &axes.distill {
        for &alpha in &axes.alphas {
            for betas in &axes.betas {
                for &seed in seeds {
                    grid.push((distill, alpha, betas.clone(), seed));
                }
            }
        }
    }
    let results: Vec<Mutex<Option<CellOutcome>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(grid.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((distill, alpha, betas, seed)) = grid.get(i) else {
                    break;
                };
                let mut cfg = base.clone();
                cfg.distill = *distill;
                cfg.loss.alpha = *alpha;
                cfg.loss.betas.clone_from(betas);
                cfg.seed = *seed;
                let label = cell_label(*distill, *alpha, betas);
                let (log, error) = match run_experiment(&label, &cfg) {
                    Ok((_, log)) => (Some(log), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                *results[i].lock().expect("cell slot") = Some(CellOutcome {
                    distill: *distill,
                    alpha: *alpha,
                    betas: betas.clone(),
                    seed: *seed,
                    log,
                    error,
                });
            });
        }
    });
    let cells: Vec<CellOutcome> = results
        .into_iter()
        .map(|m| m.into_inner().expect("cell slot").expect("every cell ran"))
        .collect();
    let rows = cells
        .chunks(seeds.len())
        .map(|group| {
            let first = &group[0];
            let ok: Vec<&TableRow> = group
                .iter()
                .filter_map(|c| c.log.as_ref()?.report.as_ref().map(|r| &r.row))
                .collect();
            let (mean, std) = aggregate(cell_label(first.distill, first.alpha, &first.betas), &ok);
            AblationRow {
                distill: first.distill,
                alpha: first.alpha,
                betas: first.betas.clone(),
                runs: ok.len(),
                failures: group.len() - ok.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationReport { cells, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            train_a: 60,
            train_b: 50,
            test_a: 20,
            test_b: 20,
            hidden: 16,
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(c.to_json().as_bytes()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            ExperimentConfig { batch_size: 0, ..tiny() },
            ExperimentConfig { epochs: 0, ..tiny() },
            ExperimentConfig { dataset_a: "nope".into(), ..tiny() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn every_instance_is_visited_once_per_epoch() {
        let c = tiny();
        for e in 0..3 {
            let mut o = epoch_order(&c, e);
            o.sort_unstable();
            assert_eq!(o, (0..110).collect::<Vec<_>>());
        }
        assert_ne!(epoch_order(&c, 0), epoch_order(&c, 1));
    }

    #[test]
    fn run_log_has_one_entry_per_epoch_and_replays() {
        let c = tiny();
        let (m1, l1) = train(&c).unwrap();
        let (m2, l2) = train(&c).unwrap();
        assert_eq!(l1.epochs.len(), 2);
        assert_eq!(l1.steps.len(), 2 * 110usize.div_ceil(16));
        assert!(l1.epochs.iter().all(|e| e.instances == 110));
        assert_eq!(l1.to_json(), l2.to_json());
        assert_eq!(m1, m2);
    }

    #[test]
    fn trained_slots_follow_data_and_teachers() {
        let c = tiny();
        let data = ExperimentData::generate(&c).unwrap();
        assert_eq!(trained_slots(&c, &data).unwrap().len(), 21);
        let b = baseline_config(&c);
        assert_eq!(trained_slots(&b, &data).unwrap().len(), 16);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let c = tiny();
        let data = ExperimentData::generate(&c).unwrap();
        let with_scores = |d: &SyntheticDataset| -> Vec<UnifiedInstance> {
            d.truth
                .iter()
                .map(|t| UnifiedInstance {
                    score: Some(1.0),
                    ..t.clone()
                })
                .collect()
        };
        let r = evaluate_predictions("oracle", &with_scores(&data.test_a), &with_scores(&data.test_b), &data)
            .unwrap();
        assert_eq!(r.row.pck, 100.0);
        assert_eq!(r.row.pck_01, 100.0);
        assert_eq!(r.row.ap, 100.0);
        assert_eq!(r.row.ar, 100.0);
        assert_eq!(r.full_a.mean("PCK"), Some(1.0));
        assert_eq!(r.full_b.mean("PCK"), Some(1.0));
        assert_eq!(r.row.kpts, 21);
    }

    #[test]
    fn zero_model_predicts_centre() {
        let c = tiny();
        let data = ExperimentData::generate(&c).unwrap();
        let m = StudentModel::zeros(c.generator.d_in, 4, 21, 64);
        let all: Vec<usize> = (0..21).collect();
        let preds = predict(&m, &data.test_a.inputs, &data.test_a.instances, &all).unwrap();
        for p in &preds {
            assert!(p.coords.iter().all(|c| (c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12));
        }
        let r = evaluate_experiment("zero", &m, &data, &all).unwrap();
        assert!(r.row.ap < 50.0);
    }

    #[test]
    fn table_renders_all_columns() {
        let row = TableRow {
            label: "x".into(),
            pck: 1.0,
            pck_01: 2.0,
            ap: 3.0,
            ap_50: 4.0,
            ap_75: 5.0,
            ar: 6.0,
            ar_50: 7.0,
            ar_75: 8.0,
            kpts: 21,
            avg: 2.0,
        };
        let text = render_text(&[row.clone()]);
        assert!(text.lines().next().unwrap().starts_with("Model"));
        assert_eq!(text.lines().count(), 3);
        let csv = render_csv(&[row]);
        assert_eq!(csv.lines().nth(1).unwrap(), "x,1.00,2.00,3.00,4.00,5.00,6.00,7.00,8.00,21,2.00");
    }

    #[test]
    fn ablation_counts_runs_and_rows() {
        let axes = AblationAxes {
            distill: vec![true, false],
            alphas: vec![0.3],
            betas: vec![tiny().loss.betas],
        };
        let r = run_ablation_matrix(&ExperimentConfig { epochs: 1, ..tiny() }, &axes, &[1, 2, 3]).unwrap();
        assert_eq!(r.cells.len(), 6);
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.runs == 3 && row.failures == 0));
        let empty = AblationAxes { alphas: vec![], ..axes };
        assert!(run_ablation_matrix(&tiny(), &empty, &[1]).is_err());
    }

    #[test]
    fn failing_cells_are_recorded() {
        let axes = AblationAxes {
            distill: vec![true],
            alphas: vec![0.3, 2.0],
            betas: vec![tiny().loss.betas],
        };
        let r = run_ablation_matrix(&ExperimentConfig { epochs: 1, ..tiny() }, &axes, &[1]).unwrap();
        assert!(r.cells[0].error.is_none());
        assert!(r.cells[1].error.is_some());
        assert_eq!(r.rows[1].failures, 1);
    }
}
