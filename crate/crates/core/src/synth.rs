//! Synthetic partially labeled pose datasets.
//!
//! A latent `u ~ N(0, I)` is pushed through one frozen map (fixed by
//! `map_seed`) to a full pose in the unit square, and through a frozen linear
//! projection to the network input. Each dataset publishes labels only for
//! its own schema; the full pose is kept aside as hidden truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::UnifiedInstance;
use crate::model::splitmix64;
use crate::schema::{mapping_into, SchemaError, SkeletonSchema, UnionSchema};

/// Coordinates are clamped into `[MARGIN, 1 - MARGIN]`.
pub const MARGIN: f64 = 0.02;

/// Image ids of a dataset are `seed * ID_STRIDE + i`.
pub const ID_STRIDE: u64 = 1_000_000;

/// Upright reference pose in the unit frame (y grows downwards).
const TEMPLATE: [(&str, [f64; 2]); 21] = [
    ("nose", [0.50, 0.14]),
    ("left_eye", [0.53, 0.12]),
    ("right_eye", [0.47, 0.12]),
    ("left_ear", [0.56, 0.13]),
    ("right_ear", [0.44, 0.13]),
    ("left_shoulder", [0.62, 0.26]),
    ("right_shoulder", [0.38, 0.26]),
    ("left_elbow", [0.68, 0.40]),
    ("right_elbow", [0.32, 0.40]),
    ("left_wrist", [0.72, 0.53]),
    ("right_wrist", [0.28, 0.53]),
    ("left_hip", [0.57, 0.55]),
    ("right_hip", [0.43, 0.55]),
    ("left_knee", [0.58, 0.72]),
    ("right_knee", [0.42, 0.72]),
    ("left_ankle", [0.59, 0.90]),
    ("right_ankle", [0.41, 0.90]),
    ("pelvis", [0.50, 0.55]),
    ("thorax", [0.50, 0.26]),
    ("upper_neck", [0.50, 0.21]),
    ("head_top", [0.50, 0.05]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPoseGenerator {
    pub latent_dim: usize,
    pub map_seed: u64,
    /// Amplitude of the sinusoidal warp, in unit-frame coordinates.
    pub warp_amplitude: f64,
    /// Std of the noise added to published labels.
    pub label_noise: f64,
    /// Scale of the linear latent term.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Width of the observation vector fed to the network.
    #[serde(default = "default_d_in")]
    pub d_in: usize,
}

fn default_spread() -> f64 {
    0.13
}

fn default_d_in() -> usize {
    32
}

impl Default for SyntheticPoseGenerator {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            map_seed: 7,
            warp_amplitude: 0.04,
            label_noise: 0.0,
            spread: default_spread(),
            d_in: default_d_in(),
        }
    }
}

/// The frozen latent-to-pose and latent-to-observation maps.
#[derive(Debug, Clone)]
pub struct PoseMap {
    template: Vec<[f64; 2]>,
    /// `[slot][axis][latent]`
    linear: Vec<[Vec<f64>; 2]>,
    warp: Vec<[Vec<f64>; 2]>,
    phase: Vec<[f64; 2]>,
    /// `[d_in][latent]`
    projection: Vec<Vec<f64>>,
    spread: f64,
    warp_amplitude: f64,
}

fn template_position(name: &str) -> [f64; 2] {
    if let Some((_, p)) = TEMPLATE.iter().find(|(n, _)| *n == name) {
        return *p;
    }
    // Names outside the reference pose get a stable spot in the interior.
    let h = name
        .bytes()
        .fold(0u64, |acc, b| splitmix64(acc ^ u64::from(b)));
    let x = 0.2 + 0.6 * (h & 0xFFFF) as f64 / 65535.0;
    let y = 0.2 + 0.6 * ((h >> 16) & 0xFFFF) as f64 / 65535.0;
    [x, y]
}

impl PoseMap {
    pub fn new(gen: &SyntheticPoseGenerator, union: &UnionSchema) -> Self {
        let l = gen.latent_dim.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(gen.map_seed);
        let gauss = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        };
        let scale = 1.0 / (l as f64).sqrt();
        // A shared component moves the whole body, the per-slot part bends it.
        let shared = [gauss(&mut rng, l, scale), gauss(&mut rng, l, scale)];
        let mut linear = Vec::with_capacity(union.len());
        let mut warp = Vec::with_capacity(union.len());
        let mut phase = Vec::with_capacity(union.len());
        let mix = 1.0 / 1.25f64.sqrt();
        for _ in 0..union.len() {
            let axes: [Vec<f64>; 2] = std::array::from_fn(|a| {
                let own = gauss(&mut rng, l, scale);
                shared[a]
                    .iter()
                    .zip(own)
                    .map(|(s, o)| mix * (s + 0.5 * o))
                    .collect()
            });
            linear.push(axes);
            warp.push(std::array::from_fn(|_| gauss(&mut rng, l, 1.5 * scale)));
            phase.push(std::array::from_fn(|_| {
                rng.random_range(0.0..std::f64::consts::TAU)
            }));
        }
        let projection = (0..gen.d_in).map(|_| gauss(&mut rng, l, 1.0)).collect();
        Self {
            template: union
                .keypoints()
                .iter()
                .map(|k| template_position(k.as_str()))
                .collect(),
            linear,
            warp,
            phase,
            projection,
            spread: gen.spread,
            warp_amplitude: gen.warp_amplitude,
        }
    }

    pub fn pose(&self, u: &[f64]) -> Vec<[f64; 2]> {
        let dot = |w: &[f64]| w.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        (0..self.template.len())
            .map(|k| {
                std::array::from_fn(|a| {
                    let v = self.template[k][a]
                        + self.spread * dot(&self.linear[k][a])
                        + self.warp_amplitude * (dot(&self.warp[k][a]) + self.phase[k][a]).sin();
                    v.clamp(MARGIN, 1.0 - MARGIN)
                })
            })
            .collect()
    }

    pub fn observe(&self, u: &[f64]) -> Vec<f64> {
        self.projection
            .iter()
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Published labels, network inputs and the hidden full truth, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub inputs: Vec<Vec<f64>>,
    pub instances: Vec<UnifiedInstance>,
    pub truth: Vec<UnifiedInstance>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Draws `n` instances labeled on `labeled_schema`'s slots only.
///
/// Every instance lives in the unit box (`bbox = [0, 0, 1, 1]`, `area = 1`).
pub fn generate_dataset(
    gen: &SyntheticPoseGenerator,
    n: usize,
    labeled_schema: &SkeletonSchema,
    union: &UnionSchema,
    seed: u64,
) -> Result<SyntheticDataset, SchemaError> {
    let labeled = mapping_into(labeled_schema, union)?.index_map;
    let map = PoseMap::new(gen, union);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let noise = Normal::new(0.0, gen.label_noise.max(0.0)).expect("finite noise");
    let mut out = SyntheticDataset {
        inputs: Vec::with_capacity(n),
        instances: Vec::with_capacity(n),
        truth: Vec::with_capacity(n),
    };
    for i in 0..n {
        let u: Vec<f64> = (0..gen.latent_dim.max(1))
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let pose = map.pose(&u);
        let image_id = seed.wrapping_mul(ID_STRIDE).wrapping_add(i as u64);
        let mut truth = UnifiedInstance::empty(image_id, [0.0, 0.0, 1.0, 1.0], 1.0, union.len());
        truth.coords.clone_from(&pose);
        truth.mask.fill(true);
        truth.vis.fill(2);
        let mut public = UnifiedInstance::empty(image_id, [0.0, 0.0, 1.0, 1.0], 1.0, union.len());
        for &slot in &labeled {
            let [x, y] = pose[slot];
            let (dx, dy) = if gen.label_noise > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            public.coords[slot] = [(x + dx).clamp(0.0, 1.0), (y + dy).clamp(0.0, 1.0)];
            public.mask[slot] = true;
            public.vis[slot] = 2;
        }
        out.inputs.push(map.observe(&u));
        out.instances.push(public);
        out.truth.push(truth);
    }
    Ok(out)
}
