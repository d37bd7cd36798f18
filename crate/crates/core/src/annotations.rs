//! COCO-dialect keypoint annotation I/O and remapping into the union skeleton.
//!
//! COCO, MPII (in its COCO-style JSON conversion) and Halpe files share one
//! parser; only the schema differs. Remapped instances carry a labeled mask
//! per union slot. Unlabeled slots hold the `(0, 0)` sentinel and must be
//! recognised through the mask, never through the coordinate value.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::{mapping_into_lossy, KeypointName, SchemaMapping, SkeletonSchema, UnionSchema};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("annotation {annotation_id}: {message}")]
    Format { annotation_id: u64, message: String },
    #[error("unified file: {0}")]
    Unified(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub x: f64,
    pub y: f64,
    /// 0 = not labeled, 1 = labeled but occluded, 2 = labeled and visible.
    pub v: u8,
}

/// One annotation as it appears in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub id: u64,
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    pub keypoints: Vec<Triplet>,
    pub source_id: String,
}

impl RawInstance {
    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|t| t.v > 0).count()
    }

    /// Keeps only the keypoints at `indices` (in that order).
    pub fn project(&self, indices: &[usize]) -> RawInstance {
        RawInstance {
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            ..self.clone()
        }
    }
}

/// A person instance laid out on the union skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedInstance {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub area: f64,
    pub coords: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
    pub vis: Vec<u8>,
    /// Detection confidence; present on predictions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl UnifiedInstance {
    pub fn empty(image_id: u64, bbox: [f64; 4], area: f64, slots: usize) -> Self {
        Self {
            image_id,
            bbox,
            area,
            coords: vec![[0.0, 0.0]; slots],
            mask: vec![false; slots],
            vis: vec![0; slots],
            score: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(k, _)| k)
    }

    /// Coordinates re-expressed in the unit frame of the bbox; mask and
    /// visibility unchanged. Unlabeled slots keep the sentinel.
    pub fn to_bbox_frame(&self) -> UnifiedInstance {
        let [bx, by, w, h] = self.bbox;
        let mut out = self.clone();
        for (k, c) in out.coords.iter_mut().enumerate() {
            if self.mask[k] {
                *c = [(c[0] - bx) / w, (c[1] - by) / h];
            }
        }
        out
    }

    /// Inverse of [`to_bbox_frame`](Self::to_bbox_frame) applied to every slot.
    pub fn from_bbox_frame(&self) -> UnifiedInstance {
        let [bx, by, w, h] = self.bbox;
        let mut out = self.clone();
        for (k, c) in out.coords.iter_mut().enumerate() {
            if self.mask[k] {
                *c = [bx + c[0] * w, by + c[1] * h];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub schema: SkeletonSchema,
    /// Non-crowd annotations in the file, including ones with no labeled keypoints.
    pub instance_count: usize,
    pub skipped_empty: usize,
    pub skipped_crowd: usize,
    /// Category keypoint names that disagree with the schema.
    pub name_mismatches: usize,
    /// SHA-256 of the source bytes, hex encoded.
    pub file_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default)]
    category_id: Option<u64>,
    keypoints: Vec<f64>,
    #[serde(default)]
    num_keypoints: Option<u64>,
    #[serde(default)]
    bbox: Option<Vec<f64>>,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    keypoints: Option<Vec<String>>,
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

fn json_error(bytes: &[u8], e: serde_json::Error) -> AnnotationError {
    AnnotationError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    }
}

fn is_crowd(v: &Option<serde_json::Value>) -> bool {
    match v {
        Some(serde_json::Value::Bool(b)) => *b,
        Some(serde_json::Value::Number(n)) => n.as_f64().is_some_and(|x| x != 0.0),
        _ => false,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses a COCO-dialect keypoint file against `schema`.
pub fn parse_keypoint_json(
    bytes: &[u8],
    schema: &SkeletonSchema,
) -> Result<(DatasetDescriptor, Vec<RawInstance>), AnnotationError> {
    let file: CocoFile = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, e))?;

    let mut name_mismatches = 0;
    for cat in &file.categories {
        if let Some(names) = &cat.keypoints {
            if names.len() != schema.len() {
                return Err(AnnotationError::Format {
                    annotation_id: 0,
                    message: format!(
                        "category {} declares {} keypoints, schema {} has {}",
                        cat.id,
                        names.len(),
                        schema.id(),
                        schema.len()
                    ),
                });
            }
            name_mismatches += names
                .iter()
                .zip(schema.keypoints())
                .filter(|(a, b)| a.as_str() != b.as_str())
                .count();
        }
    }

    let expected = 3 * schema.len();
    let mut instances = Vec::new();
    let (mut total, mut skipped_empty, mut skipped_crowd) = (0, 0, 0);
    for ann in &file.annotations {
        let fmt_err = |message: String| AnnotationError::Format {
            annotation_id: ann.id,
            message,
        };
        if is_crowd(&ann.iscrowd) {
            skipped_crowd += 1;
            continue;
        }
        total += 1;
        if ann.keypoints.len() != expected {
            return Err(fmt_err(format!(
                "keypoint array has {} values, expected {} (3 x {})",
                ann.keypoints.len(),
                expected,
                schema.len()
            )));
        }
        let bbox = match ann.bbox.as_deref() {
            Some(&[x, y, w, h]) => [x, y, w, h],
            Some(other) => return Err(fmt_err(format!("bbox has {} values", other.len()))),
            None => return Err(fmt_err("missing bbox".to_string())),
        };
        if !(bbox[2] > 0.0 && bbox[3] > 0.0) {
            return Err(fmt_err(format!("bbox {bbox:?} has non-positive size")));
        }
        let keypoints = ann
            .keypoints
            .chunks_exact(3)
            .map(|t| match t[2] {
                v if v == 0.0 || v == 1.0 || v == 2.0 => Ok(Triplet {
                    x: t[0],
                    y: t[1],
                    v: v as u8,
                }),
                v => Err(fmt_err(format!("visibility flag {v} not in {{0,1,2}}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let labeled = keypoints.iter().filter(|t| t.v > 0).count() as u64;
        if ann.num_keypoints.unwrap_or(labeled) == 0 {
            skipped_empty += 1;
            continue;
        }
        instances.push(RawInstance {
            id: ann.id,
            image_id: ann.image_id,
            bbox,
            area: ann.area.unwrap_or(bbox[2] * bbox[3]),
            keypoints,
            source_id: schema.id().to_string(),
        });
    }

    let descriptor = DatasetDescriptor {
        id: schema.id().to_string(),
        schema: schema.clone(),
        instance_count: total,
        skipped_empty,
        skipped_crowd,
        name_mismatches,
        file_digest: sha256_hex(bytes),
    };
    Ok((descriptor, instances))
}

/// Writes instances back out in the COCO dialect accepted by
/// [`parse_keypoint_json`].
pub fn write_keypoint_json<W: Write>(
    instances: &[RawInstance],
    schema: &SkeletonSchema,
    sink: W,
) -> Result<(), AnnotationError> {
    let image_ids: BTreeSet<u64> = instances.iter().map(|r| r.image_id).collect();
    let file = CocoFile {
        images: image_ids
            .into_iter()
            .map(|id| CocoImage { id, file_name: None })
            .collect(),
        annotations: instances
            .iter()
            .map(|r| CocoAnnotation {
                id: r.id,
                image_id: r.image_id,
                category_id: Some(1),
                keypoints: r
                    .keypoints
                    .iter()
                    .flat_map(|t| [t.x, t.y, f64::from(t.v)])
                    .collect(),
                num_keypoints: Some(r.labeled_count() as u64),
                bbox: Some(r.bbox.to_vec()),
                area: Some(r.area),
                iscrowd: None,
            })
            .collect(),
        categories: vec![CocoCategory {
            id: 1,
            name: Some("person".to_string()),
            keypoints: Some(schema.keypoints().iter().map(|k| k.to_string()).collect()),
        }],
    };
    serde_json::to_writer(sink, &file).map_err(|e| AnnotationError::Io(e.into()))
}

/// Lays a raw instance out on the union skeleton.
pub fn remap_to_union(
    raw: &RawInstance,
    mapping: &SchemaMapping,
    union_size: usize,
) -> Result<UnifiedInstance, AnnotationError> {
    if mapping.source_id != raw.source_id {
        return Err(AnnotationError::Internal(format!(
            "mapping for {:?} applied to instance from {:?}",
            mapping.source_id, raw.source_id
        )));
    }
    if mapping.len() != raw.keypoints.len() {
        return Err(AnnotationError::Internal(format!(
            "mapping has {} entries, instance has {} keypoints",
            mapping.len(),
            raw.keypoints.len()
        )));
    }
    let mut out = UnifiedInstance::empty(raw.image_id, raw.bbox, raw.area, union_size);
    for (t, &slot) in raw.keypoints.iter().zip(&mapping.index_map) {
        if slot >= union_size {
            return Err(AnnotationError::Internal(format!(
                "slot {slot} out of range for union of {union_size}"
            )));
        }
        if t.v > 0 {
            out.coords[slot] = [t.x, t.y];
            out.mask[slot] = true;
            out.vis[slot] = t.v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThoraxOutcome {
    Synthesized,
    AlreadyLabeled,
    /// At least one shoulder is unlabeled.
    MissingShoulder,
}

/// Fills the thorax slot with the midpoint of the two shoulders.
pub fn synthesize_thorax(
    inst: &UnifiedInstance,
    union: &UnionSchema,
) -> (UnifiedInstance, ThoraxOutcome) {
    let (Some(l), Some(r), Some(t)) = (
        union.index_of("left_shoulder"),
        union.index_of("right_shoulder"),
        union.index_of("thorax"),
    ) else {
        return (inst.clone(), ThoraxOutcome::MissingShoulder);
    };
    if inst.mask[t] {
        return (inst.clone(), ThoraxOutcome::AlreadyLabeled);
    }
    if !(inst.mask[l] && inst.mask[r]) {
        return (inst.clone(), ThoraxOutcome::MissingShoulder);
    }
    let mut out = inst.clone();
    let (a, b) = (inst.coords[l], inst.coords[r]);
    out.coords[t] = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    out.mask[t] = true;
    out.vis[t] = inst.vis[l].min(inst.vis[r]);
    (out, ThoraxOutcome::Synthesized)
}

/// Result of converting a whole file onto the union.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ConvertReport {
    pub converted: usize,
    /// Source keypoints with no counterpart in the union (e.g. Halpe feet).
    pub dropped_keypoints: Vec<KeypointName>,
    pub thorax_synthesized: usize,
    pub thorax_not_synthesized: usize,
}

pub fn convert_to_union(
    raws: &[RawInstance],
    source: &SkeletonSchema,
    union: &UnionSchema,
    thorax: bool,
) -> Result<(Vec<UnifiedInstance>, ConvertReport), AnnotationError> {
    let (mapping, kept, dropped) = mapping_into_lossy(source, union);
    let mut report = ConvertReport {
        dropped_keypoints: dropped,
        ..ConvertReport::default()
    };
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let mut inst = remap_to_union(&raw.project(&kept), &mapping, union.len())?;
        if thorax {
            let (synth, outcome) = synthesize_thorax(&inst, union);
            match outcome {
                ThoraxOutcome::Synthesized => report.thorax_synthesized += 1,
                ThoraxOutcome::MissingShoulder => report.thorax_not_synthesized += 1,
                ThoraxOutcome::AlreadyLabeled => {}
            }
            inst = synth;
        }
        out.push(inst);
    }
    report.converted = out.len();
    Ok((out, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct UnifiedFile {
    schema: Vec<String>,
    instances: Vec<UnifiedInstance>,
}

pub fn write_unified<W: Write>(
    instances: &[UnifiedInstance],
    union: &UnionSchema,
    sink: W,
) -> Result<(), AnnotationError> {
    if let Some(bad) = instances.iter().find(|i| i.len() != union.len()) {
        return Err(AnnotationError::Unified(format!(
            "instance for image {} has {} slots, union has {}",
            bad.image_id,
            bad.len(),
            union.len()
        )));
    }
    let file = UnifiedFile {
        schema: union.keypoints().iter().map(|k| k.to_string()).collect(),
        instances: instances.to_vec(),
    };
    serde_json::to_writer(sink, &file).map_err(|e| AnnotationError::Io(e.into()))
}

/// Reads a unified file; returns the slot names and instances.
pub fn read_unified(bytes: &[u8]) -> Result<(Vec<String>, Vec<UnifiedInstance>), AnnotationError> {
    let file: UnifiedFile = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, e))?;
    let n = file.schema.len();
    for inst in &file.instances {
        if inst.coords.len() != n || inst.mask.len() != n || inst.vis.len() != n {
            return Err(AnnotationError::Unified(format!(
                "instance for image {} is not sized to the {n}-slot schema",
                inst.image_id
            )));
        }
    }
    Ok((file.schema, file.instances))
}
