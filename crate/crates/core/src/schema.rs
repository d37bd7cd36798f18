//! Skeleton schemas and the set algebra used to build a superset skeleton.
//!
//! A [`SkeletonSchema`] is the ordered keypoint list one dataset annotates.
//! [`build_union`] merges several of them into a [`UnionSchema`]; every source
//! then gets a [`SchemaMapping`] telling where its keypoint `k` lives inside
//! the union.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("invalid keypoint name {0:?}: expected [a-z][a-z0-9_]*")]
    InvalidName(String),
    #[error("schema {schema:?} lists keypoint {name:?} more than once")]
    Duplicate { schema: String, name: String },
    #[error("schema id must not be empty")]
    EmptyId,
    #[error("cannot build a union from zero schemas")]
    NoSchemas,
    #[error("keypoint {name:?} of schema {source_id:?} is absent from the union")]
    MissingKeypoint { source_id: String, name: String },
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("alias {alias:?} points at invalid target {target:?}")]
    BadAlias { alias: String, target: String },
    #[error("schema file: {0}")]
    File(String),
}

/// Canonical keypoint identifier. Identity is exact string equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeypointName(String);

impl KeypointName {
    pub fn new(name: impl Into<String>) -> Result<Self, SchemaError> {
        let name = name.into();
        let mut chars = name.chars();
        let head_ok = matches!(chars.next(), Some(c) if c.is_ascii_lowercase());
        let tail_ok = chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if head_ok && tail_ok {
            Ok(Self(name))
        } else {
            Err(SchemaError::InvalidName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for KeypointName {
    type Error = SchemaError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<KeypointName> for String {
    fn from(value: KeypointName) -> Self {
        value.0
    }
}

impl fmt::Display for KeypointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One dataset's skeleton, in native annotation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkeletonSchema {
    id: String,
    keypoints: Vec<KeypointName>,
}

impl SkeletonSchema {
    pub fn new(id: impl Into<String>, keypoints: Vec<KeypointName>) -> Result<Self, SchemaError> {
        let id = id.into();
        if id.is_empty() {
            return Err(SchemaError::EmptyId);
        }
        let mut seen = BTreeSet::new();
        for kp in &keypoints {
            if !seen.insert(kp) {
                return Err(SchemaError::Duplicate {
                    schema: id,
                    name: kp.0.clone(),
                });
            }
        }
        Ok(Self { id, keypoints })
    }

    pub fn from_names<S: AsRef<str>>(id: &str, names: &[S]) -> Result<Self, SchemaError> {
        let keypoints = names
            .iter()
            .map(|n| KeypointName::new(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(id, keypoints)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn keypoints(&self) -> &[KeypointName] {
        &self.keypoints
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k.as_str() == name)
    }

    pub fn contains(&self, name: &KeypointName) -> bool {
        self.keypoints.contains(name)
    }
}

/// Superset skeleton with per-keypoint provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnionSchema {
    keypoints: Vec<KeypointName>,
    provenance: Vec<BTreeSet<String>>,
}

impl UnionSchema {
    pub fn keypoints(&self) -> &[KeypointName] {
        &self.keypoints
    }

    pub fn provenance(&self) -> &[BTreeSet<String>] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k.as_str() == name)
    }

    /// Slot index of a name; panics if absent. For built-in names only.
    pub fn slot(&self, name: &str) -> usize {
        self.index_of(name)
            .unwrap_or_else(|| panic!("keypoint {name} not in union"))
    }

    /// The union viewed as a plain schema with id `"union"`.
    pub fn as_schema(&self) -> SkeletonSchema {
        SkeletonSchema {
            id: "union".to_string(),
            keypoints: self.keypoints.clone(),
        }
    }

    /// A union with a given slot order, provenance taken from `sources`.
    /// Used to reattach provenance to slot lists read back from files.
    pub fn from_slots<S: AsRef<str>>(
        names: &[S],
        sources: &[SkeletonSchema],
    ) -> Result<Self, SchemaError> {
        let keypoints = SkeletonSchema::from_names("union", names)?.keypoints;
        let provenance = keypoints
            .iter()
            .map(|k| {
                sources
                    .iter()
                    .filter(|s| s.contains(k))
                    .map(|s| s.id.clone())
                    .collect()
            })
            .collect();
        Ok(Self {
            keypoints,
            provenance,
        })
    }

    /// Slots whose provenance includes `source_id`.
    pub fn slots_of(&self, source_id: &str) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| p.contains(source_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Index map from a source schema into a union.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMapping {
    pub source_id: String,
    pub index_map: Vec<usize>,
}

impl SchemaMapping {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }
}

/// Union of all schemas: the first schema in native order, then each later
/// schema's unseen keypoints in its native order.
pub fn build_union(schemas: &[SkeletonSchema]) -> Result<UnionSchema, SchemaError> {
    if schemas.is_empty() {
        return Err(SchemaError::NoSchemas);
    }
    let mut keypoints: Vec<KeypointName> = Vec::new();
    let mut provenance: Vec<BTreeSet<String>> = Vec::new();
    let mut slot_of: HashMap<KeypointName, usize> = HashMap::new();
    for schema in schemas {
        // SkeletonSchema::new enforces this, but schemas may be deserialized.
        let distinct: BTreeSet<_> = schema.keypoints.iter().collect();
        if distinct.len() != schema.keypoints.len() {
            let mut seen = BTreeSet::new();
            let dup = schema.keypoints.iter().find(|k| !seen.insert(*k)).unwrap();
            return Err(SchemaError::Duplicate {
                schema: schema.id.clone(),
                name: dup.0.clone(),
            });
        }
        for kp in &schema.keypoints {
            let slot = *slot_of.entry(kp.clone()).or_insert_with(|| {
                keypoints.push(kp.clone());
                provenance.push(BTreeSet::new());
                keypoints.len() - 1
            });
            provenance[slot].insert(schema.id.clone());
        }
    }
    Ok(UnionSchema {
        keypoints,
        provenance,
    })
}

/// Keypoints of `a` that also appear in `b`, in `a`'s order.
pub fn overlap(a: &SkeletonSchema, b: &SkeletonSchema) -> Vec<KeypointName> {
    a.keypoints
        .iter()
        .filter(|k| b.contains(k))
        .cloned()
        .collect()
}

/// Keypoints of `a` that do not appear in `b`, in `a`'s order.
pub fn unique_to(a: &SkeletonSchema, b: &SkeletonSchema) -> Vec<KeypointName> {
    a.keypoints
        .iter()
        .filter(|k| !b.contains(k))
        .cloned()
        .collect()
}

pub fn mapping_into(
    source: &SkeletonSchema,
    union: &UnionSchema,
) -> Result<SchemaMapping, SchemaError> {
    let index_map = source
        .keypoints
        .iter()
        .map(|k| {
            union
                .index_of(k.as_str())
                .ok_or_else(|| SchemaError::MissingKeypoint {
                    source_id: source.id.clone(),
                    name: k.0.clone(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SchemaMapping {
        source_id: source.id.clone(),
        index_map,
    })
}

/// Mapping for the part of `source` that exists in the union.
///
/// Returns the mapping of the kept keypoints, the source indices kept, and
/// the names that were dropped.
pub fn mapping_into_lossy(
    source: &SkeletonSchema,
    union: &UnionSchema,
) -> (SchemaMapping, Vec<usize>, Vec<KeypointName>) {
    let mut index_map = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (k, name) in source.keypoints.iter().enumerate() {
        match union.index_of(name.as_str()) {
            Some(slot) => {
                index_map.push(slot);
                kept.push(k);
            }
            None => dropped.push(name.clone()),
        }
    }
    (
        SchemaMapping {
            source_id: source.id.clone(),
            index_map,
        },
        kept,
        dropped,
    )
}

pub const COCO17: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// MPII native order.
pub const MPII16: [&str; 16] = [
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
];

/// Halpe body-26. Indices 17..=19 are Halpe's head, neck and hip.
pub const HALPE26: [&str; 26] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head_top",
    "upper_neck",
    "pelvis",
    "left_big_toe",
    "right_big_toe",
    "left_small_toe",
    "right_small_toe",
    "left_heel",
    "right_heel",
];

const BUILTIN_ALIASES: [(&str, &str); 16] = [
    ("neck", "upper_neck"),
    ("head", "head_top"),
    ("hip", "pelvis"),
    ("r_ankle", "right_ankle"),
    ("r_knee", "right_knee"),
    ("r_hip", "right_hip"),
    ("l_hip", "left_hip"),
    ("l_knee", "left_knee"),
    ("l_ankle", "left_ankle"),
    ("r_wrist", "right_wrist"),
    ("r_elbow", "right_elbow"),
    ("r_shoulder", "right_shoulder"),
    ("l_shoulder", "left_shoulder"),
    ("l_elbow", "left_elbow"),
    ("l_wrist", "left_wrist"),
    ("upper neck", "upper_neck"),
];

pub fn coco17() -> SkeletonSchema {
    SkeletonSchema::from_names("coco17", &COCO17).expect("builtin schema")
}

pub fn mpii16() -> SkeletonSchema {
    SkeletonSchema::from_names("mpii16", &MPII16).expect("builtin schema")
}

pub fn halpe26() -> SkeletonSchema {
    SkeletonSchema::from_names("halpe26", &HALPE26).expect("builtin schema")
}

/// The 21-keypoint COCO + MPII union used throughout the toolkit.
pub fn coco_mpii_union() -> UnionSchema {
    build_union(&[coco17(), mpii16()]).expect("builtin schemas are valid")
}

/// On-disk schema definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub id: String,
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

/// Named schemas plus an alias table mapping alternate spellings onto
/// canonical names.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, SkeletonSchema>,
    aliases: BTreeMap<String, String>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SchemaRegistry {
    pub fn builtin() -> Self {
        let schemas = [coco17(), mpii16(), halpe26()]
            .into_iter()
            .map(|s| (s.id.clone(), s))
            .collect();
        let aliases = BUILTIN_ALIASES
            .iter()
            .map(|(a, t)| (a.to_string(), t.to_string()))
            .collect();
        Self { schemas, aliases }
    }

    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn get(&self, id: &str) -> Result<&SkeletonSchema, SchemaError> {
        self.schemas
            .get(id)
            .ok_or_else(|| SchemaError::UnknownSchema(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.keys().map(String::as_str)
    }

    /// Registers a schema file's aliases, then the schema itself with every
    /// name resolved through the alias table.
    pub fn register_file(&mut self, file: &SchemaFile) -> Result<&SkeletonSchema, SchemaError> {
        for (alias, target) in &file.aliases {
            if KeypointName::new(target.as_str()).is_err() {
                return Err(SchemaError::BadAlias {
                    alias: alias.clone(),
                    target: target.clone(),
                });
            }
            self.aliases.insert(alias.clone(), target.clone());
        }
        let names: Vec<&str> = file.keypoints.iter().map(|n| self.resolve(n)).collect();
        let schema = SkeletonSchema::from_names(&file.id, &names)?;
        self.schemas.insert(file.id.clone(), schema);
        Ok(&self.schemas[&file.id])
    }

    pub fn register_json(&mut self, bytes: &[u8]) -> Result<&SkeletonSchema, SchemaError> {
        let file: SchemaFile =
            serde_json::from_slice(bytes).map_err(|e| SchemaError::File(e.to_string()))?;
        self.register_file(&file)
    }
}
