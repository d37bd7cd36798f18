//! Unified multi-dataset pose skeletons.
//!
//! Builds a superset skeleton from several keypoint datasets, trains a
//! single student on partially labeled data with a conditional keypoint
//! loss plus KL distillation from subset-expert teachers, and evaluates it
//! with PCK / PCKh and OKS-based AP.

pub mod annotations;
pub mod cli;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod schema;
pub mod synth;

pub use annotations::{RawInstance, UnifiedInstance};
pub use losses::{KeypointDistribution, LossWeights, StudentPrediction, TeacherPrediction};
pub use metrics::EvalReport;
pub use model::StudentModel;
pub use schema::{SkeletonSchema, UnionSchema};
