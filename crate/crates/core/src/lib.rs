//! Desk-scale lab for training a structured misinformation-verdict policy
//! with group relative policy optimization.
//!
//! The crate covers the consistency-category logic, the tagged verdict
//! format, the composite reward, a toy factorized policy, the GRPO update,
//! a synthetic data generator with its JSONL manifest, evaluation metrics
//! and retrieval-augmented prompt assembly.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); box geometry only
//! needs [`Coord`], so exact rational coordinates work too. The aliases
//! below fix the common instantiations.

pub mod context;
pub mod domain;
pub mod environment;
pub mod grpo;
pub mod metrics;
pub mod parser;
pub mod policy;
pub mod reward;
pub mod scalar;

pub use domain::{derive_category, BBox, Category, ModalityState, Sample};
pub use parser::{check_format, parse_output, render_output, FormatError, FormatVerdict, StructuredOutput};
pub use policy::{Observation, Policy, ReferencePolicy, ResponseTokens};
pub use reward::{region_iou, reward_total, RewardBreakdown};
pub use scalar::{Coord, Scalar};

/// Exact rational coordinate.
pub type Exact = num_rational::Ratio<i64>;

pub type BBoxF64 = BBox<f64>;
pub type BBoxF32 = BBox<f32>;
pub type ExactBBox = BBox<Exact>;
pub type SampleF64 = Sample<f64>;
pub type SampleF32 = Sample<f32>;
pub type StructuredOutputF64 = StructuredOutput<f64>;
pub type RewardBreakdownF64 = RewardBreakdown<f64>;
pub type ObservationF64 = Observation<f64>;
pub type PolicyF64 = Policy<f64>;
pub type PolicyF32 = Policy<f32>;
pub type ReferencePolicyF64 = ReferencePolicy<f64>;
pub type ToySampleF64 = environment::ToySample<f64>;
