//! Spurious-feature sensitivity analysis for gender-bias evaluations of
//! vision-language models.
//!
//! The crate is organized along the evaluation workflow:
//!
//! - [`corpus`]: benchmark manifests, gender balancing and splits.
//! - [`imaging`]: pixel primitives (HSV, blur, fills, downsampling).
//! - [`perturb`]: controlled color / lighting / object / background interventions.
//! - [`features`]: feature-isolated inputs for gender probes.
//! - [`probe`]: a hand-written two-layer MLP gender classifier.
//! - [`adapters`]: model backends (replay, HTTP wire, synthetic) and prompts.
//! - [`metrics`]: YGap, MaxSkew@k, relative difference, composite score.
//! - [`synthlab`]: synthetic gender/feature/output worlds.
//! - [`report`]: CSV tables and figure data.
//! - [`pipeline`]: end-to-end drivers used by the command-line tool.

pub mod adapters;
pub mod corpus;
pub mod error;
pub mod features;
pub mod fixture;
mod fsutil;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod perturb;
pub mod probe;
pub mod report;
pub mod seed;
pub mod synthlab;

pub use adapters::{ModelBackend, Prompt, PromptCategory, PromptSet, ResponseTable, VqaAnswer};
pub use corpus::{BBox, Dataset, GenderLabel, ImageRecord, ObjectAnnotation};
pub use error::{Error, Result};
pub use features::{FeatureVector, Vocabulary};
pub use imaging::{HsvImage, Image, Region};
pub use metrics::{DeltaValue, MetricKind, MetricValue, RankTable};
pub use perturb::{FeatureKind, PerturbationSpec, Strength};
pub use probe::{MlpProbe, ProbeResult, TrainConfig};
