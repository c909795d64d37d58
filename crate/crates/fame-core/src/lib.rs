//! Fairness-aware multimodal fusion engine.
//!
//! The crate provides the full training and evaluation stack: a dense f64
//! compute kernel with reverse-mode gradients, a synthetic multimodal cohort
//! generator with subgroup bias injection, fairness and ranking metrics, the
//! disparity-weighted fusion model with frozen per-modality probes, and the
//! joint accuracy + fairness training loop.

pub mod cohort;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use cohort::{
    generate_cohort, load_cohort, split_cohort, write_cohort, Attribute, BiasSpec, Cohort,
    CohortRecord, CohortSchema, GeneratorConfig, ModalityDef, SensitiveAttributes, Split,
};
pub use error::{Error, Result};
pub use loss::{ins_class_weights, subgroup_rows, total_loss, LossParts};
pub use metrics::{fairness_report, FairnessReport, PredictionSet};
pub use model::{Batch, ForwardPass, FusionMode, FusionState, ModalityEddi};
pub use optim::{AdamW, Parameter};
pub use tape::{ClassWeights, NodeId, Tape};
pub use tensor::Tensor2;
pub use train::{evaluate, export_predictions, train, TrainConfig, TrainOutcome, WeightTrajectory};
