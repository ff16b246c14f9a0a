//! Vertical federated learning with certified unlearning.
//!
//! Clients each hold a vertical slice of the features and a local model; the
//! active party owns the labels and maintains the summed confidence matrix.
//! Unlearning requests are processed through confidence deltas, a combined
//! ascent/descent first round and early-stopped fine-tuning, either with all
//! clients online or with offline clients estimated from contribution factors.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons deliberately reject NaN

pub mod asynchronous;
pub mod certification;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod unlearning;

pub use asynchronous::{ContributionFactors, EstimateAccumulator, OnlineSchedule};
pub use certification::{CertParams, CertificationReport};
pub use data::{DatasetManifest, PartitionedData, RawTable, ScalingRecord, VerticalDataset};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Mode, ResultRecord, SweepAxis};
pub use federation::{
    CommLedger, ConfidenceMatrix, FederationState, MessageKind, PartyId, Phase, Role,
    TrainingConfig,
};
pub use models::{GlobalModel, LocalModel, ModelKind, ModelSpec, Params};
pub use numerics::{Matrix, RandomSource};
pub use unlearning::{
    DatasetCorrection, Scenario, UnlearnConfig, UnlearnOutcome, UnlearningRequest,
};
