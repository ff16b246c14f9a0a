//! Fixtures shared by the protocol benchmarks.

use vfu_core::data::{synthesize, SyntheticSpec};
use vfu_core::federation::train;
use vfu_core::{FederationState, ModelSpec, PartitionedData, Result, TrainingConfig};

/// Training split of a seeded synthetic dataset.
pub fn synthetic(n: usize, widths: &[usize], classes: usize, seed: u64) -> Result<PartitionedData> {
    synthesize(
        &SyntheticSpec::new(n, widths.to_vec(), classes).margin(3.0),
        seed,
    )?
    .train()
}

pub fn bench_config(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        eta: 1.0,
        l2_lambda: 1e-3,
        max_epochs: epochs,
        early_stop_patience: 0,
        ..TrainingConfig::default()
    }
}

/// A federation trained for `epochs` epochs with the last client active.
pub fn trained(data: PartitionedData, spec: &ModelSpec, epochs: usize) -> Result<FederationState> {
    let active = data.client_count() - 1;
    let models = spec.build(&data.widths(), data.class_count, active, 0)?;
    train(data, models, active, &bench_config(epochs))
}
