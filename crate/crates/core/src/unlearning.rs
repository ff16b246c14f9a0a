//! Unlearning requests, dataset corrections and the unlearning loop.
//!
//! A request is turned into a corrected training set `D'`. Clients whose
//! block changed push the resulting confidence delta into `H`, then the first
//! round combines descent on `D'` with ascent on `D`, and plain descent on
//! `D'` continues until the training loss stops improving.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::asynchronous::{fold_estimated, ContributionFactors, OnlineSchedule};
use crate::data::PartitionedData;
use crate::error::{Error, Result};
use crate::federation::{
    initialize, run_training_epochs, DeferredStep, EarlyStop, FederationState, MessageKind, Phase,
    TrainingConfig,
};
use crate::models::{global_loss_grad_weighted, LocalModel, ModelKind, ModelSpec};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scenario {
    ClientRemoval {
        client: usize,
    },
    FeatureRemoval {
        client: usize,
        features: Vec<usize>,
    },
    /// Cells are `(training row, feature index within the client's block)`.
    SensitiveCellRemoval {
        client: usize,
        cells: Vec<(usize, usize)>,
    },
    SampleRemoval {
        samples: Vec<usize>,
    },
    ClassRemoval {
        class: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearningRequest {
    pub scenario: Scenario,
    #[serde(default)]
    pub requested_at_epoch: usize,
    #[serde(default)]
    pub deadline: Option<usize>,
}

impl UnlearningRequest {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            requested_at_epoch: 0,
            deadline: None,
        }
    }

    /// The client that issues the request. Row-level removals come from the
    /// label owner.
    pub fn requester(&self, active_party: usize) -> usize {
        match &self.scenario {
            Scenario::ClientRemoval { client }
            | Scenario::FeatureRemoval { client, .. }
            | Scenario::SensitiveCellRemoval { client, .. } => *client,
            Scenario::SampleRemoval { .. } | Scenario::ClassRemoval { .. } => active_party,
        }
    }
}

/// The exact change a request makes to the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCorrection {
    /// Clients whose feature block changed, ascending.
    pub affected_clients: Vec<usize>,
    pub old_blocks: Vec<Matrix>,
    pub new_blocks: Vec<Matrix>,
    /// Rows whose features or loss weight changed, ascending.
    pub affected_samples: Vec<usize>,
    pub new_weights: Vec<f64>,
}

impl DatasetCorrection {
    pub fn z_count(&self) -> usize {
        self.affected_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.affected_samples.is_empty()
    }

    /// Writes the corrected blocks and weights into `data`.
    pub fn apply_to(&self, data: &PartitionedData) -> Result<PartitionedData> {
        let mut out = data.clone();
        for (i, &k) in self.affected_clients.iter().enumerate() {
            let block = out.blocks.get_mut(k).ok_or(Error::IndexOutOfRange {
                what: "client",
                index: k,
                len: data.client_count(),
            })?;
            if block.shape() != self.new_blocks[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "DatasetCorrection::apply_to",
                    left: block.shape(),
                    right: self.new_blocks[i].shape(),
                });
            }
            *block = self.new_blocks[i].clone();
        }
        out.weights = self.new_weights.clone();
        Ok(out)
    }
}

fn check_client(client: usize, data: &PartitionedData) -> Result<()> {
    if client >= data.client_count() {
        return Err(Error::IndexOutOfRange {
            what: "client",
            index: client,
            len: data.client_count(),
        });
    }
    Ok(())
}

fn check_rows(rows: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = rows.iter().find(|&&s| s >= n) {
        return Err(Error::IndexOutOfRange {
            what: "sample",
            index: bad,
            len: n,
        });
    }
    Ok(())
}

/// Produces `D'` and the correction that leads there from `data`.
pub fn apply_request(
    data: &PartitionedData,
    request: &UnlearningRequest,
) -> Result<(PartitionedData, DatasetCorrection)> {
    let n = data.rows();
    let mut blocks = data.blocks.clone();
    let mut weights = data.weights.clone();
    match &request.scenario {
        Scenario::ClientRemoval { client } => {
            check_client(*client, data)?;
            let b = &mut blocks[*client];
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        Scenario::FeatureRemoval { client, features } => {
            check_client(*client, data)?;
            if features.is_empty() {
                return Err(Error::invalid("feature removal needs at least one feature"));
            }
            let b = &mut blocks[*client];
            for &f in features {
                if f >= b.cols() {
                    return Err(Error::IndexOutOfRange {
                        what: "feature",
                        index: f,
                        len: b.cols(),
                    });
                }
                for r in 0..n {
                    b.set(r, f, 0.0);
                }
            }
        }
        Scenario::SensitiveCellRemoval { client, cells } => {
            check_client(*client, data)?;
            if cells.is_empty() {
                return Err(Error::invalid(
                    "sensitive-cell removal needs at least one cell",
                ));
            }
            let original = &data.blocks[*client];
            let means: Vec<f64> = original
                .column_sums()
                .into_iter()
                .map(|s| s / n as f64)
                .collect();
            let b = &mut blocks[*client];
            for &(s, f) in cells {
                check_rows(&[s], n)?;
                if f >= b.cols() {
                    return Err(Error::IndexOutOfRange {
                        what: "feature",
                        index: f,
                        len: b.cols(),
                    });
                }
                b.set(s, f, means[f]);
            }
        }
        Scenario::SampleRemoval { samples } => {
            if samples.is_empty() {
                return Err(Error::invalid("sample removal needs at least one sample"));
            }
            check_rows(samples, n)?;
            mask_rows(&mut blocks, &mut weights, samples);
        }
        Scenario::ClassRemoval { class } => {
            if *class >= data.class_count {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: *class,
                    len: data.class_count,
                });
            }
            let rows: Vec<usize> = (0..n).filter(|&s| data.labels[s] == *class).collect();
            if rows.is_empty() {
                return Err(Error::invalid(format!(
                    "class {class} has no training rows"
                )));
            }
            mask_rows(&mut blocks, &mut weights, &rows);
        }
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("request would remove every training row"));
    }

    let affected_clients: Vec<usize> = (0..data.client_count())
        .filter(|&k| blocks[k] != data.blocks[k])
        .collect();
    let affected_samples: Vec<usize> = (0..n)
        .filter(|&s| {
            weights[s] != data.weights[s]
                || affected_clients
                    .iter()
                    .any(|&k| blocks[k].row(s) != data.blocks[k].row(s))
        })
        .collect();
    let correction = DatasetCorrection {
        old_blocks: affected_clients
            .iter()
            .map(|&k| data.blocks[k].clone())
            .collect(),
        new_blocks: affected_clients
            .iter()
            .map(|&k| blocks[k].clone())
            .collect(),
        affected_clients,
        affected_samples,
        new_weights: weights.clone(),
    };
    let corrected = PartitionedData {
        blocks,
        labels: data.labels.clone(),
        targets: data.targets.clone(),
        weights,
        class_count: data.class_count,
    };
    Ok((corrected, correction))
}

fn mask_rows(blocks: &mut [Matrix], weights: &mut [f64], rows: &[usize]) {
    for &s in rows {
        weights[s] = 0.0;
        for b in blocks.iter_mut() {
            b.row_mut(s).fill(0.0);
        }
    }
}

/// The same correction as seen at inference time: removed clients and
/// features are zeroed in the test split as well. Row-level removals and
/// cell replacements only concern training rows.
pub fn transform_test(
    test: &PartitionedData,
    request: &UnlearningRequest,
) -> Result<PartitionedData> {
    let mut out = test.clone();
    match &request.scenario {
        Scenario::ClientRemoval { client } => {
            check_client(*client, test)?;
            let b = &mut out.blocks[*client];
            *b = Matrix::zeros(b.rows(), b.cols());
        }
        Scenario::FeatureRemoval { client, features } => {
            check_client(*client, test)?;
            let b = &mut out.blocks[*client];
            for &f in features {
                for r in 0..b.rows() {
                    b.set(r, f, 0.0);
                }
            }
        }
        _ => {}
    }
    Ok(out)
}

/// `forward(theta, X_new) - forward(theta, X_old)`.
pub fn confidence_delta(model: &LocalModel, x_old: &Matrix, x_new: &Matrix) -> Result<Matrix> {
    if x_old.shape() != x_new.shape() {
        return Err(Error::ShapeMismatch {
            op: "confidence_delta",
            left: x_old.shape(),
            right: x_new.shape(),
        });
    }
    model.forward(x_new)?.sub(&model.forward(x_old)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    /// Cap on unlearning epochs, first round included.
    pub max_epochs: usize,
    /// First-round step size; the training learning rate when absent.
    pub tau: Option<f64>,
    pub early_stop_patience: usize,
    pub loss_tolerance: f64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            tau: None,
            early_stop_patience: 5,
            loss_tolerance: 1e-4,
        }
    }
}

/// What an unlearning run did, beyond the mutated state.
#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub correction: DatasetCorrection,
    /// The training data before correction.
    pub original: PartitionedData,
    pub epochs: usize,
    pub loss_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub loss_after_first_round: f64,
    pub residual_after_first_round: f64,
    pub online_counts: Vec<usize>,
}

/// Applies the first-round step of client `k`:
/// `theta -= tau * (grad L(theta; D') - grad L(theta; D))`.
///
/// The weight-decay terms cancel; the perturbation contributes
/// `b (1/n_new - 1/n_old)` because both objectives are means.
#[allow(clippy::too_many_arguments)]
pub(crate) fn first_round_client_step(
    state: &mut FederationState,
    k: usize,
    g_old: &Matrix,
    g_new: &Matrix,
    old_block: &Matrix,
    n_old: f64,
    n_new: f64,
    tau: f64,
) -> Result<()> {
    let model = &state.models[k];
    let mut step = model.backward(&state.data.blocks[k], g_new)?;
    step.add_scaled(-1.0, &model.backward(old_block, g_old)?)?;
    let shift: Vec<f64> = state.perturbations[k]
        .iter()
        .map(|b| b * (1.0 / n_new - 1.0 / n_old))
        .collect();
    step.add_scaled(1.0, &model.params().with_values(&shift)?)?;
    state.models[k].params_mut().add_scaled(-tau, &step)
}

/// The combined ascent/descent step on every client, computed from
/// confidences recomputed on `old` and on the state's current (corrected) data.
///
/// `state.data` must already hold `D'`.
pub fn first_round_update(
    state: &mut FederationState,
    old: &PartitionedData,
    tau: f64,
) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
    }
    let g_old =
        global_loss_grad_weighted(&state.true_confidence(old)?, &old.targets, &old.weights)?;
    let new = state.data.clone();
    let g_new =
        global_loss_grad_weighted(&state.true_confidence(&new)?, &new.targets, &new.weights)?;
    let (n_old, n_new) = (old.n_eff(), new.n_eff());
    for k in 0..state.client_count() {
        first_round_client_step(state, k, &g_old, &g_new, &old.blocks[k], n_old, n_new, tau)?;
    }
    for k in 0..state.client_count() {
        let fresh = state.models[k].forward(&state.data.blocks[k])?;
        state.client_outputs[k] = fresh.clone();
        state.confidence.per_client_estimated[k] = fresh;
    }
    state.confidence.h = state.true_confidence(&new)?;
    Ok(())
}

/// Folds an epoch's reported deltas into `H`, estimating offline clients when
/// there are any.
fn fold_deltas(
    state: &mut FederationState,
    deltas: &[(usize, Matrix)],
    offline: &[usize],
    factors: Option<&ContributionFactors>,
) -> Result<()> {
    if offline.is_empty() {
        for (k, d) in deltas {
            state.confidence.apply_delta(*k, d)?;
        }
        return Ok(());
    }
    let factors =
        factors.ok_or_else(|| Error::invalid("offline clients need contribution factors"))?;
    fold_estimated(state, deltas, factors, offline)
}

/// Who takes part in each unlearning epoch.
#[derive(Clone, Copy)]
pub(crate) enum Participation<'a> {
    Everyone,
    /// Offline clients defer their updates and are estimated through the factors.
    Scheduled(&'a OnlineSchedule, &'a ContributionFactors),
    /// Only the listed clients ever update; everyone else stays frozen.
    Only(&'a [usize]),
}

/// Shared unlearning loop.
pub(crate) fn run_unlearning(
    state: &mut FederationState,
    request: &UnlearningRequest,
    cfg: &UnlearnConfig,
    participation: Participation<'_>,
) -> Result<UnlearnOutcome> {
    let plan = match participation {
        Participation::Scheduled(schedule, factors) => Some((schedule, factors)),
        _ => None,
    };
    let frozen_outside = match participation {
        Participation::Only(clients) => Some(clients),
        _ => None,
    };
    if cfg.max_epochs == 0 {
        return Err(Error::invalid("unlearning needs max_epochs >= 1"));
    }
    let k_count = state.client_count();
    let active = state.active_party;
    let requester = request.requester(active);
    if let Some((schedule, factors)) = plan {
        schedule.validate(k_count, &[active, requester], cfg.max_epochs)?;
        if factors.r.shape() != (state.data.rows(), k_count) {
            return Err(Error::ShapeMismatch {
                op: "contribution factors",
                left: factors.r.shape(),
                right: (state.data.rows(), k_count),
            });
        }
    }
    let tau = cfg.tau.unwrap_or(state.config.eta);
    let everyone: Vec<usize> = (0..k_count).collect();
    if let Some(clients) = frozen_outside {
        if let Some(&k) = clients.iter().find(|&&k| k >= k_count) {
            return Err(Error::IndexOutOfRange {
                what: "participating client",
                index: k,
                len: k_count,
            });
        }
    }
    let online_at = |epoch: usize, extra: &[usize]| -> Vec<usize> {
        if let Some(clients) = frozen_outside {
            let mut set = clients.to_vec();
            set.sort_unstable();
            set.dedup();
            return set;
        }
        match plan {
            None => everyone.clone(),
            Some((schedule, _)) => {
                let mut set = schedule.online_at(epoch).to_vec();
                set.extend_from_slice(extra);
                set.sort_unstable();
                set.dedup();
                set
            }
        }
    };

    let (new_data, correction) = apply_request(&state.data, request)?;
    let original = std::mem::replace(&mut state.data, new_data);
    let (n_old, n_new) = (original.n_eff(), state.n_eff());
    let payload = original.rows() * original.class_count;
    let g_old = Arc::new(global_loss_grad_weighted(
        &state.confidence.h,
        &original.targets,
        &original.weights,
    )?);

    // Step 1: affected clients report how the correction moves their output.
    for &k in &correction.affected_clients {
        let delta = state.refresh_output(k)?;
        state.ledger.record(
            Phase::Unlearning,
            1,
            k,
            active,
            MessageKind::ConfidenceDelta,
            payload,
        );
        state.confidence.apply_delta(k, &delta)?;
    }

    // First round: descent on D', ascent on D.
    let online = online_at(1, &correction.affected_clients);
    let offline: Vec<usize> = if frozen_outside.is_some() {
        Vec::new()
    } else {
        everyone
            .iter()
            .copied()
            .filter(|k| !online.contains(k))
            .collect()
    };
    let g_new = Arc::new(global_loss_grad_weighted(
        &state.confidence.h,
        &state.data.targets,
        &state.data.weights,
    )?);
    let mut deltas = Vec::with_capacity(online.len());
    for &k in &online {
        state.ledger.record(
            Phase::Unlearning,
            1,
            active,
            k,
            MessageKind::GradientBroadcast,
            2 * payload,
        );
        state.last_received[k] = Some((*g_new).clone());
        first_round_client_step(
            state,
            k,
            &g_old,
            &g_new,
            &original.blocks[k],
            n_old,
            n_new,
            tau,
        )?;
        let delta = state.refresh_output(k)?;
        state.ledger.record(
            Phase::Unlearning,
            1,
            k,
            active,
            MessageKind::ConfidenceDelta,
            payload,
        );
        deltas.push((k, delta));
    }
    for &k in &offline {
        state.pending[k].push(DeferredStep::FirstRound {
            g_old: Arc::clone(&g_old),
            g_new: Arc::clone(&g_new),
            old_block: original.blocks[k].clone(),
            n_old,
            n_new,
            tau,
        });
    }
    fold_deltas(state, &deltas, &offline, plan.map(|p| p.1))?;

    let loss_first = state.objective()?;
    state.check_loss(1, loss_first)?;
    let residual_first = state.gradient_residual(&state.data.clone())?;
    let mut loss_trace = vec![loss_first];
    let mut residual_trace = vec![residual_first];
    let mut online_counts = vec![online.len()];
    let mut stop = EarlyStop::new(cfg.early_stop_patience, cfg.loss_tolerance);
    let mut epochs = 1;
    let stopped = stop.observe(loss_first);

    if !stopped {
        for epoch in 2..=cfg.max_epochs {
            let online = online_at(epoch, &[]);
            let offline: Vec<usize> = if frozen_outside.is_some() {
                Vec::new()
            } else {
                everyone
                    .iter()
                    .copied()
                    .filter(|k| !online.contains(k))
                    .collect()
            };
            for &k in &online {
                if !state.pending[k].is_empty() {
                    reconcile_client_at(state, k, epoch)?;
                }
            }
            let (g, deltas) = state.broadcast_epoch(Phase::Unlearning, epoch, &online)?;
            if !offline.is_empty() {
                let g = Arc::new(g);
                for &k in &offline {
                    state.pending[k].push(DeferredStep::Descent {
                        grad: Arc::clone(&g),
                        n_eff: n_new,
                    });
                }
            }
            fold_deltas(state, &deltas, &offline, plan.map(|p| p.1))?;
            let loss = state.objective()?;
            state.check_loss(epoch, loss)?;
            loss_trace.push(loss);
            residual_trace.push(state.gradient_residual(&state.data.clone())?);
            online_counts.push(online.len());
            epochs = epoch;
            if stop.observe(loss) {
                break;
            }
        }
    }
    state.residual_trace.extend_from_slice(&residual_trace);
    Ok(UnlearnOutcome {
        correction,
        original,
        epochs,
        loss_trace,
        residual_trace,
        loss_after_first_round: loss_first,
        residual_after_first_round: residual_first,
        online_counts,
    })
}

/// Replays client `k`'s deferred updates and swaps its estimated
/// contribution in `H` for the recomputed one. Returns false when there was
/// nothing to reconcile.
pub(crate) fn reconcile_client_at(
    state: &mut FederationState,
    k: usize,
    epoch: usize,
) -> Result<bool> {
    let steps = std::mem::take(&mut state.pending[k]);
    if steps.is_empty() {
        return Ok(false);
    }
    let active = state.active_party;
    let payload = state.data.rows() * state.class_count();
    for step in &steps {
        match step {
            DeferredStep::Descent { grad, n_eff } => {
                state.ledger.record(
                    Phase::Reconciliation,
                    epoch,
                    active,
                    k,
                    MessageKind::GradientBroadcast,
                    payload,
                );
                let grads = state.models[k].backward(&state.data.blocks[k], grad)?;
                let b = state.mean_perturbation(k, *n_eff);
                let (eta, lambda) = (state.config.eta, state.config.l2_lambda);
                state.models[k].apply_update(&grads, eta, lambda, Some(&b))?;
            }
            DeferredStep::FirstRound {
                g_old,
                g_new,
                old_block,
                n_old,
                n_new,
                tau,
            } => {
                state.ledger.record(
                    Phase::Reconciliation,
                    epoch,
                    active,
                    k,
                    MessageKind::GradientBroadcast,
                    2 * payload,
                );
                first_round_client_step(state, k, g_old, g_new, old_block, *n_old, *n_new, *tau)?;
            }
        }
    }
    let fresh = state.models[k].forward(&state.data.blocks[k])?;
    state.client_outputs[k] = fresh.clone();
    state.confidence.replace_contribution(k, fresh)?;
    state.estimates.reset(k);
    state.ledger.record(
        Phase::Reconciliation,
        epoch,
        k,
        active,
        MessageKind::ConfidenceFull,
        payload,
    );
    Ok(true)
}

/// Synchronous unlearning with every client online.
pub fn unlearn_sync(
    state: &mut FederationState,
    request: &UnlearningRequest,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_unlearning(state, request, cfg, Participation::Everyone)
}

/// Unlearning in which only the requesting client updates its model while
/// every other party keeps its trained parameters. The active party still
/// aggregates and broadcasts gradients.
pub fn unlearn_requester_only(
    state: &mut FederationState,
    request: &UnlearningRequest,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let requester = [request.requester(state.active_party)];
    run_unlearning(state, request, cfg, Participation::Only(&requester))
}

/// Trains fresh models on the corrected data.
pub fn retrain_baseline(
    corrected: PartitionedData,
    spec: &ModelSpec,
    active_party: usize,
    cfg: &TrainingConfig,
) -> Result<FederationState> {
    let models = spec.build(
        &corrected.widths(),
        corrected.class_count,
        active_party,
        cfg.seed,
    )?;
    let mut state = initialize(corrected, models, active_party, cfg, Phase::Training)?;
    run_training_epochs(&mut state, Phase::Training)?;
    Ok(state)
}

/// Subtracts the removed client's contribution from `H`, then takes one
/// descent step on the remaining clients.
pub fn vfulr_baseline(
    state: &mut FederationState,
    request: &UnlearningRequest,
) -> Result<UnlearnOutcome> {
    let Scenario::ClientRemoval { client } = request.scenario else {
        return Err(Error::Unsupported(
            "the subtraction baseline only handles client removal".into(),
        ));
    };
    if state.models.iter().any(|m| m.kind() != ModelKind::Linear) {
        return Err(Error::Unsupported(
            "the subtraction baseline requires linear local models".into(),
        ));
    }
    let (new_data, correction) = apply_request(&state.data, request)?;
    let original = std::mem::replace(&mut state.data, new_data);
    let active = state.active_party;
    let payload = original.rows() * original.class_count;

    let removed = &mut state.models[client];
    let zeros = removed.params().zeros_like();
    *removed.params_mut() = zeros;
    let cleared = state.models[client].forward(&state.data.blocks[client])?;
    state.client_outputs[client] = cleared.clone();
    state.confidence.replace_contribution(client, cleared)?;
    state.ledger.record(
        Phase::Unlearning,
        1,
        client,
        active,
        MessageKind::ConfidenceDelta,
        payload,
    );

    let remaining: Vec<usize> = (0..state.client_count()).filter(|&k| k != client).collect();
    let (_, deltas) = state.broadcast_epoch(Phase::Unlearning, 1, &remaining)?;
    for (k, d) in &deltas {
        state.confidence.apply_delta(*k, d)?;
    }
    let loss = state.objective()?;
    state.check_loss(1, loss)?;
    let residual = state.gradient_residual(&state.data.clone())?;
    state.residual_trace.push(residual);
    Ok(UnlearnOutcome {
        correction,
        original,
        epochs: 1,
        loss_trace: vec![loss],
        residual_trace: vec![residual],
        loss_after_first_round: loss,
        residual_after_first_round: residual,
        online_counts: vec![remaining.len()],
    })
}
