//! The AggVFL training protocol.
//!
//! Every client keeps its own model and a cache of its last confidence output.
//! The active party keeps the summed confidence matrix `H`, computes the
//! gradient of the loss with respect to `H` and broadcasts that one matrix to
//! every client. Clients answer with the change of their confidence output,
//! which the active party folds back into `H`.
//!
//! The training objective is the weighted mean cross-entropy plus
//! `lambda/2 |theta|^2` plus `b . theta / n_eff`, where `b` is the per-client
//! perturbation drawn once before the first epoch. Residuals are reported in
//! summed-loss units, i.e. `n_eff` times the gradient of that objective.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::asynchronous::{ContributionFactors, EstimateAccumulator};
use crate::data::PartitionedData;
use crate::error::{Error, Result};
use crate::models::{global_loss_grad_weighted, global_predict, LocalModel, Params};
use crate::numerics::{cross_entropy, dot, gaussian_vector, norm, streams, Matrix, RandomSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    ActiveParty,
    PassiveParty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyId {
    pub index: usize,
    pub role: Role,
}

/// One id per client; exactly one of them is the active party.
pub fn parties(client_count: usize, active_party: usize) -> Vec<PartyId> {
    (0..client_count)
        .map(|index| PartyId {
            index,
            role: if index == active_party {
                Role::ActiveParty
            } else {
                Role::PassiveParty
            },
        })
        .collect()
}

/// The active party's aggregate `H` and its per-client decomposition.
///
/// `per_client_estimated[k]` is the contribution of client `k` as the active
/// party believes it to be. It is exact for clients that have been online in
/// every epoch and an estimate for clients that were skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMatrix {
    pub h: Matrix,
    pub per_client_estimated: Vec<Matrix>,
}

impl ConfidenceMatrix {
    pub fn from_contributions(contributions: Vec<Matrix>) -> Result<Self> {
        let first = contributions
            .first()
            .ok_or(Error::EmptyInput("no client contributions"))?;
        let mut h = Matrix::zeros(first.rows(), first.cols());
        for c in &contributions {
            h.add_assign(c)?;
        }
        Ok(Self {
            h,
            per_client_estimated: contributions,
        })
    }

    /// Folds a client's reported change into `H` and its contribution.
    pub fn apply_delta(&mut self, client: usize, delta: &Matrix) -> Result<()> {
        self.h.add_assign(delta)?;
        self.per_client_estimated[client].add_assign(delta)
    }

    /// Swaps client `k`'s believed contribution for its true one.
    pub fn replace_contribution(&mut self, client: usize, actual: Matrix) -> Result<()> {
        self.h.sub_assign(&self.per_client_estimated[client])?;
        self.h.add_assign(&actual)?;
        self.per_client_estimated[client] = actual;
        Ok(())
    }

    /// `|H - sum_k h_hat_k|_inf`.
    pub fn conservation_gap(&self) -> f64 {
        let mut sum = Matrix::zeros(self.h.rows(), self.h.cols());
        for c in &self.per_client_estimated {
            sum.add_assign(c).expect("same shape");
        }
        self.h.max_abs_diff(&sum).expect("same shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    ConfidenceFull,
    ConfidenceDelta,
    GradientBroadcast,
    FactorProbe,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::ConfidenceFull => "CONFIDENCE_FULL",
            MessageKind::ConfidenceDelta => "CONFIDENCE_DELTA",
            MessageKind::GradientBroadcast => "GRADIENT_BROADCAST",
            MessageKind::FactorProbe => "FACTOR_PROBE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Probe,
    Unlearning,
    Reconciliation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Training => "training",
            Phase::Probe => "probe",
            Phase::Unlearning => "unlearning",
            Phase::Reconciliation => "reconciliation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub sender: usize,
    pub receiver: usize,
    pub kind: MessageKind,
    pub scalars: u64,
}

pub const BYTES_PER_SCALAR: u64 = 8;

/// Append-only log of every simulated message.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    records: Vec<LedgerRecord>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        phase: Phase,
        epoch: usize,
        sender: usize,
        receiver: usize,
        kind: MessageKind,
        scalars: usize,
    ) {
        self.records.push(LedgerRecord {
            phase,
            epoch,
            sender,
            receiver,
            kind,
            scalars: scalars as u64,
        });
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn total_scalars(&self) -> u64 {
        self.records.iter().map(|r| r.scalars).sum()
    }

    pub fn phase_scalars(&self, phase: Phase) -> u64 {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.scalars)
            .sum()
    }

    pub fn epoch_scalars(&self, phase: Phase, epoch: usize) -> u64 {
        self.records
            .iter()
            .filter(|r| r.phase == phase && r.epoch == epoch)
            .map(|r| r.scalars)
            .sum()
    }

    /// Distinct epochs that carried traffic in `phase`.
    pub fn epochs_in(&self, phase: Phase) -> usize {
        let mut epochs: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.epoch)
            .collect();
        epochs.sort_unstable();
        epochs.dedup();
        epochs.len()
    }

    /// Mean scalars per epoch in `phase`; zero when the phase saw no traffic.
    pub fn per_epoch_scalars(&self, phase: Phase) -> f64 {
        match self.epochs_in(phase) {
            0 => 0.0,
            e => self.phase_scalars(phase) as f64 / e as f64,
        }
    }

    pub fn megabytes(scalars: u64) -> f64 {
        (scalars * BYTES_PER_SCALAR) as f64 / 1e6
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let shown = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: shown.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let to_err = |e: csv::Error| Error::Csv {
            path: shown.clone(),
            line: 0,
            message: e.to_string(),
        };
        w.write_record([
            "phase", "epoch", "sender", "receiver", "kind", "scalars", "bytes",
        ])
        .map_err(to_err)?;
        for r in &self.records {
            w.write_record([
                r.phase.to_string(),
                r.epoch.to_string(),
                r.sender.to_string(),
                r.receiver.to_string(),
                r.kind.to_string(),
                r.scalars.to_string(),
                (r.scalars * BYTES_PER_SCALAR).to_string(),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn default_patience() -> usize {
    5
}

fn default_tolerance() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub eta: f64,
    #[serde(default)]
    pub l2_lambda: f64,
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the objective perturbation; zero disables it.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Epochs without sufficient improvement before stopping; zero disables early stopping.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Minimum relative loss improvement that resets the patience counter.
    #[serde(default = "default_tolerance")]
    pub loss_tolerance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            l2_lambda: 1e-3,
            max_epochs: 400,
            seed: 0,
            noise_sigma: 0.0,
            early_stop_patience: default_patience(),
            loss_tolerance: default_tolerance(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be >= 1"));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::invalid("l2_lambda must be >= 0"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::invalid("loss_tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Patience-based stopping on the training loss.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStop {
    best: f64,
    wait: usize,
    patience: usize,
    tolerance: f64,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize, tolerance: f64) -> Self {
        Self {
            best: f64::INFINITY,
            wait: 0,
            patience,
            tolerance,
        }
    }

    /// Returns true when training should stop after observing `loss`.
    pub(crate) fn observe(&mut self, loss: f64) -> bool {
        if self.patience == 0 {
            return false;
        }
        if loss < self.best - self.tolerance * self.best.abs() || self.best.is_infinite() {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }
}

/// A parameter update an offline client still owes, replayed on its return.
#[derive(Clone, Debug)]
pub enum DeferredStep {
    /// Plain descent with the broadcast gradient of one epoch.
    Descent { grad: Arc<Matrix>, n_eff: f64 },
    /// The ascent/descent first round; needs the client's pre-correction block.
    FirstRound {
        g_old: Arc<Matrix>,
        g_new: Arc<Matrix>,
        old_block: Matrix,
        n_old: f64,
        n_new: f64,
        tau: f64,
    },
}

/// Complete simulator state after training or unlearning.
#[derive(Clone, Debug)]
pub struct FederationState {
    pub models: Vec<LocalModel>,
    /// Per-client perturbation `b_k` in summed-loss units, flat in parameter order.
    pub perturbations: Vec<Vec<f64>>,
    pub confidence: ConfidenceMatrix,
    /// Each client's own cache of `forward(theta_k, X_k)`.
    pub client_outputs: Vec<Matrix>,
    /// The last gradient matrix each client received.
    pub last_received: Vec<Option<Matrix>>,
    pub data: PartitionedData,
    pub ledger: CommLedger,
    pub loss_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub active_party: usize,
    pub config: TrainingConfig,
    pub epochs_trained: usize,
    pub pending: Vec<Vec<DeferredStep>>,
    pub estimates: EstimateAccumulator,
}

impl FederationState {
    pub fn client_count(&self) -> usize {
        self.models.len()
    }

    pub fn class_count(&self) -> usize {
        self.data.class_count
    }

    pub fn n_eff(&self) -> f64 {
        self.data.n_eff()
    }

    /// Clients that still owe deferred updates.
    pub fn stale_clients(&self) -> Vec<usize> {
        (0..self.client_count())
            .filter(|&k| !self.pending[k].is_empty())
            .collect()
    }

    /// `sum_k forward(theta_k, X_k)` recomputed from the models.
    pub fn true_confidence(&self, data: &PartitionedData) -> Result<Matrix> {
        let mut h = Matrix::zeros(data.rows(), data.class_count);
        for (m, x) in self.models.iter().zip(&data.blocks) {
            h.add_assign(&m.forward(x)?)?;
        }
        Ok(h)
    }

    pub(crate) fn mean_perturbation(&self, k: usize, n_eff: f64) -> Vec<f64> {
        self.perturbations[k].iter().map(|b| b / n_eff).collect()
    }

    fn regularizer(&self, n_eff: f64) -> f64 {
        let lambda = self.config.l2_lambda;
        self.models
            .iter()
            .zip(&self.perturbations)
            .map(|(m, b)| {
                let theta = m.params().flatten();
                0.5 * lambda * dot(&theta, &theta) + dot(b, &theta) / n_eff
            })
            .sum()
    }

    /// Objective value as the active party sees it, using the maintained `H`.
    pub fn objective(&self) -> Result<f64> {
        let ce = cross_entropy(
            &self.confidence.h,
            &self.data.targets,
            Some(&self.data.weights),
        )?;
        Ok(ce + self.regularizer(self.n_eff()))
    }

    /// Objective on `data` with confidences recomputed from the models.
    pub fn objective_on(&self, data: &PartitionedData) -> Result<f64> {
        let h = self.true_confidence(data)?;
        let ce = cross_entropy(&h, &data.targets, Some(&data.weights))?;
        Ok(ce + self.regularizer(data.n_eff()))
    }

    /// Per-client gradient of the mean objective on `data`.
    pub fn objective_gradient(&self, data: &PartitionedData) -> Result<Vec<Params>> {
        let h = self.true_confidence(data)?;
        let g = global_loss_grad_weighted(&h, &data.targets, &data.weights)?;
        let n_eff = data.n_eff();
        self.models
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut grad = m.backward(&data.blocks[k], &g)?;
                grad.add_scaled(self.config.l2_lambda, m.params())?;
                let b = m.params().with_values(&self.mean_perturbation(k, n_eff))?;
                grad.add_scaled(1.0, &b)?;
                Ok(grad)
            })
            .collect()
    }

    /// `|sum_z grad l(z, theta) + lambda theta + b|_2` over all clients, in summed units.
    pub fn gradient_residual(&self, data: &PartitionedData) -> Result<f64> {
        let grads = self.objective_gradient(data)?;
        let flat: Vec<f64> = grads.iter().flat_map(Params::flatten).collect();
        Ok(data.n_eff() * norm(&flat))
    }

    /// Client `k` takes one descent step with broadcast `g` and reports its change.
    pub(crate) fn client_descent(&mut self, k: usize, g: &Matrix) -> Result<Matrix> {
        let n_eff = self.n_eff();
        let x = &self.data.blocks[k];
        let grads = self.models[k].backward(x, g)?;
        let b = self.mean_perturbation(k, n_eff);
        let (eta, lambda) = (self.config.eta, self.config.l2_lambda);
        self.models[k].apply_update(&grads, eta, lambda, Some(&b))?;
        self.refresh_output(k)
    }

    /// Recomputes the client's output cache and returns the change.
    pub(crate) fn refresh_output(&mut self, k: usize) -> Result<Matrix> {
        let fresh = self.models[k].forward(&self.data.blocks[k])?;
        let delta = fresh.sub(&self.client_outputs[k])?;
        self.client_outputs[k] = fresh;
        Ok(delta)
    }

    /// One synchronous protocol epoch over `online` clients, returning the
    /// broadcast and each online client's reported delta.
    pub(crate) fn broadcast_epoch(
        &mut self,
        phase: Phase,
        epoch: usize,
        online: &[usize],
    ) -> Result<(Matrix, Vec<(usize, Matrix)>)> {
        let g =
            global_loss_grad_weighted(&self.confidence.h, &self.data.targets, &self.data.weights)?;
        let payload = g.rows() * g.cols();
        let mut deltas = Vec::with_capacity(online.len());
        for &k in online {
            self.ledger.record(
                phase,
                epoch,
                self.active_party,
                k,
                MessageKind::GradientBroadcast,
                payload,
            );
            self.last_received[k] = Some(g.clone());
            let delta = self.client_descent(k, &g)?;
            self.ledger.record(
                phase,
                epoch,
                k,
                self.active_party,
                MessageKind::ConfidenceDelta,
                payload,
            );
            deltas.push((k, delta));
        }
        Ok((g, deltas))
    }

    pub(crate) fn check_loss(&self, epoch: usize, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged { epoch, loss })
        }
    }

    /// Saves one checkpoint per party as `party_<k>.ckpt` in `dir`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, m) in self.models.iter().enumerate() {
            m.save(&dir.join(format!("party_{k}.ckpt")))?;
        }
        Ok(())
    }
}

/// Draws each client's fixed perturbation from its own noise stream.
pub fn draw_perturbations(models: &[LocalModel], sigma: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let mut src = RandomSource::new(seed, streams::noise(k));
            gaussian_vector(&mut src, m.param_count(), sigma)
        })
        .collect()
}

/// Builds the initial protocol state: perturbations drawn and every client's
/// full confidence uploaded once (epoch 0 of `phase`).
pub fn initialize(
    data: PartitionedData,
    models: Vec<LocalModel>,
    active_party: usize,
    cfg: &TrainingConfig,
    phase: Phase,
) -> Result<FederationState> {
    cfg.validate()?;
    if models.len() != data.client_count() {
        return Err(Error::invalid(format!(
            "{} models for {} client blocks",
            models.len(),
            data.client_count()
        )));
    }
    if active_party >= models.len() {
        return Err(Error::IndexOutOfRange {
            what: "active party",
            index: active_party,
            len: models.len(),
        });
    }
    for (k, (m, x)) in models.iter().zip(&data.blocks).enumerate() {
        if m.input_dim() != x.cols() || m.class_count() != data.class_count {
            return Err(Error::invalid(format!(
                "client {k}: model expects {}x{} but block is {} wide with {} classes",
                m.input_dim(),
                m.class_count(),
                x.cols(),
                data.class_count
            )));
        }
    }
    let perturbations = draw_perturbations(&models, cfg.noise_sigma, cfg.seed)?;
    let outputs: Vec<Matrix> = models
        .iter()
        .zip(&data.blocks)
        .map(|(m, x)| m.forward(x))
        .collect::<Result<_>>()?;
    let mut ledger = CommLedger::new();
    for (k, h) in outputs.iter().enumerate() {
        ledger.record(
            phase,
            0,
            k,
            active_party,
            MessageKind::ConfidenceFull,
            h.rows() * h.cols(),
        );
    }
    let k = models.len();
    Ok(FederationState {
        confidence: ConfidenceMatrix::from_contributions(outputs.clone())?,
        client_outputs: outputs,
        last_received: vec![None; k],
        models,
        perturbations,
        data,
        ledger,
        loss_trace: Vec::new(),
        residual_trace: Vec::new(),
        active_party,
        config: cfg.clone(),
        epochs_trained: 0,
        pending: vec![Vec::new(); k],
        estimates: EstimateAccumulator::new(k),
    })
}

/// Full-batch federated gradient descent with early stopping.
pub fn train(
    data: PartitionedData,
    models: Vec<LocalModel>,
    active_party: usize,
    cfg: &TrainingConfig,
) -> Result<FederationState> {
    let mut state = initialize(data, models, active_party, cfg, Phase::Training)?;
    run_training_epochs(&mut state, Phase::Training)?;
    Ok(state)
}

pub(crate) fn run_training_epochs(state: &mut FederationState, phase: Phase) -> Result<()> {
    let everyone: Vec<usize> = (0..state.client_count()).collect();
    let mut stop = EarlyStop::new(
        state.config.early_stop_patience,
        state.config.loss_tolerance,
    );
    for epoch in 1..=state.config.max_epochs {
        let (_, deltas) = state.broadcast_epoch(phase, epoch, &everyone)?;
        for (k, d) in &deltas {
            state.confidence.apply_delta(*k, d)?;
        }
        let loss = state.objective()?;
        state.check_loss(epoch, loss)?;
        state.loss_trace.push(loss);
        state.epochs_trained = epoch;
        if stop.observe(loss) {
            log::debug!("early stop after epoch {epoch} at loss {loss:.6}");
            break;
        }
    }
    Ok(())
}

/// Class probabilities for a test split; every client block must be present.
pub fn infer(state: &FederationState, blocks: &[Option<&Matrix>]) -> Result<Matrix> {
    if blocks.len() != state.client_count() {
        return Err(Error::invalid(format!(
            "{} test blocks for {} clients",
            blocks.len(),
            state.client_count()
        )));
    }
    if let Some(client) = blocks.iter().position(Option::is_none) {
        return Err(Error::ClientOffline { client });
    }
    if let Some(&client) = state.stale_clients().first() {
        return Err(Error::ClientOffline { client });
    }
    let first = blocks[0].expect("checked");
    let mut h = Matrix::zeros(first.rows(), state.class_count());
    for (m, x) in state.models.iter().zip(blocks) {
        h.add_assign(&m.forward(x.expect("checked"))?)?;
    }
    Ok(global_predict(&h))
}

/// Convenience wrapper over [`infer`] for a complete split.
pub fn infer_data(state: &FederationState, data: &PartitionedData) -> Result<Matrix> {
    let blocks: Vec<Option<&Matrix>> = data.blocks.iter().map(Some).collect();
    infer(state, &blocks)
}

/// Below this squared norm a probe row carries no usable direction.
pub const PROBE_FLOOR: f64 = 1e-12;

/// Runs a per-sample probe update and records how much of the change in each
/// row of `H` every client produced. The probe is rolled back afterwards.
///
/// For sample `s` every client takes the step `-eta * grad` of that sample's
/// own loss and reports `dh_k[s]`; the factor is the projection coefficient
/// `<dh_k[s], dH[s]> / |dH[s]|^2`.
pub fn capture_contribution_factors(state: &mut FederationState) -> Result<ContributionFactors> {
    let n = state.data.rows();
    let k_count = state.client_count();
    let classes = state.class_count();
    let eta = state.config.eta;
    let g = {
        let mut g = crate::numerics::softmax_rows(&state.confidence.h);
        g.sub_assign(&state.data.targets)?;
        g
    };
    let epoch = state.epochs_trained;
    for k in 0..k_count {
        state.ledger.record(
            Phase::Probe,
            epoch,
            state.active_party,
            k,
            MessageKind::FactorProbe,
            n * classes,
        );
    }

    let mut per_client = vec![Matrix::zeros(n, classes); k_count];
    for (k, deltas) in per_client.iter_mut().enumerate() {
        let model = &state.models[k];
        let block = &state.data.blocks[k];
        for s in 0..n {
            let x = block.select_rows(&[s]);
            let gs = g.select_rows(&[s]);
            let grads = model.backward(&x, &gs)?;
            let mut probe = model.clone();
            probe.params_mut().add_scaled(-eta, &grads)?;
            let delta = probe.forward(&x)?.sub(&model.forward(&x)?)?;
            deltas.row_mut(s).copy_from_slice(delta.row(0));
        }
        state.ledger.record(
            Phase::Probe,
            epoch,
            k,
            state.active_party,
            MessageKind::FactorProbe,
            n * classes,
        );
    }

    let mut r = Matrix::zeros(n, k_count);
    let mut fallback = 0usize;
    for s in 0..n {
        let mut total = vec![0.0; classes];
        for d in &per_client {
            for (t, v) in total.iter_mut().zip(d.row(s)) {
                *t += v;
            }
        }
        let denom = dot(&total, &total);
        if denom < PROBE_FLOOR {
            fallback += 1;
            r.row_mut(s).fill(1.0 / k_count as f64);
            continue;
        }
        for (k, d) in per_client.iter().enumerate() {
            r.set(s, k, dot(d.row(s), &total) / denom);
        }
    }
    if fallback > 0 {
        log::warn!("{fallback} of {n} probe rows were degenerate; using uniform factors");
    }
    ContributionFactors::new(r, epoch)
}
