//! Unlearning with part of the federation offline.
//!
//! Offline clients neither receive the broadcast nor report a delta. The
//! active party extrapolates their change, and the total change of `H`, from
//! the clients that did report, using per-sample contribution factors frozen
//! at the end of training. Skipped updates are queued and replayed when the
//! client returns, at which point its estimated contribution is swapped for
//! the true one.

use crate::error::{Error, Result};
use crate::federation::FederationState;
use crate::numerics::{streams, Matrix, RandomSource};
use crate::unlearning::{
    reconcile_client_at, run_unlearning, Participation, UnlearnConfig, UnlearnOutcome,
    UnlearningRequest,
};

/// Below this a sample's online factor mass is treated as zero.
pub const FACTOR_FLOOR: f64 = 1e-9;

/// `R[s, k]`: the share of row `s` of a confidence update produced by client `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionFactors {
    pub r: Matrix,
    pub capture_epoch: usize,
}

impl ContributionFactors {
    pub fn new(r: Matrix, capture_epoch: usize) -> Result<Self> {
        if !r.is_finite() {
            return Err(Error::NonFinite("contribution factors".into()));
        }
        for s in 0..r.rows() {
            let sum: f64 = r.row(s).iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "contribution factors of row {s} sum to {sum}"
                )));
            }
        }
        Ok(Self { r, capture_epoch })
    }

    pub fn client_count(&self) -> usize {
        self.r.cols()
    }
}

/// Which clients take part in each unlearning epoch (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineSchedule {
    epochs: Vec<Vec<usize>>,
}

impl OnlineSchedule {
    pub fn all_online(client_count: usize, epochs: usize) -> Self {
        Self {
            epochs: vec![(0..client_count).collect(); epochs],
        }
    }

    pub fn explicit(mut epochs: Vec<Vec<usize>>) -> Self {
        for e in &mut epochs {
            e.sort_unstable();
            e.dedup();
        }
        Self { epochs }
    }

    /// Exactly `online_count` clients per epoch: every `required` client plus
    /// a seeded random draw from the rest.
    pub fn random(
        client_count: usize,
        epochs: usize,
        online_count: usize,
        required: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut required: Vec<usize> = required.to_vec();
        required.sort_unstable();
        required.dedup();
        if online_count < required.len() || online_count > client_count {
            return Err(Error::invalid(format!(
                "online count {online_count} must lie in [{}, {client_count}]",
                required.len()
            )));
        }
        if let Some(&bad) = required.iter().find(|&&k| k >= client_count) {
            return Err(Error::IndexOutOfRange {
                what: "client",
                index: bad,
                len: client_count,
            });
        }
        let mut rng = RandomSource::new(seed, streams::SCHEDULE);
        let optional: Vec<usize> = (0..client_count)
            .filter(|k| !required.contains(k))
            .collect();
        let epochs = (0..epochs)
            .map(|_| {
                let mut pool = optional.clone();
                rng.shuffle(&mut pool);
                let mut set = required.clone();
                set.extend_from_slice(&pool[..online_count - required.len()]);
                set.sort_unstable();
                set
            })
            .collect();
        Ok(Self { epochs })
    }

    /// Random schedule with `round(fraction * client_count)` clients online.
    pub fn from_fraction(
        client_count: usize,
        epochs: usize,
        fraction: f64,
        required: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "online fraction must be in (0, 1], got {fraction}"
            )));
        }
        let count = ((fraction * client_count as f64).round() as usize).max(1);
        Self::random(client_count, epochs, count, required, seed)
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Online clients in 1-based `epoch`.
    pub fn online_at(&self, epoch: usize) -> &[usize] {
        &self.epochs[epoch - 1]
    }

    pub fn validate(&self, client_count: usize, required: &[usize], epochs: usize) -> Result<()> {
        if self.epochs.len() < epochs {
            return Err(Error::invalid(format!(
                "schedule covers {} epochs, {epochs} needed",
                self.epochs.len()
            )));
        }
        for (e, set) in self.epochs.iter().enumerate() {
            if let Some(&bad) = set.iter().find(|&&k| k >= client_count) {
                return Err(Error::IndexOutOfRange {
                    what: "client",
                    index: bad,
                    len: client_count,
                });
            }
            if let Some(missing) = required.iter().find(|k| !set.contains(k)) {
                return Err(Error::invalid(format!(
                    "client {missing} must be online in every epoch but is missing from epoch {}",
                    e + 1
                )));
            }
        }
        Ok(())
    }
}

/// Cumulative estimated change of each client since it was last reconciled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateAccumulator {
    drift: Vec<Option<Matrix>>,
}

impl EstimateAccumulator {
    pub fn new(client_count: usize) -> Self {
        Self {
            drift: vec![None; client_count],
        }
    }

    pub fn add(&mut self, client: usize, delta: &Matrix) -> Result<()> {
        match &mut self.drift[client] {
            Some(acc) => acc.add_assign(delta),
            slot @ None => {
                *slot = Some(delta.clone());
                Ok(())
            }
        }
    }

    /// Accumulated drift, `None` when the client has no outstanding estimate.
    pub fn get(&self, client: usize) -> Option<&Matrix> {
        self.drift[client].as_ref()
    }

    pub fn reset(&mut self, client: usize) {
        self.drift[client] = None;
    }
}

/// Estimates the total change `dH` and each offline client's change from the
/// deltas of the online clients, row by row:
/// `dH[s] = sum_on dh[s] / S[s]` and `dh_K[s] = R[s,K] / S[s] * sum_on dh[s]`
/// where `S[s] = sum_on R[s, .]`.
///
/// With nobody offline `dH` is the exact sum and no estimates are returned.
pub fn estimate_offline(
    deltas: &[(usize, Matrix)],
    factors: &ContributionFactors,
    offline: &[usize],
) -> Result<(Matrix, Vec<(usize, Matrix)>)> {
    let (_, first) = deltas
        .first()
        .ok_or(Error::EmptyInput("no online client deltas"))?;
    let mut online_sum = Matrix::zeros(first.rows(), first.cols());
    for (_, d) in deltas {
        online_sum.add_assign(d)?;
    }
    if offline.is_empty() {
        return Ok((online_sum, Vec::new()));
    }
    if factors.r.rows() != first.rows() {
        return Err(Error::ShapeMismatch {
            op: "estimate_offline",
            left: factors.r.shape(),
            right: first.shape(),
        });
    }
    let mut dh = online_sum.clone();
    let mut estimates: Vec<(usize, Matrix)> = offline
        .iter()
        .map(|&k| (k, Matrix::zeros(first.rows(), first.cols())))
        .collect();
    let mut degenerate = 0usize;
    for s in 0..first.rows() {
        let mass: f64 = deltas.iter().map(|(k, _)| factors.r.get(s, *k)).sum();
        if mass <= FACTOR_FLOOR {
            degenerate += 1;
            continue;
        }
        dh.row_mut(s).iter_mut().for_each(|v| *v /= mass);
        for (k, est) in &mut estimates {
            let share = factors.r.get(s, *k) / mass;
            for (e, v) in est.row_mut(s).iter_mut().zip(online_sum.row(s)) {
                *e = share * v;
            }
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} rows have no online factor mass; using the online sum for them");
    }
    Ok((dh, estimates))
}

/// Advances `H` by the estimated total and books every contribution.
pub(crate) fn fold_estimated(
    state: &mut FederationState,
    deltas: &[(usize, Matrix)],
    factors: &ContributionFactors,
    offline: &[usize],
) -> Result<()> {
    let (dh, estimates) = estimate_offline(deltas, factors, offline)?;
    state.confidence.h.add_assign(&dh)?;
    for (k, d) in deltas {
        state.confidence.per_client_estimated[*k].add_assign(d)?;
    }
    for (k, est) in &estimates {
        state.confidence.per_client_estimated[*k].add_assign(est)?;
        state.estimates.add(*k, est)?;
    }
    Ok(())
}

/// Unlearning where each epoch only the scheduled clients participate.
///
/// Affected clients are forced online in the first epoch because only they
/// can compute the correction delta. Returning clients are reconciled before
/// they take part; clients still away at the end keep their deferred steps
/// until [`reconcile_all`].
pub fn unlearn_async(
    state: &mut FederationState,
    request: &UnlearningRequest,
    schedule: &OnlineSchedule,
    factors: &ContributionFactors,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_unlearning(
        state,
        request,
        cfg,
        Participation::Scheduled(schedule, factors),
    )
}

/// Brings client `k` up to date. A client with no deferred work is left alone.
pub fn reconcile_client(state: &mut FederationState, k: usize) -> Result<bool> {
    if k >= state.client_count() {
        return Err(Error::IndexOutOfRange {
            what: "client",
            index: k,
            len: state.client_count(),
        });
    }
    let epoch = state.ledger.records().last().map_or(0, |r| r.epoch);
    reconcile_client_at(state, k, epoch)
}

/// Reconciles every stale client; afterwards inference is allowed again.
pub fn reconcile_all(state: &mut FederationState) -> Result<usize> {
    let mut count = 0;
    for k in state.stale_clients() {
        if reconcile_client(state, k)? {
            count += 1;
        }
    }
    Ok(count)
}
