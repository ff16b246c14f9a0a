//! Experiment configuration, orchestration and result emission.
//!
//! A run trains the federation (or restores it from checkpoints), captures
//! contribution factors, executes one mode and evaluates on the test split.
//! [`prepare`] and [`run_prepared`] are split so that sweeps train once and
//! reuse the trained state for every point.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asynchronous::{reconcile_all, unlearn_async, ContributionFactors, OnlineSchedule};
use crate::certification::{
    certify, noise_sigma, perturbation_magnitude_data, CertParams, CertificationReport,
};
use crate::data::{
    load_csv, normalize_and_partition, synthesize, PartitionedData, SyntheticSpec, VerticalDataset,
};
use crate::error::{Error, Result};
use crate::federation::{
    capture_contribution_factors, infer_data, initialize, train, FederationState, Phase,
    TrainingConfig,
};
use crate::metrics::{accuracy, auc};
use crate::models::{LocalModel, ModelSpec};
use crate::numerics::{streams, RandomSource};
use crate::unlearning::{
    apply_request, retrain_baseline, transform_test, unlearn_sync, vfulr_baseline, Scenario,
    UnlearnConfig, UnlearnOutcome, UnlearningRequest,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        label_column: String,
        client_widths: Vec<usize>,
        #[serde(default)]
        split_seed: Option<u64>,
    },
    Synthetic {
        n: usize,
        client_widths: Vec<usize>,
        #[serde(default = "two")]
        class_count: usize,
        /// Labeling temperature; absent means noiseless labels.
        #[serde(default)]
        margin: Option<f64>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: Option<u64>,
    },
}

fn two() -> usize {
    2
}

fn default_test_fraction() -> f64 {
    crate::data::DEFAULT_TEST_FRACTION
}

impl DatasetSpec {
    pub fn client_widths(&self) -> &[usize] {
        match self {
            DatasetSpec::Csv { client_widths, .. }
            | DatasetSpec::Synthetic { client_widths, .. } => client_widths,
        }
    }

    pub fn load(&self, default_seed: u64) -> Result<VerticalDataset> {
        match self {
            DatasetSpec::Csv {
                path,
                label_column,
                client_widths,
                split_seed,
            } => {
                let table = load_csv(path, label_column)?;
                normalize_and_partition(&table, client_widths, split_seed.unwrap_or(default_seed))
            }
            DatasetSpec::Synthetic {
                n,
                client_widths,
                class_count,
                margin,
                test_fraction,
                split_seed,
            } => {
                let spec = SyntheticSpec::new(*n, client_widths.clone(), *class_count)
                    .margin(margin.unwrap_or(f64::INFINITY))
                    .test_fraction(*test_fraction);
                synthesize(&spec, split_seed.unwrap_or(default_seed))
            }
        }
    }

    fn source_label(&self) -> (String, String) {
        match self {
            DatasetSpec::Csv {
                path, label_column, ..
            } => (path.display().to_string(), label_column.clone()),
            DatasetSpec::Synthetic { .. } => ("synthetic".into(), "label".into()),
        }
    }
}

/// A removal request as written in a config. The fraction forms are resolved
/// against the training data with a seeded draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RequestSpec {
    ClientRemoval {
        client: usize,
    },
    FeatureRemoval {
        client: usize,
        features: Vec<usize>,
    },
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
    /// The first `round(fraction * d_k)` features of the client.
    FeatureFraction {
        client: usize,
        fraction: f64,
    },
    /// A random `fraction` of the training rows.
    SampleFraction {
        fraction: f64,
    },
    /// A random `fraction` of the client's training cells.
    CellFraction {
        client: usize,
        fraction: f64,
    },
}

impl RequestSpec {
    pub fn fraction(&self) -> Option<f64> {
        match self {
            RequestSpec::FeatureFraction { fraction, .. }
            | RequestSpec::SampleFraction { fraction }
            | RequestSpec::CellFraction { fraction, .. } => Some(*fraction),
            _ => None,
        }
    }

    pub fn with_fraction(&self, value: f64) -> Result<RequestSpec> {
        let mut out = self.clone();
        match &mut out {
            RequestSpec::FeatureFraction { fraction, .. }
            | RequestSpec::SampleFraction { fraction }
            | RequestSpec::CellFraction { fraction, .. } => *fraction = value,
            _ => {
                return Err(Error::invalid(
                    "a removal-fraction sweep needs a feature_fraction, sample_fraction or cell_fraction request",
                ))
            }
        }
        Ok(out)
    }

    /// The concrete request, or `None` when a fraction rounds to nothing.
    pub fn resolve(&self, data: &PartitionedData, seed: u64) -> Result<Option<UnlearningRequest>> {
        let check_fraction = |f: f64| {
            if (0.0..=1.0).contains(&f) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "removal fraction must be in [0, 1], got {f}"
                )))
            }
        };
        let block_width = |client: usize| {
            data.blocks
                .get(client)
                .map(|b| b.cols())
                .ok_or(Error::IndexOutOfRange {
                    what: "client",
                    index: client,
                    len: data.client_count(),
                })
        };
        let scenario = match self.clone() {
            RequestSpec::ClientRemoval { client } => Scenario::ClientRemoval { client },
            RequestSpec::FeatureRemoval { client, features } => {
                Scenario::FeatureRemoval { client, features }
            }
            RequestSpec::SensitiveCellRemoval { client, cells } => {
                Scenario::SensitiveCellRemoval { client, cells }
            }
            RequestSpec::SampleRemoval { samples } => Scenario::SampleRemoval { samples },
            RequestSpec::ClassRemoval { class } => Scenario::ClassRemoval { class },
            RequestSpec::FeatureFraction { client, fraction } => {
                check_fraction(fraction)?;
                let count = (fraction * block_width(client)? as f64).round() as usize;
                if count == 0 {
                    return Ok(None);
                }
                Scenario::FeatureRemoval {
                    client,
                    features: (0..count).collect(),
                }
            }
            RequestSpec::SampleFraction { fraction } => {
                check_fraction(fraction)?;
                let count = (fraction * data.rows() as f64).round() as usize;
                if count == 0 {
                    return Ok(None);
                }
                let mut rows: Vec<usize> = (0..data.rows()).collect();
                RandomSource::new(seed, streams::REQUEST).shuffle(&mut rows);
                let mut samples = rows[..count].to_vec();
                samples.sort_unstable();
                Scenario::SampleRemoval { samples }
            }
            RequestSpec::CellFraction { client, fraction } => {
                check_fraction(fraction)?;
                let width = block_width(client)?;
                let total = width * data.rows();
                let count = (fraction * total as f64).round() as usize;
                if count == 0 {
                    return Ok(None);
                }
                let mut cells: Vec<usize> = (0..total).collect();
                RandomSource::new(seed, streams::REQUEST).shuffle(&mut cells);
                let mut picked: Vec<(usize, usize)> = cells[..count]
                    .iter()
                    .map(|&i| (i / width, i % width))
                    .collect();
                picked.sort_unstable();
                Scenario::SensitiveCellRemoval {
                    client,
                    cells: picked,
                }
            }
        };
        Ok(Some(UnlearningRequest::new(scenario)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train only and evaluate the trained model.
    Train,
    Sync,
    Async,
    Retrain,
    Vfulr,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Sync => "sync",
            Mode::Async => "async",
            Mode::Retrain => "retrain",
            Mode::Vfulr => "vfulr",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Mode::Train),
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            "retrain" => Ok(Mode::Retrain),
            "vfulr" => Ok(Mode::Vfulr),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected train, sync, async, retrain or vfulr)"
            ))),
        }
    }
}

/// How asynchronous runs pick online clients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub online_fraction: Option<f64>,
    #[serde(default)]
    pub online_count: Option<usize>,
    /// Explicit online lists per unlearning epoch; takes precedence.
    #[serde(default)]
    pub explicit: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub const DEFAULT_ONLINE_FRACTION: f64 = 0.75;

impl ScheduleSpec {
    pub fn build(
        &self,
        client_count: usize,
        epochs: usize,
        required: &[usize],
        default_seed: u64,
    ) -> Result<OnlineSchedule> {
        if let Some(lists) = &self.explicit {
            return Ok(OnlineSchedule::explicit(lists.clone()));
        }
        let seed = self.seed.unwrap_or(default_seed);
        match self.online_count {
            Some(count) => OnlineSchedule::random(client_count, epochs, count, required, seed),
            None => OnlineSchedule::from_fraction(
                client_count,
                epochs,
                self.online_fraction.unwrap_or(DEFAULT_ONLINE_FRACTION),
                required,
                seed,
            ),
        }
    }
}

/// Certification settings; `tau`, `n` and `lambda` come from the run itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertSpec {
    pub epsilon: f64,
    pub c: f64,
    #[serde(default = "unit")]
    pub gamma: f64,
    #[serde(default = "unit")]
    pub gamma_z: f64,
    /// Train with exactly the noise scale the planned request requires.
    #[serde(default)]
    pub calibrate_noise: bool,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            save_checkpoints: false,
        }
    }
}

impl OutputSpec {
    pub fn results(&self) -> PathBuf {
        self.dir.join("results.jsonl")
    }

    pub fn ledger(&self) -> PathBuf {
        self.dir.join("ledger.csv")
    }

    pub fn plot(&self) -> PathBuf {
        self.dir.join("plot.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn certificate(&self) -> PathBuf {
        self.dir.join("certificate.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
}

fn default_retrain_epochs() -> usize {
    400
}

fn default_mode() -> Mode {
    Mode::Sync
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub dataset: DatasetSpec,
    /// Label owner; the last client when absent.
    #[serde(default)]
    pub active_party: Option<usize>,
    #[serde(default)]
    pub model: ModelSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub unlearning: UnlearnConfig,
    #[serde(default = "default_retrain_epochs")]
    pub retrain_max_epochs: usize,
    #[serde(default)]
    pub request: Option<RequestSpec>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub certification: Option<CertSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    /// Restore trained local models from `party_<k>.ckpt` files instead of training.
    #[serde(default)]
    pub init_checkpoint_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative data and checkpoint paths are taken
    /// relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let DatasetSpec::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                *data = base.join(&*data);
            }
        }
        if let Some(dir) = &mut cfg.init_checkpoint_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn active_party(&self) -> usize {
        self.active_party
            .unwrap_or_else(|| self.dataset.client_widths().len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let k = self.dataset.client_widths().len();
        if k == 0 {
            return Err(Error::invalid("dataset needs at least one client"));
        }
        if self.active_party() >= k {
            return Err(Error::IndexOutOfRange {
                what: "active party",
                index: self.active_party(),
                len: k,
            });
        }
        if self.retrain_max_epochs == 0 || self.unlearning.max_epochs == 0 {
            return Err(Error::invalid("epoch caps must be >= 1"));
        }
        let needs_request = matches!(
            self.mode,
            Mode::Sync | Mode::Async | Mode::Retrain | Mode::Vfulr
        );
        if needs_request && self.request.is_none() {
            return Err(Error::invalid(format!(
                "mode {} needs a request",
                self.mode
            )));
        }
        let client_ref = match &self.request {
            Some(
                RequestSpec::ClientRemoval { client }
                | RequestSpec::FeatureRemoval { client, .. }
                | RequestSpec::SensitiveCellRemoval { client, .. }
                | RequestSpec::FeatureFraction { client, .. }
                | RequestSpec::CellFraction { client, .. },
            ) => Some(*client),
            _ => None,
        };
        if let Some(client) = client_ref {
            if client >= k {
                return Err(Error::IndexOutOfRange {
                    what: "request client",
                    index: client,
                    len: k,
                });
            }
        }
        Ok(())
    }

    fn tau(&self) -> f64 {
        self.unlearning.tau.unwrap_or(self.training.eta)
    }
}

/// Trained state plus everything derived before a mode runs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: VerticalDataset,
    pub train: PartitionedData,
    pub test: PartitionedData,
    pub state: FederationState,
    pub factors: ContributionFactors,
    pub train_seconds: f64,
}

/// Loads data, calibrates noise if asked, trains (or restores) and captures factors.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.training.seed;
    let dataset = cfg.dataset.load(seed)?;
    let train_data = dataset.train()?;
    let test_data = dataset.test()?;
    let active = cfg.active_party();
    let mut training = cfg.training.clone();

    if let (Some(cert), Some(spec)) = (&cfg.certification, &cfg.request) {
        if cert.calibrate_noise {
            if let Some(req) = spec.resolve(&train_data, seed)? {
                let (corrected, _) = apply_request(&train_data, &req)?;
                let (m, z) = perturbation_magnitude_data(&train_data, &corrected)?;
                training.noise_sigma = noise_sigma(&cert_params(cfg, cert, &train_data), m, z)?;
                log::info!("calibrated training noise sigma = {}", training.noise_sigma);
            }
        }
    }

    let mut state = match &cfg.init_checkpoint_dir {
        Some(dir) => {
            let models = (0..train_data.client_count())
                .map(|k| LocalModel::load(&dir.join(format!("party_{k}.ckpt"))))
                .collect::<Result<Vec<_>>>()?;
            initialize(
                train_data.clone(),
                models,
                active,
                &training,
                Phase::Training,
            )?
        }
        None => {
            let models =
                cfg.model
                    .build(&train_data.widths(), train_data.class_count, active, seed)?;
            train(train_data.clone(), models, active, &training)?
        }
    };
    let factors = capture_contribution_factors(&mut state)?;
    let mut prepared_cfg = cfg.clone();
    prepared_cfg.training = training;
    Ok(Prepared {
        config: prepared_cfg,
        dataset,
        train: train_data,
        test: test_data,
        state,
        factors,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn cert_params(cfg: &ExperimentConfig, cert: &CertSpec, train: &PartitionedData) -> CertParams {
    CertParams {
        epsilon: cert.epsilon,
        c: cert.c,
        tau: cfg.tau(),
        gamma: cert.gamma,
        gamma_z: cert.gamma_z,
        n: train.rows(),
        lambda: cfg.training.l2_lambda,
    }
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub scenario: Option<String>,
    pub train_epochs: usize,
    /// Epochs used by the mode itself (training epochs for `train` and `retrain`).
    pub epochs: usize,
    pub max_epochs: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub scalars_total: u64,
    pub scalars_per_epoch: f64,
    pub megabytes_total: f64,
    pub reconciliation_scalars: u64,
    pub wall_clock_seconds: f64,
    pub loss_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    #[serde(default)]
    pub online_counts: Vec<usize>,
    #[serde(default)]
    pub certification: Option<CertificationReport>,
    #[serde(default)]
    pub sweep_axis: Option<String>,
    #[serde(default)]
    pub sweep_value: Option<f64>,
}

/// A finished run: its record and the final federation state.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub record: ResultRecord,
    pub state: FederationState,
    pub outcome: Option<UnlearnOutcome>,
}

fn scenario_name(s: &Scenario) -> &'static str {
    match s {
        Scenario::ClientRemoval { .. } => "client_removal",
        Scenario::FeatureRemoval { .. } => "feature_removal",
        Scenario::SensitiveCellRemoval { .. } => "sensitive_cell_removal",
        Scenario::SampleRemoval { .. } => "sample_removal",
        Scenario::ClassRemoval { .. } => "class_removal",
    }
}

fn evaluate(state: &FederationState, test: &PartitionedData) -> Result<(f64, f64)> {
    let p = infer_data(state, test)?;
    Ok((accuracy(&p, &test.targets)?, auc(&p, &test.targets)?))
}

/// Runs `cfg.mode` on an already trained federation. `cfg` may differ from
/// the preparation config in mode, request, schedule and unlearning settings.
pub fn run_prepared(prep: &Prepared, cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let start = Instant::now();
    let seed = cfg.training.seed;
    let request = match &cfg.request {
        Some(spec) => spec.resolve(&prep.train, seed)?,
        None => None,
    };
    let mut state = prep.state.clone();
    let train_epochs = state.epochs_trained;
    let scenario = request
        .as_ref()
        .map(|r| scenario_name(&r.scenario).to_string());
    // The trained model is scored on untouched test data; unlearned models
    // see the test split with the same removal applied.
    let test = match &request {
        Some(r) if cfg.mode != Mode::Train => transform_test(&prep.test, r)?,
        _ => prep.test.clone(),
    };

    let base =
        |state: &FederationState, epochs: usize, max_epochs: usize| -> Result<ResultRecord> {
            let (acc, auc_v) = evaluate(state, &test)?;
            Ok(ResultRecord {
                run_id: cfg.run_id.clone(),
                mode: cfg.mode,
                seed,
                scenario: scenario.clone(),
                train_epochs,
                epochs,
                max_epochs,
                accuracy: acc,
                auc: auc_v,
                scalars_total: 0,
                scalars_per_epoch: 0.0,
                megabytes_total: 0.0,
                reconciliation_scalars: 0,
                wall_clock_seconds: 0.0,
                loss_trace: Vec::new(),
                residual_trace: Vec::new(),
                online_counts: Vec::new(),
                certification: None,
                sweep_axis: None,
                sweep_value: None,
            })
        };

    let unlearning_mode = matches!(cfg.mode, Mode::Sync | Mode::Async | Mode::Vfulr);
    let Some(request) = request.filter(|_| cfg.mode != Mode::Train) else {
        // Train mode, or a request that resolved to nothing: report the trained model.
        let mut record = base(
            &state,
            if unlearning_mode { 0 } else { train_epochs },
            cfg.training.max_epochs,
        )?;
        let training = state.ledger.phase_scalars(Phase::Training);
        if !unlearning_mode {
            record.scalars_total = training;
            record.scalars_per_epoch = training as f64 / train_epochs.max(1) as f64;
            record.megabytes_total = crate::federation::CommLedger::megabytes(training);
            record.loss_trace = state.loss_trace.clone();
        }
        record.wall_clock_seconds = start.elapsed().as_secs_f64() + prep.train_seconds;
        return Ok(RunArtifacts {
            record,
            state,
            outcome: None,
        });
    };

    if cfg.mode == Mode::Retrain {
        let (corrected, _) = apply_request(&prep.train, &request)?;
        let retrain_cfg = TrainingConfig {
            max_epochs: cfg.retrain_max_epochs,
            ..prep.config.training.clone()
        };
        let fresh = retrain_baseline(corrected, &cfg.model, cfg.active_party(), &retrain_cfg)?;
        let mut record = base(&fresh, fresh.epochs_trained, cfg.retrain_max_epochs)?;
        let total = fresh.ledger.phase_scalars(Phase::Training);
        record.scalars_total = total;
        record.scalars_per_epoch = total as f64 / fresh.epochs_trained.max(1) as f64;
        record.megabytes_total = crate::federation::CommLedger::megabytes(total);
        record.loss_trace = fresh.loss_trace.clone();
        record.residual_trace = vec![fresh.gradient_residual(&fresh.data)?];
        record.wall_clock_seconds = start.elapsed().as_secs_f64();
        return Ok(RunArtifacts {
            record,
            state: fresh,
            outcome: None,
        });
    }

    let max_epochs = cfg.unlearning.max_epochs;
    let outcome = match cfg.mode {
        Mode::Sync => unlearn_sync(&mut state, &request, &cfg.unlearning)?,
        Mode::Vfulr => vfulr_baseline(&mut state, &request)?,
        Mode::Async => {
            let active = cfg.active_party();
            let required = [active, request.requester(active)];
            let schedule = cfg
                .schedule
                .build(state.client_count(), max_epochs, &required, seed)?;
            let outcome = unlearn_async(
                &mut state,
                &request,
                &schedule,
                &prep.factors,
                &cfg.unlearning,
            )?;
            reconcile_all(&mut state)?;
            outcome
        }
        Mode::Train | Mode::Retrain => unreachable!("handled above"),
    };

    let mut record = base(&state, outcome.epochs, max_epochs)?;
    let unlearning = state.ledger.phase_scalars(Phase::Unlearning);
    let reconciliation = state.ledger.phase_scalars(Phase::Reconciliation);
    record.scalars_total = unlearning + reconciliation;
    record.scalars_per_epoch = unlearning as f64 / outcome.epochs.max(1) as f64;
    record.megabytes_total = crate::federation::CommLedger::megabytes(unlearning + reconciliation);
    record.reconciliation_scalars = reconciliation;
    record.loss_trace = outcome.loss_trace.clone();
    record.residual_trace = outcome.residual_trace.clone();
    record.online_counts = outcome.online_counts.clone();
    if let Some(cert) = &cfg.certification {
        let params = cert_params(cfg, cert, &prep.train);
        record.certification = Some(certify(&state, &outcome.original, &state.data, &params)?);
    }
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(RunArtifacts {
        record,
        state,
        outcome: Some(outcome),
    })
}

fn with_run_id<T>(run_id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Run {
        run_id: run_id.to_string(),
        source: Box::new(e),
    })
}

/// Prepares and runs a single experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    with_run_id(
        &cfg.run_id,
        prepare(cfg).and_then(|prep| run_prepared(&prep, cfg)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RemovalFraction,
    OnlineCount,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::RemovalFraction => "removal_fraction",
            SweepAxis::OnlineCount => "online_count",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "removal_fraction" | "removal-fraction" => Ok(SweepAxis::RemovalFraction),
            "online_count" | "online-count" => Ok(SweepAxis::OnlineCount),
            other => Err(Error::invalid(format!(
                "unknown sweep axis `{other}` (expected removal_fraction or online_count)"
            ))),
        }
    }
}

/// The config for one sweep point.
pub fn sweep_point_config(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.run_id = format!("{}-{axis}-{value}", base.run_id);
    match axis {
        SweepAxis::RemovalFraction => {
            let spec = base
                .request
                .as_ref()
                .ok_or_else(|| Error::invalid("removal-fraction sweep needs a request"))?;
            cfg.request = Some(spec.with_fraction(value)?);
        }
        SweepAxis::OnlineCount => {
            if !(value >= 1.0) || value.fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "online count must be a positive integer, got {value}"
                )));
            }
            cfg.mode = Mode::Async;
            cfg.schedule.online_count = Some(value as usize);
            cfg.schedule.online_fraction = None;
            cfg.schedule.explicit = None;
        }
    }
    Ok(cfg)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub result: Result<ResultRecord>,
}

/// One run per value over a single trained federation. Failing points are
/// reported in place and do not stop the sweep.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let prep = with_run_id(&base.run_id, prepare(base))?;
    Ok(values
        .iter()
        .map(|&value| {
            let result = sweep_point_config(base, axis, value).and_then(|cfg| {
                let run_id = cfg.run_id.clone();
                with_run_id(&run_id, run_prepared(&prep, &cfg)).map(|a| {
                    let mut record = a.record;
                    record.sweep_axis = Some(axis.to_string());
                    record.sweep_value = Some(value);
                    record
                })
            });
            if let Err(e) = &result {
                log::error!("sweep point {axis}={value} failed: {e}");
            }
            SweepPoint { value, result }
        })
        .collect())
}

/// Plot-ready CSV with one row per successful sweep point.
pub fn write_plot_csv(path: &Path, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let shown = path.display().to_string();
    let to_err = |e: csv::Error| Error::Csv {
        path: shown.clone(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["axis", "x", "accuracy", "auc", "epochs", "comm_per_epoch"])
        .map_err(to_err)?;
    for p in points {
        if let Ok(r) = &p.result {
            w.write_record([
                axis.to_string(),
                p.value.to_string(),
                r.accuracy.to_string(),
                r.auc.to_string(),
                r.epochs.to_string(),
                r.scalars_per_epoch.to_string(),
            ])
            .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one JSON object per line.
pub fn append_jsonl(path: &Path, record: &ResultRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Writes the dataset manifest for a prepared run.
pub fn write_manifest(prep: &Prepared, path: &Path) -> Result<()> {
    let (source, label) = prep.config.dataset.source_label();
    prep.dataset.manifest(&source, &label).save(path)
}
