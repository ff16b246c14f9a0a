//! Hand-built fixtures and brute-force oracles.

use vfu_core::asynchronous::estimate_offline;
use vfu_core::certification::perturbation_magnitude;
use vfu_core::experiment::{append_jsonl, run_experiment};
use vfu_core::federation::{capture_contribution_factors, initialize, train};
use vfu_core::metrics::binary_auc;
use vfu_core::models::global_loss_grad_weighted;
use vfu_core::numerics::{gaussian_vector, norm};
use vfu_core::unlearning::apply_request;
use vfu_core::*;

fn bias_free(widths: &[usize], classes: usize, seed: u64) -> Vec<LocalModel> {
    widths
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let mut rng = RandomSource::new(seed, numerics::streams::init(k));
            LocalModel::linear(d, classes, false, &mut rng).unwrap()
        })
        .collect()
}

/// Every client block has one nonzero per row, in a column of its own, so
/// rows are orthogonal within each client.
fn orthogonal_fixture(n: usize, clients: usize, seed: u64) -> PartitionedData {
    let mut rng = RandomSource::new(seed, 40);
    let blocks = (0..clients)
        .map(|_| {
            let mut m = Matrix::zeros(n, n);
            for s in 0..n {
                m.set(
                    s,
                    s,
                    rng.uniform(0.2, 1.0) * if rng.below(2) == 0 { -1.0 } else { 1.0 },
                );
            }
            m
        })
        .collect();
    let labels = (0..n).map(|s| s % 2).collect();
    PartitionedData::new(blocks, labels, 2).unwrap()
}

#[test]
fn offline_estimate_tracks_true_delta_on_orthogonal_rows() {
    let data = orthogonal_fixture(6, 3, 1);
    let cfg = TrainingConfig {
        eta: 0.5,
        l2_lambda: 0.0,
        max_epochs: 3,
        early_stop_patience: 0,
        ..TrainingConfig::default()
    };
    let mut state = train(data, bias_free(&[6, 6, 6], 2, 1), 0, &cfg).unwrap();
    let factors = capture_contribution_factors(&mut state).unwrap();
    let offline = [2usize];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let g = global_loss_grad_weighted(
            &state.confidence.h,
            &state.data.targets,
            &state.data.weights,
        )
        .unwrap();
        let mut deltas = Vec::new();
        for k in 0..3 {
            let x = &state.data.blocks[k];
            let before = state.models[k].forward(x).unwrap();
            let grads = state.models[k].backward(x, &g).unwrap();
            state.models[k]
                .apply_update(&grads, cfg.eta, cfg.l2_lambda, None)
                .unwrap();
            deltas.push((k, state.models[k].forward(x).unwrap().sub(&before).unwrap()));
        }
        let (total, estimates) = estimate_offline(&deltas[..2], &factors, &offline).unwrap();
        let truth = &deltas[2].1;
        let err = estimates[0].1.sub(truth).unwrap();
        worst = worst.max(norm(err.values()) / norm(truth.values()));
        for (k, d) in &deltas {
            state.confidence.apply_delta(*k, d).unwrap();
        }
        let mut exact_total = Matrix::zeros(total.rows(), total.cols());
        for (_, d) in &deltas {
            exact_total.add_assign(d).unwrap();
        }
        assert!(
            total.max_abs_diff(&exact_total).unwrap() < 1e-3 * exact_total.max_abs().max(1e-12)
        );
    }
    assert!(worst < 1e-3, "worst relative estimate error {worst}");
}

/// Ten epochs of drift in R, averaged element-wise, starting from parameters
/// a fraction `alpha` of the way from the optimum back to the initialization.
fn mean_drift(
    train_data: &PartitionedData,
    init: &[LocalModel],
    star: &[LocalModel],
    alpha: f64,
    seed: u64,
) -> f64 {
    let cfg = |epochs| TrainingConfig {
        eta: 0.5,
        l2_lambda: 0.01,
        max_epochs: epochs,
        seed,
        early_stop_patience: 0,
        ..TrainingConfig::default()
    };
    let models: Vec<LocalModel> = init
        .iter()
        .zip(star)
        .map(|(i, s)| {
            let mut offset = i.params().clone();
            offset.add_scaled(-1.0, s.params()).unwrap();
            let mut p = s.params().clone();
            p.add_scaled(alpha, &offset).unwrap();
            LocalModel::from_params(ModelKind::Mlp, p).unwrap()
        })
        .collect();
    let mut before = initialize(
        train_data.clone(),
        models.clone(),
        1,
        &cfg(1),
        Phase::Training,
    )
    .unwrap();
    let mut after = train(train_data.clone(), models, 1, &cfg(10)).unwrap();
    let ra = capture_contribution_factors(&mut before).unwrap();
    let rb = capture_contribution_factors(&mut after).unwrap();
    let d = ra.r.sub(&rb.r).unwrap();
    d.values().iter().map(|v| v.abs()).sum::<f64>() / d.values().len() as f64
}

#[test]
fn mlp_factor_drift_shrinks_near_convergence() {
    for seed in 0..6u64 {
        let ds = data::synthesize(
            &data::SyntheticSpec::new(40, vec![2, 3], 2).margin(3.0),
            seed,
        )
        .unwrap();
        let train_data = ds.train().unwrap();
        let init = ModelSpec::mlp(vec![6]).build(&[2, 3], 2, 1, seed).unwrap();
        let star_cfg = TrainingConfig {
            eta: 0.5,
            l2_lambda: 0.01,
            max_epochs: 4000,
            seed,
            early_stop_patience: 0,
            ..TrainingConfig::default()
        };
        let star = train(train_data.clone(), init.clone(), 1, &star_cfg)
            .unwrap()
            .models;
        let far = mean_drift(&train_data, &init, &star, 1.0, seed);
        let near = mean_drift(&train_data, &init, &star, 0.01, seed);
        assert!(
            near < far,
            "seed {seed}: drift near optimum {near} vs at init {far}"
        );
    }
}

#[test]
fn gaussian_draws_match_requested_sigma() {
    let sigma = 2.5;
    let mut src = RandomSource::new(77, numerics::streams::noise(0));
    let draws = gaussian_vector(&mut src, 100_000, sigma).unwrap();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((var.sqrt() / sigma - 1.0).abs() < 0.01);
}

#[test]
fn subtracting_a_client_row_leaves_the_rest() {
    let removed = Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap();
    let rest = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
    let mut cm = ConfidenceMatrix::from_contributions(vec![removed.clone(), rest]).unwrap();
    assert_eq!(cm.h.row(0), &[-1.0, 4.0]);
    cm.apply_delta(0, &removed.scale(-1.0)).unwrap();
    assert_eq!(cm.h.row(0), &[0.0, 3.0]);
    assert_eq!(cm.conservation_gap(), 0.0);
}

#[test]
fn ledger_counts_uploads_and_broadcasts_per_epoch() {
    let data = orthogonal_fixture(4, 3, 2);
    let cfg = TrainingConfig {
        eta: 0.1,
        max_epochs: 7,
        early_stop_patience: 0,
        ..TrainingConfig::default()
    };
    let state = train(data, bias_free(&[4, 4, 4], 2, 2), 0, &cfg).unwrap();
    let (k, n, c) = (3u64, 4u64, 2u64);
    assert_eq!(state.ledger.epoch_scalars(Phase::Training, 0), k * n * c);
    for epoch in 1..=7 {
        assert_eq!(
            state.ledger.epoch_scalars(Phase::Training, epoch),
            2 * k * n * c
        );
    }
}

#[test]
fn magnitude_matches_brute_force_column_max() {
    let mut rng = RandomSource::new(3, 41);
    for _ in 0..20 {
        let (n, d) = (1 + rng.below(8), 1 + rng.below(5));
        let old =
            Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect()).unwrap();
        let mut new = old.clone();
        for _ in 0..rng.below(6) {
            new.set(rng.below(n), rng.below(d), rng.standard_normal());
        }
        let mut m = 0.0;
        for j in 0..d {
            let mut col = 0.0f64;
            for r in 0..n {
                col = col.max((old.get(r, j) - new.get(r, j)).abs());
            }
            m += col;
        }
        let rows = (0..n)
            .filter(|&r| (0..d).any(|j| old.get(r, j) != new.get(r, j)))
            .count();
        let (got_m, got_rows) = perturbation_magnitude(&old, &new).unwrap();
        assert!((got_m - m).abs() < 1e-12);
        assert_eq!(got_rows, rows);
    }
}

#[test]
fn feature_removal_matches_column_zeroing() {
    let ds = data::synthesize(&data::SyntheticSpec::new(30, vec![3, 2], 2), 9).unwrap();
    let train_data = ds.train().unwrap();
    let req = UnlearningRequest::new(Scenario::FeatureRemoval {
        client: 0,
        features: vec![0, 2],
    });
    let (corrected, correction) = apply_request(&train_data, &req).unwrap();
    let mut expected = train_data.blocks[0].clone();
    for r in 0..expected.rows() {
        expected.set(r, 0, 0.0);
        expected.set(r, 2, 0.0);
    }
    assert_eq!(corrected.blocks[0], expected);
    assert_eq!(corrected.blocks[1], train_data.blocks[1]);
    assert_eq!(correction.affected_clients, vec![0]);
}

#[test]
fn auc_matches_pair_counting() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9];
    let positive = [false, false, true, true, true, false];
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    assert_eq!(binary_auc(&scores, &positive).unwrap(), wins / pairs);
}

#[test]
fn reruns_reproduce_and_results_append() {
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "run_id": "repro",
        "dataset": { "source": "synthetic", "n": 80, "client_widths": [2, 2], "class_count": 2, "margin": 3.0, "test_fraction": 0.25 },
        "training": { "eta": 1.0, "l2_lambda": 0.001, "max_epochs": 40, "seed": 4 },
        "request": { "type": "sample_fraction", "fraction": 0.1 },
        "mode": "async",
        "schedule": { "online_count": 1 }
    }))
    .unwrap();
    let a = run_experiment(&cfg).unwrap().record;
    let b = run_experiment(&cfg).unwrap().record;
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.auc, b.auc);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.loss_trace, b.loss_trace);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    append_jsonl(&path, &a).unwrap();
    append_jsonl(&path, &b).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let first: ResultRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first, a);
}
