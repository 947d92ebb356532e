//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured figures. Run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use solarcast::calibrate::{calibrate_distributed, FailureReason, RoundStamp};
use solarcast::config::{ExperimentConfig, SyntheticSection};
use solarcast::distqr::{qr_centralized, qr_partitioned};
use solarcast::experiment::{improvement, run_experiment, run_in_memory};
use solarcast::features::FeatureSpec;
use solarcast::jacobisvd::svd_jacobi;
use solarcast::linalg::{ColumnPartition, Matrix, Vector};
use solarcast::metrics;
use solarcast::predictor::{PredictionMode, PredictorState, RecalPolicy};
use solarcast::simnet::{
    run as sim_run, Fault, FaultPlan, LogRecord, MessageKind, MessageMatcher, NodeData,
    SimConfig, Simulation,
};
use solarcast::NodeId;

fn stamp() -> RoundStamp {
    RoundStamp {
        round_id: 1,
        fitted_at: 0,
    }
}

#[test]
fn criterion_01_qr_oracle_equivalence() {
    let start = Instant::now();
    let mut worst_recon = 0.0f64;
    let mut worst_orth = 0.0f64;
    let mut worst_r = 0.0f64;
    for seed in 0..100 {
        let mut rng = common::rng(seed);
        let n = rng.random_range(2..=20);
        let m = rng.random_range(n.max(10)..=200);
        let cond = 10f64.powf(rng.random_range(0.0..6.0));
        let a = common::random_conditioned(&mut rng, m, n, cond);
        let partition = common::random_partition(&mut rng, n);

        let run = qr_partitioned(&a, &partition).unwrap();
        let recon =
            common::frobenius_diff(&run.q.matmul(&run.r).unwrap(), &a) / a.frobenius_norm();
        let orth = common::frobenius_diff(
            &run.q.transpose().matmul(&run.q).unwrap(),
            &Matrix::identity(n),
        );
        let (_, r_oracle) = qr_centralized(&a).unwrap();
        let r_diff = common::max_abs_diff(&run.r, &r_oracle);

        assert!(recon < 1e-10, "seed {seed}: reconstruction {recon:.3e}");
        assert!(orth < 1e-9, "seed {seed}: orthogonality {orth:.3e}");
        assert!(r_diff < 1e-9, "seed {seed}: R vs oracle {r_diff:.3e}");
        worst_recon = worst_recon.max(recon);
        worst_orth = worst_orth.max(orth);
        worst_r = worst_r.max(r_diff);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "runtime {elapsed:?} exceeds 30 s");
    println!(
        "[PASS] criterion 1: QR oracle equivalence over 100 seeds \
         (worst recon {worst_recon:.2e} < 1e-10, orth {worst_orth:.2e} < 1e-9, \
         R diff {worst_r:.2e} < 1e-9, {elapsed:?})"
    );
}

#[test]
fn criterion_02_svd_correctness() {
    let start = Instant::now();
    let mut worst_recon = 0.0f64;
    let mut worst_orth = 0.0f64;
    let mut worst_sigma = 0.0f64;
    for seed in 0..100 {
        let mut rng = common::rng(10_000 + seed);
        let n = rng.random_range(2..=20);
        // Triangular input from the QR of a condition-controlled matrix;
        // cond stays <= ~3e3 so the squared-condition loss of the
        // Gram-matrix oracle stays below the 1e-8 comparison.
        let cond = 10f64.powf(rng.random_range(0.0..3.5));
        let a = common::random_conditioned(&mut rng, n, n, cond);
        let (_, r) = qr_centralized(&a).unwrap();

        let svd = svd_jacobi(&r).unwrap();
        let s = svd.sigma.as_slice();
        assert!(s.iter().all(|&x| x >= 0.0), "seed {seed}: non-negative");
        assert!(s.windows(2).all(|w| w[0] >= w[1]), "seed {seed}: sorted");

        let eye = Matrix::identity(n);
        let orth_u =
            common::frobenius_diff(&svd.u.transpose().matmul(&svd.u).unwrap(), &eye);
        let orth_v =
            common::frobenius_diff(&svd.v.transpose().matmul(&svd.v).unwrap(), &eye);
        let mut sigma_m = Matrix::zeros(n, n);
        for i in 0..n {
            sigma_m.set(i, i, s[i]);
        }
        let rec = svd
            .u
            .matmul(&sigma_m)
            .unwrap()
            .matmul(&svd.v.transpose())
            .unwrap();
        let recon = common::frobenius_diff(&rec, &r) / r.frobenius_norm();
        assert!(orth_u < 1e-9 && orth_v < 1e-9, "seed {seed}: orthogonality");
        assert!(recon < 1e-9, "seed {seed}: reconstruction {recon:.3e}");

        let gram = r.transpose().matmul(&r).unwrap();
        let eigs = common::symmetric_eigenvalues(&gram);
        for (i, (&sigma, lambda)) in s.iter().zip(&eigs).enumerate() {
            let expected = lambda.max(0.0).sqrt();
            let rel = (sigma - expected).abs() / expected.max(1e-12);
            assert!(rel <= 1e-8, "seed {seed} sigma[{i}]: rel {rel:.3e}");
            worst_sigma = worst_sigma.max(rel);
        }
        worst_recon = worst_recon.max(recon);
        worst_orth = worst_orth.max(orth_u.max(orth_v));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "runtime {elapsed:?} exceeds 30 s");
    println!(
        "[PASS] criterion 2: SVD correctness over 100 seeds \
         (worst recon {worst_recon:.2e}, orth {worst_orth:.2e}, \
         sigma-vs-oracle {worst_sigma:.2e} < 1e-8, {elapsed:?})"
    );
}

#[test]
fn criterion_03_end_to_end_least_squares() {
    let start = Instant::now();
    let mut worst_oracle = 0.0f64;
    let mut worst_planted = 0.0f64;
    for seed in 0..100 {
        let mut rng = common::rng(20_000 + seed);
        let n = rng.random_range(2..=20);
        let m = rng.random_range(n + 5..=200);
        let cond = 10f64.powf(rng.random_range(0.0..2.0));
        let x = common::random_conditioned(&mut rng, m, n, cond);
        let partition = common::random_partition(&mut rng, n);
        let blocks: Vec<Matrix> = (0..partition.nodes())
            .map(|k| x.column_block(partition.block(k)))
            .collect();

        // noisy instance against the normal-equations oracle
        let b = Vector::new((0..m).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
        let cal = calibrate_distributed(&blocks, &b, &partition, stamp()).unwrap();
        let oracle = common::normal_equations_solve(&x, &b);
        let rel = rel_err(cal.coeffs.weights.as_slice(), &oracle);
        assert!(rel < 1e-9, "seed {seed}: oracle rel err {rel:.3e}");
        worst_oracle = worst_oracle.max(rel);

        // noise-free planted coefficients recovered exactly
        let planted: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b_planted = x
            .mul_vector(&Vector::new(planted.clone()).unwrap())
            .unwrap();
        let cal = calibrate_distributed(&blocks, &b_planted, &partition, stamp()).unwrap();
        let rel = rel_err(cal.coeffs.weights.as_slice(), &planted);
        assert!(rel < 1e-8, "seed {seed}: planted rel err {rel:.3e}");
        worst_planted = worst_planted.max(rel);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "runtime {elapsed:?} exceeds 60 s");
    println!(
        "[PASS] criterion 3: end-to-end least squares over 100 instances \
         (worst oracle err {worst_oracle:.2e} < 1e-9, planted {worst_planted:.2e} < 1e-8, \
         {elapsed:?})"
    );
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

#[test]
fn criterion_04_prediction_partition_invariance() {
    let spec = FeatureSpec {
        n_self_lags: 3,
        neighbor_lags: vec![(1, 2), (2, 1)],
        env_lags: vec![("temperature".into(), 2)],
        use_error: true,
        use_derivative: false,
        lead: 2,
        train_window: 24,
        recal_window: 1000,
    };
    let n = spec.total_columns();
    let mut state = PredictorState::new(
        spec,
        PredictionMode::PerNode,
        RecalPolicy::Periodic { window: 1000 },
    )
    .unwrap();
    let mut rng = common::rng(404);
    for day in 0..24 {
        let t = day as f64;
        state.record_neighbor(1, day, 18.0 + 4.0 * (0.31 * t).sin() + rng.random::<f64>());
        state.record_neighbor(2, day, 22.0 + 3.0 * (0.17 * t).cos() + rng.random::<f64>());
        state.record_env(
            "temperature",
            day,
            20.0 + 5.0 * (0.23 * t).sin() + rng.random::<f64>(),
        );
        state
            .step(day, 25.0 + 6.0 * (0.27 * t).sin() + rng.random::<f64>())
            .unwrap();
    }
    state.bootstrap().unwrap();
    let day = 23;
    let local = state.predict_local(day).unwrap();

    let mut worst = 0.0f64;
    for trial in 0..100 {
        let partition = common::random_partition(&mut rng, n);
        let (total, _) = state.predict_distributed(&partition, day).unwrap();
        let diff = (total - local.raw).abs() / local.raw.abs().max(1.0);
        assert!(diff <= 1e-12, "trial {trial}: {diff:.3e}");
        worst = worst.max(diff);
    }
    let (single, _) = state
        .predict_distributed(&ColumnPartition::single(n), day)
        .unwrap();
    assert_eq!(single, local.raw, "degenerate partition bit-compatible");
    println!(
        "[PASS] criterion 4: prediction partition invariance over 100 partitions \
         (worst rel diff {worst:.2e} <= 1e-12; single-node bit-identical)"
    );
}

#[test]
fn criterion_05_fault_atomicity_and_liveness() {
    const NODES: usize = 5;
    const DAYS: usize = 30;
    let world: Vec<NodeData> = (0..NODES)
        .map(|k| NodeData {
            solar: (0..DAYS)
                .map(|d| {
                    let t = d as f64;
                    25.0 + 6.0 * (0.37 * t + k as f64).sin()
                        + 2.0 * ((1.3 + 0.17 * k as f64) * t).sin()
                })
                .collect(),
            env: BTreeMap::new(),
        })
        .collect();
    let spec = FeatureSpec {
        n_self_lags: 2,
        neighbor_lags: (1..NODES as NodeId).map(|id| (id, 1)).collect(),
        env_lags: vec![],
        use_error: false,
        use_derivative: false,
        lead: 2,
        train_window: 14,
        recal_window: 7,
    };

    let cases: Vec<(&str, Fault, FailureReason)> = vec![
        (
            "all zeros in the first column data",
            Fault::ZeroFirstColumn { round: 2 },
            FailureReason::ZeroFirstColumn,
        ),
        (
            "Q columns received out of order",
            Fault::ReorderColumns {
                round: 2,
                victim: 3,
                column: 0,
                extra_delay: 3,
            },
            FailureReason::QOutOfOrder,
        ),
        (
            "Q column not received",
            Fault::DropMessage {
                matcher: MessageMatcher::kind_in_round(MessageKind::QColumn, 2),
            },
            FailureReason::QMissing,
        ),
        (
            "R column not received",
            Fault::DropMessage {
                matcher: MessageMatcher::kind_in_round(MessageKind::RTransfer, 2),
            },
            FailureReason::RMissing,
        ),
        (
            "coefficients all zero",
            Fault::ZeroCoefficients { round: 2 },
            FailureReason::ZeroCoefficients,
        ),
    ];

    for (label, fault, expected) in cases {
        let run_once = || {
            let mut cfg = SimConfig::new(
                spec.clone(),
                RecalPolicy::Periodic { window: 7 },
                DAYS,
                42,
            );
            cfg.faults = FaultPlan {
                faults: vec![fault.clone()],
            };
            let mut sim = Simulation::new(cfg, &world).unwrap();
            sim.run_to_end();
            sim.into_log()
        };
        let log = run_once();
        assert_eq!(log.to_jsonl(), run_once().to_jsonl(), "{label}: determinism");

        let outcomes: BTreeMap<u64, (bool, Option<FailureReason>)> = log
            .round_outcomes()
            .into_iter()
            .map(|(r, s, reason)| (r, (s, reason)))
            .collect();
        assert_eq!(outcomes[&1], (true, None), "{label}: clean round first");
        assert_eq!(
            outcomes[&2],
            (false, Some(expected)),
            "{label}: fails with its reason"
        );
        assert_eq!(outcomes[&3], (true, None), "{label}: next round succeeds");
        for r in log.records.iter() {
            if let LogRecord::CoefficientsApplied { round, .. } = r {
                assert_ne!(*round, 2, "{label}: faulted round changed coefficients");
            }
        }
    }
    println!(
        "[PASS] criterion 5: all five fault kinds fail with their reason, leave \
         coefficients untouched on every node, and the next round succeeds"
    );
}

#[test]
fn criterion_06_communication_scaling() {
    let mut points = Vec::new();
    for &n in &[2usize, 4, 8, 16] {
        let spec = FeatureSpec {
            n_self_lags: 1,
            neighbor_lags: (1..n as NodeId).map(|id| (id, 1)).collect(),
            env_lags: vec![],
            use_error: false,
            use_derivative: false,
            lead: 2,
            train_window: 24,
            recal_window: 50,
        };
        let world: Vec<NodeData> = (0..n)
            .map(|k| NodeData {
                solar: (0..30)
                    .map(|d| {
                        let t = d as f64;
                        25.0 + 5.0 * ((0.29 + 0.11 * k as f64) * t + k as f64).sin()
                    })
                    .collect(),
                env: BTreeMap::new(),
            })
            .collect();
        let cfg = SimConfig::new(spec, RecalPolicy::Periodic { window: 50 }, 30, 3);
        let log = sim_run(&cfg, &world).unwrap();
        let messages = log.master_messages(1).expect("bootstrap round ran") as f64;
        points.push((n as f64, messages));
    }
    // linear fit R^2
    let len = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / len;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    assert!(r2 > 0.99, "R^2 {r2} for points {points:?}");
    println!(
        "[PASS] criterion 6: controlling-node messages per round are linear in n \
         (points {points:?}, R^2 {r2:.6} > 0.99)"
    );
}

#[test]
fn criterion_07_op_accounting() {
    // MLR prediction with 5 feature terms: exactly 5 multiply-accumulates.
    let spec = FeatureSpec {
        n_self_lags: 2,
        neighbor_lags: vec![(1, 3)],
        env_lags: vec![],
        use_error: false,
        use_derivative: false,
        lead: 2,
        train_window: 20,
        recal_window: 1000,
    };
    assert_eq!(spec.total_columns(), 5);
    let mut state = PredictorState::new(
        spec,
        PredictionMode::PerNode,
        RecalPolicy::Periodic { window: 1000 },
    )
    .unwrap();
    let mut rng = common::rng(7);
    for day in 0..20 {
        let t = day as f64;
        state.record_neighbor(1, day, 20.0 + 4.0 * (0.31 * t).sin() + rng.random::<f64>());
        state
            .step(day, 25.0 + 5.0 * (0.21 * t).sin() + rng.random::<f64>())
            .unwrap();
    }
    state.bootstrap().unwrap();
    let before = state.counters.flops;
    state.predict_local(19).unwrap();
    let prediction_ops = state.counters.flops - before;
    assert_eq!(prediction_ops, 5, "MLR prediction with 5 terms");
    assert_eq!(metrics::EWMA_UPDATE_OPS, 3, "EWMA update");
    assert_eq!(metrics::PERSISTENCE_OPS, 0, "Persistence");

    // Calibration of a 5x5 system: within a factor of 4 of 8400 ops.
    let mut rng = common::rng(8);
    let x = common::random_conditioned(&mut rng, 5, 5, 10.0);
    let b = Vector::new((0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let cal = solarcast::calibrate::calibrate_centralized(&x, &b, stamp()).unwrap();
    let (lo, hi) = (8400 / 4, 8400 * 4);
    assert!(
        (lo..=hi).contains(&(cal.flops as usize)),
        "calibration ops {} outside [{lo}, {hi}]",
        cal.flops
    );
    println!(
        "[PASS] criterion 7: op accounting (MLR/5 terms = {prediction_ops}, EWMA = 3, \
         Persistence = 0, 5x5 calibration = {} ops, within 4x of 8400)",
        cal.flops
    );
}

#[test]
fn criterion_08_model_ordering_on_synthetic_data() {
    let start = Instant::now();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 1..=20 {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synthetic = Some(SyntheticSection {
            days: Some(120),
            nodes: Some(4),
            ..Default::default()
        });
        cfg.features.train_window = 60;
        cfg.schedule.ticks_per_day = 16;
        let result = run_in_memory(&cfg, Some(seed)).unwrap();
        for report in &result.reports {
            *sums.entry(match report.model.as_str() {
                "mlr" => "mlr",
                "persistence" => "persistence",
                _ => "ewma",
            }).or_insert(0.0) += report.rmse;
        }
    }
    let mlr = sums["mlr"] / 20.0;
    let persistence = sums["persistence"] / 20.0;
    let ewma = sums["ewma"] / 20.0;
    assert!(
        mlr < ewma,
        "MLR mean RMSE {mlr:.4} must beat EWMA {ewma:.4}"
    );
    assert!(
        mlr < persistence,
        "MLR mean RMSE {mlr:.4} must beat Persistence {persistence:.4}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "runtime {elapsed:?} exceeds 2 min");
    println!(
        "[PASS] criterion 8: model ordering over 20 seeds \
         (mean RMSE mlr {mlr:.4} < ewma {ewma:.4} and < persistence {persistence:.4}, \
         {elapsed:?})"
    );
}

#[test]
fn criterion_09_metrics_unit_suite() {
    // residual example: [1,-1,1,-1]
    let observed = [0.0; 4];
    let predicted = [1.0, -1.0, 1.0, -1.0];
    let r = metrics::evaluate("m", &predicted, &observed, (0, 3)).unwrap();
    assert_eq!(r.rmse, 1.0);
    assert_eq!(r.max_abs_error, 1.0);
    assert_eq!(r.mean_residual, 0.0);
    assert!((metrics::t_critical_95(3) - 3.182).abs() < 1e-3);
    assert!((r.ci95 - 1.837).abs() < 5e-4, "ci95 {}", r.ci95);

    // comparison arithmetic to the quoted decimals
    let vs_ewma = improvement(0.91, 1.51);
    let vs_persistence = improvement(0.91, 2.52);
    assert!((vs_ewma - 39.7).abs() < 0.05, "{vs_ewma}");
    assert!((vs_persistence - 63.9).abs() < 0.05, "{vs_persistence}");
    println!(
        "[PASS] criterion 9: metrics unit suite (ci95 {:.3} = 1.837, \
         improvements {:.1}% / {:.1}%)",
        r.ci95, vs_ewma, vs_persistence
    );
}

#[test]
fn criterion_10_experiment_determinism() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = Some(SyntheticSection {
        days: Some(60),
        nodes: Some(3),
        ..Default::default()
    });
    cfg.faults.drop_probability = 0.02;
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, dir_a.path(), Some(31)).unwrap();
    let b = run_experiment(&cfg, dir_b.path(), Some(31)).unwrap();
    let mut checked = 0;
    for (fa, fb) in a.files.iter().zip(&b.files) {
        assert_eq!(fa.file_name(), fb.file_name());
        assert_eq!(
            std::fs::read(fa).unwrap(),
            std::fs::read(fb).unwrap(),
            "artifact {:?} differs",
            fa.file_name()
        );
        checked += 1;
    }
    assert!(checked >= 4);
    println!(
        "[PASS] criterion 10: rerun with identical config and seed produced \
         {checked} byte-identical artifacts"
    );
}
