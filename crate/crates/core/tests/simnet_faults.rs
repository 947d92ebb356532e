//! Fault injection: each of the five calibration failure modes makes
//! exactly the faulted round fail with its specific reason, leaves every
//! node's active coefficients untouched, and the next un-faulted round
//! succeeds without intervention. Plus loss-rate monotonicity and
//! determinism of the whole log.

mod common;

use std::collections::BTreeMap;

use solarcast::calibrate::FailureReason;
use solarcast::features::FeatureSpec;
use solarcast::predictor::RecalPolicy;
use solarcast::simnet::{
    run, Fault, FaultPlan, LogRecord, MessageKind, MessageMatcher, NodeData, SimConfig,
    Simulation,
};
use solarcast::NodeId;

const NODES: usize = 5;
const DAYS: usize = 30;

fn world_of(days: usize) -> Vec<NodeData> {
    // distinct per-node frequencies keep the stacked lag columns
    // full-rank
    (0..NODES)
        .map(|k| NodeData {
            solar: (0..days)
                .map(|d| {
                    let t = d as f64;
                    25.0 + 6.0 * (0.37 * t + k as f64).sin()
                        + 2.0 * ((1.3 + 0.17 * k as f64) * t).sin()
                        + 2.5 * (0.11 * t + 0.3).cos()
                })
                .collect(),
            env: BTreeMap::new(),
        })
        .collect()
}

fn world() -> Vec<NodeData> {
    world_of(DAYS)
}

fn base_config(seed: u64) -> SimConfig {
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
    SimConfig::new(spec, RecalPolicy::Periodic { window: 7 }, DAYS, seed)
}

type Outcomes = Vec<(u64, bool, Option<FailureReason>)>;
type AppliedRounds = BTreeMap<NodeId, Vec<u64>>;

/// Runs with the fault targeting round 2 (the bootstrap round 1 and the
/// day-21 round 3 stay clean) and returns the log plus the per-node
/// coefficient application history.
fn run_fault_scenario(faults: Vec<Fault>) -> (Outcomes, AppliedRounds) {
    let mut cfg = base_config(1234);
    cfg.faults = FaultPlan { faults };
    let mut sim = Simulation::new(cfg, &world()).unwrap();
    sim.run_to_end();
    let log = sim.into_log();
    let applied: AppliedRounds = log.records.iter().fold(BTreeMap::new(), |mut acc, r| {
        if let LogRecord::CoefficientsApplied { round, node, .. } = r {
            acc.entry(*node).or_default().push(*round);
        }
        acc
    });
    (log.round_outcomes(), applied)
}

fn assert_fault_isolated(
    outcomes: &Outcomes,
    applied: &AppliedRounds,
    expected_reason: FailureReason,
) {
    assert!(outcomes.len() >= 3, "need bootstrap, faulted, recovery rounds");
    let by_round: BTreeMap<u64, (bool, Option<FailureReason>)> = outcomes
        .iter()
        .map(|(r, s, reason)| (*r, (*s, *reason)))
        .collect();
    assert_eq!(by_round[&1], (true, None), "bootstrap round succeeds");
    assert_eq!(
        by_round[&2],
        (false, Some(expected_reason)),
        "faulted round fails with its reason"
    );
    assert_eq!(by_round[&3], (true, None), "next round succeeds");

    // Atomicity: coefficients only ever change when a round distributes
    // them; the faulted round must not appear in any node's history.
    for node in 0..NODES as NodeId {
        let history = applied
            .get(&node)
            .unwrap_or_else(|| panic!("node {node} never applied coefficients"));
        assert!(
            !history.contains(&2),
            "node {node} applied coefficients of the faulted round"
        );
        assert!(history.contains(&1) && history.contains(&3), "node {node}: {history:?}");
        assert!(
            history.windows(2).all(|w| w[0] < w[1]),
            "node {node}: round ids must increase"
        );
    }
}

#[test]
fn fault_zero_first_column() {
    let (outcomes, applied) = run_fault_scenario(vec![Fault::ZeroFirstColumn { round: 2 }]);
    assert_fault_isolated(&outcomes, &applied, FailureReason::ZeroFirstColumn);
}

#[test]
fn fault_q_columns_out_of_order() {
    // Delay column 0's delivery to node 3 so column 1 overtakes it.
    let (outcomes, applied) = run_fault_scenario(vec![Fault::ReorderColumns {
        round: 2,
        victim: 3,
        column: 0,
        extra_delay: 3,
    }]);
    assert_fault_isolated(&outcomes, &applied, FailureReason::QOutOfOrder);
}

#[test]
fn fault_q_column_not_received() {
    let (outcomes, applied) = run_fault_scenario(vec![Fault::DropMessage {
        matcher: MessageMatcher::kind_in_round(MessageKind::QColumn, 2),
    }]);
    assert_fault_isolated(&outcomes, &applied, FailureReason::QMissing);
}

#[test]
fn fault_r_column_not_received() {
    let (outcomes, applied) = run_fault_scenario(vec![Fault::DropMessage {
        matcher: MessageMatcher::kind_in_round(MessageKind::RTransfer, 2),
    }]);
    assert_fault_isolated(&outcomes, &applied, FailureReason::RMissing);
}

#[test]
fn fault_coefficients_all_zero() {
    let (outcomes, applied) = run_fault_scenario(vec![Fault::ZeroCoefficients { round: 2 }]);
    assert_fault_isolated(&outcomes, &applied, FailureReason::ZeroCoefficients);
}

#[test]
fn fault_scenarios_are_deterministic() {
    let scenario = || {
        run_fault_scenario(vec![Fault::DropMessage {
            matcher: MessageMatcher::kind_in_round(MessageKind::QColumn, 2),
        }])
    };
    assert_eq!(scenario(), scenario());
}

#[test]
fn final_coefficients_reflect_the_last_successful_round() {
    let mut cfg = base_config(5);
    cfg.faults = FaultPlan {
        faults: vec![Fault::ZeroCoefficients { round: 2 }],
    };
    let mut sim = Simulation::new(cfg, &world()).unwrap();
    sim.run_to_end();
    // every node ends on the same, latest successful round
    let rounds: Vec<u64> = sim
        .nodes()
        .iter()
        .map(|n| n.coefficients().expect("active coefficients").round_id)
        .collect();
    assert!(rounds.iter().all(|&r| r == rounds[0]));
    assert!(rounds[0] >= 3);
}

#[test]
fn success_rate_declines_with_message_loss() {
    let mut rates = Vec::new();
    for &p in &[0.0, 0.03, 0.08, 0.15] {
        let mut acc = 0.0;
        for seed in 0..20 {
            let mut cfg = base_config(seed);
            cfg.drop_probability = p;
            let log = run(&cfg, &world()).unwrap();
            acc += log.success_rate().expect("rounds attempted");
        }
        rates.push(acc / 20.0);
    }
    assert_eq!(rates[0], 1.0, "lossless transport never fails");
    for pair in rates.windows(2) {
        assert!(
            pair[0] >= pair[1],
            "success rate must not increase with loss: {rates:?}"
        );
    }
    assert!(rates[3] < 1.0);
}

#[test]
fn heavy_loss_rate_sits_strictly_between_zero_and_one() {
    let mut cfg = base_config(77);
    cfg.schedule.total_days = 60;
    cfg.drop_probability = 0.05;
    let log = run(&cfg, &world_of(60)).unwrap();
    let rate = log.success_rate().unwrap();
    assert!(rate > 0.0 && rate < 1.0, "rate {rate}");
}
