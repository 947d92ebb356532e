//! Deterministic discrete-tick simulation of the node group: broadcast
//! and directed message transport with configurable delay and loss, the
//! per-node control loop (wait, QR, gather, SVD+combine at the master,
//! coefficient distribution), shared distributed prediction, timeouts,
//! and fault injection covering the five calibration failure modes plus
//! node dropouts.
//!
//! Time is logical ticks; all intervals map to tick counts. Nodes execute
//! in ascending id order within a tick and messages are delivered in send
//! order, so a (config, seed) pair fully determines the run and its log.
//!
//! Node 0 is the master: it initiates rounds, computes the SVD and
//! combination centrally, distributes coefficients, and runs the
//! prediction/error bookkeeping for the shared prediction series. Each
//! node holds its own sensor data plus the target (master) solar series,
//! which the group already exchanges as routine status traffic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::calibrate::{self, CalibrationRound, CoefficientVector, FailureReason, RoundPhase};
use crate::distqr::{QrError, QrState};
use crate::features::{self, FeatureSpec, SeriesBundle};
use crate::linalg::{dot_slices, ColumnPartition, Vector};
use crate::metrics::Counters;
use crate::predictor::{PredictionLoop, RecalPolicy};
use crate::NodeId;

pub type Tick = u64;
pub type RoundId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
}

/// Message classes on the simulated transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    LoadData,
    QColumn,
    RTransfer,
    QtbTransfer,
    Coefficients,
    PredictShare,
    Ack,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessagePayload {
    /// Master command opening a round over the window ending at
    /// `window_end`, with or without the prediction-error column.
    LoadData { window_end: usize, with_error: bool },
    QColumn { col: usize, values: Vec<f64> },
    /// A node's R columns: (global column index, column of length n).
    RTransfer { cols: Vec<(usize, Vec<f64>)> },
    /// A node's Q^T b entries: (global column index, value).
    QtbTransfer { entries: Vec<(usize, f64)> },
    Coefficients {
        weights: Vec<f64>,
        fitted_at: usize,
        with_error: bool,
    },
    PredictShare { day: usize, tau: f64 },
    /// Reply confirming coefficients were applied.
    Ack,
}

impl MessagePayload {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessagePayload::LoadData { .. } => MessageKind::LoadData,
            MessagePayload::QColumn { .. } => MessageKind::QColumn,
            MessagePayload::RTransfer { .. } => MessageKind::RTransfer,
            MessagePayload::QtbTransfer { .. } => MessageKind::QtbTransfer,
            MessagePayload::Coefficients { .. } => MessageKind::Coefficients,
            MessagePayload::PredictShare { .. } => MessageKind::PredictShare,
            MessagePayload::Ack => MessageKind::Ack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Broadcast,
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMessage {
    pub from: NodeId,
    pub to: Destination,
    /// Calibration round the payload belongs to; 0 for prediction and
    /// other round-free traffic.
    pub round_id: RoundId,
    pub tick_sent: Tick,
    pub payload: MessagePayload,
}

/// Matcher for targeted message drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageMatcher {
    pub kind: Option<MessageKind>,
    pub from: Option<NodeId>,
    /// Matches the expanded per-recipient delivery.
    pub to: Option<NodeId>,
    pub round: Option<RoundId>,
    /// Stop matching after this many drops; `None` drops every match.
    pub max_matches: Option<u32>,
}

impl MessageMatcher {
    pub fn kind_in_round(kind: MessageKind, round: RoundId) -> Self {
        Self {
            kind: Some(kind),
            from: None,
            to: None,
            round: Some(round),
            max_matches: None,
        }
    }

    fn matches(&self, msg: &SimMessage, recipient: NodeId) -> bool {
        self.kind.is_none_or(|k| k == msg.payload.kind())
            && self.from.is_none_or(|f| f == msg.from)
            && self.to.is_none_or(|t| t == recipient)
            && self.round.is_none_or(|r| r == msg.round_id)
    }
}

/// Scheduled faults, all deterministic given the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    /// Drop matching deliveries.
    DropMessage { matcher: MessageMatcher },
    /// Node neither sends nor receives in `[from_tick, until_tick)`;
    /// returning online it re-enters the wait state.
    NodeOffline {
        node: NodeId,
        from_tick: Tick,
        until_tick: Tick,
    },
    /// Zero out the master's first matrix column when loading the round.
    ZeroFirstColumn { round: RoundId },
    /// Force the round's computed coefficients to zero at the master.
    ZeroCoefficients { round: RoundId },
    /// Delay the delivery of one Q column to one victim so a later
    /// column overtakes it.
    ReorderColumns {
        round: RoundId,
        victim: NodeId,
        column: usize,
        extra_delay: Tick,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub faults: Vec<Fault>,
}

/// Tick mapping of the measurement/prediction/calibration intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub ticks_per_day: u64,
    pub measure_interval: u64,
    pub predict_interval: u64,
    pub calibrate_interval: u64,
    pub total_days: usize,
}

impl Schedule {
    /// Daily cadence: one measurement and one prediction per day,
    /// calibration every `recal_window` days.
    pub fn daily(total_days: usize, recal_window: usize) -> Self {
        let ticks_per_day = 64;
        Self {
            ticks_per_day,
            measure_interval: ticks_per_day,
            predict_interval: ticks_per_day,
            calibrate_interval: recal_window.max(1) as u64 * ticks_per_day,
            total_days,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub spec: FeatureSpec,
    pub policy: RecalPolicy,
    pub schedule: Schedule,
    /// Per-hop delivery delay in ticks, at least 1.
    pub message_delay: Tick,
    /// Ticks a node waits for an expected message before abandoning the
    /// round.
    pub timeout_ticks: Tick,
    /// Independent loss probability per delivery.
    pub drop_probability: f64,
    pub faults: FaultPlan,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(spec: FeatureSpec, policy: RecalPolicy, total_days: usize, seed: u64) -> Self {
        let recal = spec.recal_window;
        Self {
            spec,
            policy,
            schedule: Schedule::daily(total_days, recal),
            message_delay: 1,
            timeout_ticks: 50,
            drop_probability: 0.0,
            faults: FaultPlan::default(),
            seed,
        }
    }
}

/// Day-indexed series one node holds locally.
#[derive(Debug, Clone, Default)]
pub struct NodeData {
    pub solar: Vec<f64>,
    pub env: BTreeMap<String, Vec<f64>>,
}

/// One line of the simulation log. Serialized as JSON lines with a
/// `type` tag; field order is the declaration order and stable across
/// runs for diffing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Message {
        tick: Tick,
        kind: MessageKind,
        from: NodeId,
        /// None marks a broadcast.
        to: Option<NodeId>,
        round: RoundId,
    },
    Dropped {
        tick: Tick,
        kind: MessageKind,
        from: NodeId,
        to: NodeId,
        round: RoundId,
        why: DropWhy,
    },
    RoundStarted {
        round: RoundId,
        tick: Tick,
        window_end: usize,
        with_error: bool,
    },
    NodeFailure {
        round: RoundId,
        tick: Tick,
        node: NodeId,
        reason: FailureReason,
    },
    /// Master finished distributing coefficients.
    RoundCompleted { round: RoundId, tick: Tick },
    CoefficientsApplied {
        round: RoundId,
        tick: Tick,
        node: NodeId,
    },
    Prediction {
        tick: Tick,
        /// Day the prediction targets.
        day: usize,
        raw: f64,
        value: f64,
    },
    PredictionSkipped { tick: Tick, day: usize },
    /// Appended after the run, one per attempted round, in round order.
    RoundOutcome {
        round: RoundId,
        success: bool,
        reason: Option<FailureReason>,
        /// Messages handled (sent + received) by the controlling node.
        master_messages: u64,
        /// Max messages handled by any single node this round.
        bottleneck_messages: u64,
    },
    /// Appended after the run, one per node, in id order.
    NodeCounters {
        node: NodeId,
        flops: u64,
        messages_sent: u64,
        messages_received: u64,
        values_stored_peak: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropWhy {
    Loss,
    Fault,
    Offline,
    StaleRound,
}

/// Complete, deterministic record of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub records: Vec<LogRecord>,
}

impl SimulationLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    /// Completed shared predictions as (target day, clamped value, raw).
    pub fn predictions(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Prediction { day, value, raw, .. } => Some((*day, *value, *raw)),
                _ => None,
            })
            .collect()
    }

    pub fn round_outcomes(&self) -> Vec<(RoundId, bool, Option<FailureReason>)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::RoundOutcome {
                    round,
                    success,
                    reason,
                    ..
                } => Some((*round, *success, *reason)),
                _ => None,
            })
            .collect()
    }

    /// Successes over attempts; `None` when nothing was attempted.
    pub fn success_rate(&self) -> Option<f64> {
        let outcomes = self.round_outcomes();
        if outcomes.is_empty() {
            return None;
        }
        let successes = outcomes.iter().filter(|(_, s, _)| *s).count();
        Some(success_rate(successes, outcomes.len()))
    }

    /// Messages handled by the controlling node in one round.
    pub fn master_messages(&self, round: RoundId) -> Option<u64> {
        self.records.iter().find_map(|r| match r {
            LogRecord::RoundOutcome {
                round: rr,
                master_messages,
                ..
            } if *rr == round => Some(*master_messages),
            _ => None,
        })
    }

    pub fn node_counters(&self) -> Vec<Counters> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::NodeCounters {
                    flops,
                    messages_sent,
                    messages_received,
                    values_stored_peak,
                    ..
                } => Some(Counters {
                    flops: *flops,
                    messages_sent: *messages_sent,
                    messages_received: *messages_received,
                    values_stored_peak: *values_stored_peak,
                }),
                _ => None,
            })
            .collect()
    }
}

/// Ratio of successful calibrations to attempts.
pub fn success_rate(successes: usize, attempts: usize) -> f64 {
    assert!(attempts >= 1, "success rate needs at least one attempt");
    successes as f64 / attempts as f64
}

// ---------------------------------------------------------------------
// Node state machine
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expectation {
    QColumn { col: usize },
    RAndQtb,
    Coefficients,
}

#[derive(Debug)]
struct ActiveRound {
    round_id: RoundId,
    window_end: usize,
    with_error: bool,
    partition: ColumnPartition,
    qr: QrState,
    b: Vector,
    expect: Option<Expectation>,
    deadline: Tick,
    // master only: the typed round state machine and the gathered
    // transfers
    control: Option<CalibrationRound>,
    r_received: BTreeMap<NodeId, Vec<(usize, Vec<f64>)>>,
    qtb_received: BTreeMap<NodeId, Vec<(usize, f64)>>,
}

#[derive(Debug, Default)]
struct ShareCollection {
    taus: BTreeMap<NodeId, f64>,
    deadline: Tick,
}

/// A virtual node: its data, control-loop state, active coefficients,
/// and counters.
#[derive(Debug)]
pub struct SimNode {
    pub id: NodeId,
    data: NodeData,
    /// The master's solar series, the target of the shared prediction.
    target_solar: Vec<f64>,
    pub online: bool,
    round: Option<ActiveRound>,
    coeffs: Option<CoefficientVector>,
    active_spec: Option<FeatureSpec>,
    active_partition: Option<ColumnPartition>,
    shares: BTreeMap<usize, ShareCollection>,
    /// Master-only prediction/error bookkeeping.
    control: Option<PredictionLoop>,
    pub counters: Counters,
}

impl SimNode {
    fn is_master(&self) -> bool {
        self.id == 0
    }

    pub fn coefficients(&self) -> Option<&CoefficientVector> {
        self.coeffs.as_ref()
    }

    fn clear_round(&mut self) {
        self.round = None;
    }

    fn bundle(&self) -> SeriesBundle<'_> {
        let mut bundle = SeriesBundle {
            self_solar: &self.target_solar,
            ..Default::default()
        };
        if self.is_master() {
            for (name, series) in &self.data.env {
                bundle.env.insert(name.clone(), series.as_slice());
            }
        } else {
            bundle.neighbors.insert(self.id, &self.data.solar);
        }
        bundle
    }
}

// ---------------------------------------------------------------------
// Simulation driver
// ---------------------------------------------------------------------

struct DropMatcherState {
    matcher: MessageMatcher,
    drops: u32,
}

pub struct Simulation {
    cfg: SimConfig,
    nodes: Vec<SimNode>,
    queue: BTreeMap<Tick, Vec<(NodeId, SimMessage)>>,
    rng: ChaCha12Rng,
    records: Vec<LogRecord>,
    round_counter: RoundId,
    /// (round, window_end, started tick) of every attempted round.
    rounds_started: Vec<(RoundId, usize, Tick)>,
    round_completed: BTreeMap<RoundId, Tick>,
    round_failures: BTreeMap<RoundId, Vec<FailureReason>>,
    /// Per-round, per-node handled calibration messages.
    round_messages: BTreeMap<(RoundId, NodeId), u64>,
    drop_matchers: Vec<DropMatcherState>,
    offline_windows: Vec<(NodeId, Tick, Tick)>,
}

/// Runs the simulation to completion and returns its log.
pub fn run(cfg: &SimConfig, node_data: &[NodeData]) -> Result<SimulationLog, SimError> {
    let mut sim = Simulation::new(cfg.clone(), node_data)?;
    sim.run_to_end();
    Ok(sim.into_log())
}

impl Simulation {
    pub fn new(cfg: SimConfig, node_data: &[NodeData]) -> Result<Self, SimError> {
        cfg.spec
            .validate()
            .map_err(|e| SimError::BadConfig(e.to_string()))?;
        let nodes_expected = 1 + cfg.spec.neighbor_lags.len();
        if node_data.len() != nodes_expected {
            return Err(SimError::BadConfig(format!(
                "spec names {} nodes, got data for {}",
                nodes_expected,
                node_data.len()
            )));
        }
        for (k, (id, _)) in cfg.spec.neighbor_lags.iter().enumerate() {
            if *id as usize != k + 1 {
                return Err(SimError::BadConfig(format!(
                    "neighbor ids must be 1..{nodes_expected} in order, found {id} at position {k}"
                )));
            }
        }
        if cfg.message_delay == 0 {
            return Err(SimError::BadConfig("message_delay must be at least 1".into()));
        }
        if cfg.timeout_ticks <= cfg.message_delay {
            return Err(SimError::BadConfig(
                "timeout_ticks must exceed message_delay".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.drop_probability) {
            return Err(SimError::BadConfig("drop_probability must be in [0, 1]".into()));
        }
        let s = &cfg.schedule;
        if s.ticks_per_day == 0
            || s.measure_interval == 0
            || s.predict_interval == 0
            || s.calibrate_interval == 0
            || s.total_days == 0
        {
            return Err(SimError::BadConfig("schedule intervals must be positive".into()));
        }
        for (k, data) in node_data.iter().enumerate() {
            if data.solar.len() < s.total_days {
                return Err(SimError::BadConfig(format!(
                    "node {k} has {} solar days, schedule needs {}",
                    data.solar.len(),
                    s.total_days
                )));
            }
            if k == 0 {
                for (name, series) in &data.env {
                    if series.len() < s.total_days {
                        return Err(SimError::BadConfig(format!(
                            "sensor {name} has {} days, schedule needs {}",
                            series.len(),
                            s.total_days
                        )));
                    }
                }
            }
        }

        let target_solar = node_data[0].solar.clone();
        let lead = cfg.spec.lead;
        let policy = cfg.policy;
        let nodes = node_data
            .iter()
            .enumerate()
            .map(|(k, data)| SimNode {
                id: k as NodeId,
                data: data.clone(),
                target_solar: target_solar.clone(),
                online: true,
                round: None,
                coeffs: None,
                active_spec: None,
                active_partition: None,
                shares: BTreeMap::new(),
                control: (k == 0).then(|| PredictionLoop::new(lead, policy)),
                counters: Counters::default(),
            })
            .collect();

        let mut drop_matchers = Vec::new();
        let mut offline_windows = Vec::new();
        for fault in &cfg.faults.faults {
            match fault {
                Fault::DropMessage { matcher } => drop_matchers.push(DropMatcherState {
                    matcher: matcher.clone(),
                    drops: 0,
                }),
                Fault::NodeOffline {
                    node,
                    from_tick,
                    until_tick,
                } => {
                    if *node as usize >= node_data.len() {
                        return Err(SimError::BadConfig(format!(
                            "offline fault names node {node}"
                        )));
                    }
                    offline_windows.push((*node, *from_tick, *until_tick));
                }
                _ => {}
            }
        }

        let rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            nodes,
            queue: BTreeMap::new(),
            rng,
            records: Vec::new(),
            round_counter: 0,
            rounds_started: Vec::new(),
            round_completed: BTreeMap::new(),
            round_failures: BTreeMap::new(),
            round_messages: BTreeMap::new(),
            drop_matchers,
            offline_windows,
        })
    }

    fn offline_at(&self, node: NodeId, tick: Tick) -> bool {
        self.offline_windows
            .iter()
            .any(|&(n, from, until)| n == node && tick >= from && tick < until)
    }

    /// Advances the simulation to its final tick.
    pub fn run_to_end(&mut self) {
        let s = self.cfg.schedule;
        let drain = 2 * self.cfg.timeout_ticks + 4 * self.cfg.message_delay;
        let last_tick = s.total_days as u64 * s.ticks_per_day + drain;
        for tick in 0..=last_tick {
            self.update_online(tick);
            self.deliver_due(tick);
            let day = (tick / s.ticks_per_day) as usize;
            if day < s.total_days {
                if tick % s.measure_interval == 0 {
                    self.measure(tick, day);
                }
                if tick % s.predict_interval == 0 {
                    self.predict(tick, day);
                }
                if tick % s.calibrate_interval == 0 {
                    self.calibrate_tick(tick, day);
                }
            }
            self.check_timeouts(tick);
        }
        self.finalize();
    }

    fn update_online(&mut self, tick: Tick) {
        for k in 0..self.nodes.len() {
            let id = k as NodeId;
            let should_be_offline = self.offline_at(id, tick);
            let node = &mut self.nodes[k];
            if should_be_offline && node.online {
                node.online = false;
                node.clear_round();
                node.shares.clear();
            } else if !should_be_offline && !node.online {
                // back online: re-enter the wait state, coefficients kept
                node.online = true;
                node.round = None;
            }
        }
    }

    // -- transport ------------------------------------------------------

    fn send(&mut self, tick: Tick, msg: SimMessage) {
        let to_log = match msg.to {
            Destination::Broadcast => None,
            Destination::Node(k) => Some(k),
        };
        self.records.push(LogRecord::Message {
            tick,
            kind: msg.payload.kind(),
            from: msg.from,
            to: to_log,
            round: msg.round_id,
        });
        self.nodes[msg.from as usize].counters.messages_sent += 1;
        if msg.round_id != 0 {
            *self
                .round_messages
                .entry((msg.round_id, msg.from))
                .or_insert(0) += 1;
        }
        let recipients: Vec<NodeId> = match msg.to {
            Destination::Broadcast => (0..self.nodes.len() as NodeId)
                .filter(|&k| k != msg.from)
                .collect(),
            Destination::Node(k) => vec![k],
        };
        for k in recipients {
            if self.cfg.drop_probability > 0.0
                && self.rng.random::<f64>() < self.cfg.drop_probability
            {
                self.records.push(LogRecord::Dropped {
                    tick,
                    kind: msg.payload.kind(),
                    from: msg.from,
                    to: k,
                    round: msg.round_id,
                    why: DropWhy::Loss,
                });
                continue;
            }
            if self.fault_drops(&msg, k) {
                self.records.push(LogRecord::Dropped {
                    tick,
                    kind: msg.payload.kind(),
                    from: msg.from,
                    to: k,
                    round: msg.round_id,
                    why: DropWhy::Fault,
                });
                continue;
            }
            let mut delay = self.cfg.message_delay;
            if let MessagePayload::QColumn { col, .. } = &msg.payload {
                for fault in &self.cfg.faults.faults {
                    if let Fault::ReorderColumns {
                        round,
                        victim,
                        column,
                        extra_delay,
                    } = fault
                    {
                        if *round == msg.round_id && *victim == k && *column == *col {
                            delay += *extra_delay;
                        }
                    }
                }
            }
            self.queue
                .entry(tick + delay)
                .or_default()
                .push((k, msg.clone()));
        }
    }

    fn fault_drops(&mut self, msg: &SimMessage, recipient: NodeId) -> bool {
        for state in &mut self.drop_matchers {
            if state.matcher.matches(msg, recipient) {
                if let Some(max) = state.matcher.max_matches {
                    if state.drops >= max {
                        continue;
                    }
                }
                state.drops += 1;
                return true;
            }
        }
        false
    }

    fn deliver_due(&mut self, tick: Tick) {
        let Some(batch) = self.queue.remove(&tick) else {
            return;
        };
        for (recipient, msg) in batch {
            if !self.nodes[recipient as usize].online {
                self.records.push(LogRecord::Dropped {
                    tick,
                    kind: msg.payload.kind(),
                    from: msg.from,
                    to: recipient,
                    round: msg.round_id,
                    why: DropWhy::Offline,
                });
                continue;
            }
            self.nodes[recipient as usize].counters.messages_received += 1;
            if msg.round_id != 0 {
                *self
                    .round_messages
                    .entry((msg.round_id, recipient))
                    .or_insert(0) += 1;
            }
            self.handle_message(tick, recipient, msg);
        }
    }

    // -- message handling -------------------------------------------------

    fn handle_message(&mut self, tick: Tick, me: NodeId, msg: SimMessage) {
        match &msg.payload {
            MessagePayload::LoadData {
                window_end,
                with_error,
            } => self.on_load_data(tick, me, msg.round_id, *window_end, *with_error),
            MessagePayload::QColumn { col, values } => {
                self.on_q_column(tick, me, msg.round_id, *col, values.clone())
            }
            MessagePayload::RTransfer { cols } => {
                self.on_r_transfer(tick, me, msg.round_id, msg.from, cols.clone())
            }
            MessagePayload::QtbTransfer { entries } => {
                self.on_qtb_transfer(tick, me, msg.round_id, msg.from, entries.clone())
            }
            MessagePayload::Coefficients {
                weights,
                fitted_at,
                with_error,
            } => self.on_coefficients(
                tick,
                me,
                msg.round_id,
                weights.clone(),
                *fitted_at,
                *with_error,
            ),
            MessagePayload::PredictShare { day, tau } => {
                self.on_predict_share(tick, me, *day, msg.from, *tau)
            }
            MessagePayload::Ack => {}
        }
    }

    /// Logs a calibration message that does not belong to the node's open
    /// round.
    fn stale(&mut self, tick: Tick, me: NodeId, kind: MessageKind, round: RoundId) {
        self.records.push(LogRecord::Dropped {
            tick,
            kind,
            from: me,
            to: me,
            round,
            why: DropWhy::StaleRound,
        });
    }

    fn on_load_data(
        &mut self,
        tick: Tick,
        me: NodeId,
        round_id: RoundId,
        window_end: usize,
        with_error: bool,
    ) {
        // A newer round supersedes whatever this node was doing.
        if let Some(active) = &self.nodes[me as usize].round {
            if active.round_id >= round_id {
                self.stale(tick, me, MessageKind::LoadData, round_id);
                return;
            }
        }
        self.nodes[me as usize].clear_round();
        if let Err(reason) = self.load_round(me, round_id, window_end, with_error, tick) {
            self.node_failure(tick, me, round_id, reason);
        }
    }

    /// Builds the node's column block and QR state for a round; for the
    /// master, also finalizes and broadcasts its leading columns.
    fn load_round(
        &mut self,
        me: NodeId,
        round_id: RoundId,
        window_end: usize,
        with_error: bool,
        tick: Tick,
    ) -> Result<(), FailureReason> {
        let spec = effective_spec(&self.cfg.spec, with_error);
        let partition = spec
            .shared_partition()
            .map_err(|_| FailureReason::Timeout)?;
        let is_master = me == 0;
        let errors_series = if is_master && with_error {
            let control = self.nodes[0].control.as_ref().expect("master control");
            Some(control.error_series_through(window_end))
        } else {
            None
        };
        let node = &self.nodes[me as usize];
        let owned = partition.block(me as usize);
        let bundle = node.bundle();
        let mut block = features::build_matrix_block(
            &bundle,
            &spec,
            errors_series.as_deref(),
            window_end,
            owned.clone(),
        )
        .map_err(|_| FailureReason::Timeout)?;
        let b = features::build_targets(&bundle, &spec, window_end)
            .map_err(|_| FailureReason::Timeout)?;

        if is_master {
            let zero_fault = self
                .cfg
                .faults
                .faults
                .iter()
                .any(|f| matches!(f, Fault::ZeroFirstColumn { round } if *round == round_id));
            if zero_fault {
                for i in 0..block.rows() {
                    block.set(i, 0, 0.0);
                }
            }
        }

        let m = block.rows() as u64;
        let p = block.cols() as u64;
        let n = partition.total_cols() as u64;
        let pivot_tol = QrState::pivot_tol_for(&block);
        let qr = QrState::new(&block, owned, partition.total_cols(), pivot_tol);

        let node = &mut self.nodes[me as usize];
        node.counters.note_stored(m * p + p * n + m + m + n);
        node.round = Some(ActiveRound {
            round_id,
            window_end,
            with_error,
            partition: partition.clone(),
            qr,
            b,
            expect: Some(Expectation::QColumn { col: 0 }),
            deadline: tick + self.cfg.timeout_ticks,
            control: is_master.then(|| CalibrationRound::new(round_id, partition)),
            r_received: BTreeMap::new(),
            qtb_received: BTreeMap::new(),
        });

        if is_master {
            self.master_qr_start(tick, round_id)?;
        }
        Ok(())
    }

    fn master_qr_start(&mut self, tick: Tick, round_id: RoundId) -> Result<(), FailureReason> {
        let round = self.nodes[0].round.as_mut().expect("round just created");
        round
            .control
            .as_mut()
            .expect("master round")
            .advance(RoundPhase::Qr)
            .expect("wait -> qr");
        let payloads = round.qr.start().map_err(|e| qr_failure_reason(&e))?;
        let finished = round.qr.finished();
        let next_col = round.qr.next_col();
        let window_end = round.window_end;
        let to_send: Vec<(usize, Vec<f64>)> =
            payloads.into_iter().map(|p| (p.col, p.values)).collect();
        for (col, values) in to_send {
            self.send(
                tick,
                SimMessage {
                    from: 0,
                    to: Destination::Broadcast,
                    round_id,
                    tick_sent: tick,
                    payload: MessagePayload::QColumn { col, values },
                },
            );
        }
        let single = self.nodes.len() == 1;
        let timeout = self.cfg.timeout_ticks;
        if finished {
            let qr_flops = self.nodes[0].round.as_ref().expect("round").qr.flops();
            self.nodes[0].counters.flops += qr_flops;
            if single {
                self.nodes[0].round.as_mut().expect("round").expect = None;
                self.master_combine(tick, round_id, window_end);
            } else {
                let round = self.nodes[0].round.as_mut().expect("round");
                round.expect = Some(Expectation::RAndQtb);
                round.deadline = tick + timeout;
            }
        } else {
            let round = self.nodes[0].round.as_mut().expect("round");
            round.expect = Some(Expectation::QColumn { col: next_col });
            round.deadline = tick + timeout;
        }
        Ok(())
    }

    fn on_q_column(
        &mut self,
        tick: Tick,
        me: NodeId,
        round_id: RoundId,
        col: usize,
        values: Vec<f64>,
    ) {
        let timeout = self.cfg.timeout_ticks;
        let node = &mut self.nodes[me as usize];
        let Some(round) = node.round.as_mut() else {
            self.stale(tick, me, MessageKind::QColumn, round_id);
            return;
        };
        if round.round_id != round_id {
            self.stale(tick, me, MessageKind::QColumn, round_id);
            return;
        }
        match round.qr.receive_column(col, &values) {
            Ok(payloads) => {
                let finished = round.qr.finished();
                let next_col = round.qr.next_col();
                let to_send: Vec<(usize, Vec<f64>)> =
                    payloads.into_iter().map(|p| (p.col, p.values)).collect();
                for (c, v) in to_send {
                    self.send(
                        tick,
                        SimMessage {
                            from: me,
                            to: Destination::Broadcast,
                            round_id,
                            tick_sent: tick,
                            payload: MessagePayload::QColumn { col: c, values: v },
                        },
                    );
                }
                let node = &mut self.nodes[me as usize];
                let round = node.round.as_mut().expect("round");
                if finished {
                    node.counters.flops += round.qr.flops();
                    if me == 0 {
                        round.expect = Some(Expectation::RAndQtb);
                        round.deadline = tick + timeout;
                        self.try_master_combine(tick, round_id);
                    } else {
                        self.node_send_contributions(tick, me, round_id);
                    }
                } else {
                    round.expect = Some(Expectation::QColumn { col: next_col });
                    round.deadline = tick + timeout;
                }
            }
            Err(e) => {
                let reason = qr_failure_reason(&e);
                self.node_failure(tick, me, round_id, reason);
            }
        }
    }

    /// A non-master node finished its QR part: send R columns and Q^T b
    /// entries to the master, then await the coefficients.
    fn node_send_contributions(&mut self, tick: Tick, me: NodeId, round_id: RoundId) {
        let timeout = self.cfg.timeout_ticks;
        let node = &mut self.nodes[me as usize];
        let round = node.round.as_mut().expect("round");
        let owned = round.qr.owned();
        let r_cols: Vec<(usize, Vec<f64>)> = owned
            .clone()
            .zip(round.qr.r_block().iter().cloned())
            .collect();
        let qtb: Vec<(usize, f64)> = owned
            .clone()
            .zip(round.qr.q_block())
            .map(|(global, q_col)| (global, dot_slices(q_col, round.b.as_slice())))
            .collect();
        node.counters.flops += (owned.len() * round.b.len()) as u64;
        round.expect = Some(Expectation::Coefficients);
        round.deadline = tick + timeout;
        self.send(
            tick,
            SimMessage {
                from: me,
                to: Destination::Node(0),
                round_id,
                tick_sent: tick,
                payload: MessagePayload::RTransfer { cols: r_cols },
            },
        );
        self.send(
            tick,
            SimMessage {
                from: me,
                to: Destination::Node(0),
                round_id,
                tick_sent: tick,
                payload: MessagePayload::QtbTransfer { entries: qtb },
            },
        );
    }

    fn on_r_transfer(
        &mut self,
        tick: Tick,
        me: NodeId,
        round_id: RoundId,
        from: NodeId,
        cols: Vec<(usize, Vec<f64>)>,
    ) {
        if me != 0 {
            self.stale(tick, me, MessageKind::RTransfer, round_id);
            return;
        }
        match self.nodes[0].round.as_mut() {
            Some(round) if round.round_id == round_id => {
                round.r_received.insert(from, cols);
                round.deadline = tick + self.cfg.timeout_ticks;
            }
            _ => {
                self.stale(tick, me, MessageKind::RTransfer, round_id);
                return;
            }
        }
        self.try_master_combine(tick, round_id);
    }

    fn on_qtb_transfer(
        &mut self,
        tick: Tick,
        me: NodeId,
        round_id: RoundId,
        from: NodeId,
        entries: Vec<(usize, f64)>,
    ) {
        if me != 0 {
            self.stale(tick, me, MessageKind::QtbTransfer, round_id);
            return;
        }
        match self.nodes[0].round.as_mut() {
            Some(round) if round.round_id == round_id => {
                round.qtb_received.insert(from, entries);
                round.deadline = tick + self.cfg.timeout_ticks;
            }
            _ => {
                self.stale(tick, me, MessageKind::QtbTransfer, round_id);
                return;
            }
        }
        self.try_master_combine(tick, round_id);
    }

    /// Runs SVD + combination at the master once its own QR part is done
    /// and all R/Qtb transfers arrived.
    fn try_master_combine(&mut self, tick: Tick, round_id: RoundId) {
        let others = self.nodes.len() - 1;
        let Some(round) = self.nodes[0].round.as_ref() else {
            return;
        };
        if round.round_id != round_id
            || !round.qr.finished()
            || round.r_received.len() < others
            || round.qtb_received.len() < others
        {
            return;
        }
        let window_end = round.window_end;
        self.master_combine(tick, round_id, window_end);
    }

    fn master_combine(&mut self, tick: Tick, round_id: RoundId, window_end: usize) {
        let node = &mut self.nodes[0];
        let round = node.round.as_mut().expect("round");
        let n = round.partition.total_cols();

        // Assemble R and q from the local block plus the transfers.
        let mut r = crate::linalg::Matrix::zeros(n, n);
        let mut q = vec![0.0; n];
        for (local, global) in round.qr.owned().enumerate() {
            for i in 0..n {
                r.set(i, global, round.qr.r_block()[local][i]);
            }
            q[global] = dot_slices(&round.qr.q_block()[local], round.b.as_slice());
        }
        node.counters.flops += (round.qr.owned().len() * round.b.len()) as u64;
        for cols in round.r_received.values() {
            for (global, col) in cols {
                for i in 0..n {
                    r.set(i, *global, col[i]);
                }
            }
        }
        for entries in round.qtb_received.values() {
            for (global, value) in entries {
                q[*global] = *value;
            }
        }

        let with_error = round.with_error;
        round
            .control
            .as_mut()
            .expect("master round")
            .advance(RoundPhase::Svd)
            .expect("qr -> svd");
        let (svd, svd_stats) = match calibrate::svd_of_r(&r) {
            Ok(v) => v,
            Err(_) => {
                // Generic computation failure; surfaces to the group as a
                // timeout.
                self.node_failure(tick, 0, round_id, FailureReason::Timeout);
                return;
            }
        };
        let q = Vector::new(q).expect("n >= 1");
        self.advance_master_round(RoundPhase::Pinv);
        let (mut weights, _truncated, pinv_flops) =
            calibrate::pseudo_inverse_times(&svd.u, &svd.sigma, &svd.v, &q);
        self.nodes[0].counters.flops += svd_stats.flops + pinv_flops;

        let zero_fault = self
            .cfg
            .faults
            .faults
            .iter()
            .any(|f| matches!(f, Fault::ZeroCoefficients { round } if *round == round_id));
        if zero_fault {
            weights = Vector::zeros(weights.len());
        }
        match CoefficientVector::new(weights, window_end, round_id) {
            Ok(coeffs) => {
                self.advance_master_round(RoundPhase::Distribute);
                let payload = MessagePayload::Coefficients {
                    weights: coeffs.weights.as_slice().to_vec(),
                    fitted_at: window_end,
                    with_error,
                };
                self.install_coefficients(0, coeffs, with_error);
                self.records.push(LogRecord::CoefficientsApplied {
                    round: round_id,
                    tick,
                    node: 0,
                });
                if self.nodes.len() > 1 {
                    self.send(
                        tick,
                        SimMessage {
                            from: 0,
                            to: Destination::Broadcast,
                            round_id,
                            tick_sent: tick,
                            payload,
                        },
                    );
                }
                self.advance_master_round(RoundPhase::Done);
                self.records.push(LogRecord::RoundCompleted {
                    round: round_id,
                    tick,
                });
                self.round_completed.insert(round_id, tick);
                self.nodes[0].clear_round();
            }
            Err(_) => {
                self.node_failure(tick, 0, round_id, FailureReason::ZeroCoefficients);
            }
        }
    }

    fn advance_master_round(&mut self, to: RoundPhase) {
        self.nodes[0]
            .round
            .as_mut()
            .expect("master round")
            .control
            .as_mut()
            .expect("master round")
            .advance(to)
            .expect("legal round phase transition");
    }

    fn install_coefficients(&mut self, me: NodeId, coeffs: CoefficientVector, with_error: bool) {
        let spec = effective_spec(&self.cfg.spec, with_error);
        let partition = spec.shared_partition().expect("validated spec");
        let fitted_at = coeffs.fitted_at;
        let node = &mut self.nodes[me as usize];
        node.coeffs = Some(coeffs);
        node.active_spec = Some(spec);
        node.active_partition = Some(partition);
        if me == 0 {
            let control = self.nodes[0].control.as_mut().expect("master control");
            control.note_calibration(fitted_at);
        }
    }

    fn on_coefficients(
        &mut self,
        tick: Tick,
        me: NodeId,
        round_id: RoundId,
        weights: Vec<f64>,
        fitted_at: usize,
        with_error: bool,
    ) {
        if me == 0 {
            return;
        }
        if let Some(round) = &self.nodes[me as usize].round {
            if round.round_id > round_id {
                self.stale(tick, me, MessageKind::Coefficients, round_id);
                return;
            }
        }
        // Reject all-zero coefficients and keep the old values.
        let accepted = Vector::new(weights)
            .ok()
            .and_then(|w| CoefficientVector::new(w, fitted_at, round_id).ok());
        match accepted {
            Some(coeffs) => {
                self.install_coefficients(me, coeffs, with_error);
                self.nodes[me as usize].clear_round();
                self.records.push(LogRecord::CoefficientsApplied {
                    round: round_id,
                    tick,
                    node: me,
                });
                self.send(
                    tick,
                    SimMessage {
                        from: me,
                        to: Destination::Node(0),
                        round_id,
                        tick_sent: tick,
                        payload: MessagePayload::Ack,
                    },
                );
            }
            None => {
                self.node_failure(tick, me, round_id, FailureReason::ZeroCoefficients);
            }
        }
    }

    fn node_failure(&mut self, tick: Tick, me: NodeId, round_id: RoundId, reason: FailureReason) {
        self.records.push(LogRecord::NodeFailure {
            round: round_id,
            tick,
            node: me,
            reason,
        });
        if let Some(control) = self.nodes[me as usize]
            .round
            .as_mut()
            .and_then(|r| r.control.as_mut())
        {
            control.fail(reason);
            debug_assert!(control.is_terminal());
        }
        self.round_failures
            .entry(round_id)
            .or_default()
            .push(reason);
        self.nodes[me as usize].clear_round();
    }

    // -- scheduled actions ------------------------------------------------

    /// Master consumes the day's observation: error bookkeeping plus the
    /// error-threshold recalibration trigger. Also fires the bootstrap
    /// calibration as soon as enough days exist.
    fn measure(&mut self, tick: Tick, day: usize) {
        if !self.nodes[0].online {
            return;
        }
        let observed = self.nodes[0].data.solar[day];
        let control = self.nodes[0].control.as_mut().expect("master control");
        let outcome = control.observe(day, observed);
        let have_coeffs = self.nodes[0].coeffs.is_some();
        let threshold_due = matches!(self.cfg.policy, RecalPolicy::ErrorThreshold { .. })
            && outcome.recal_due
            && have_coeffs;
        let bootstrap_due = !have_coeffs && day + 1 >= self.cfg.spec.train_window;
        if threshold_due || bootstrap_due {
            self.try_start_round(tick, day);
        }
    }

    fn calibrate_tick(&mut self, tick: Tick, day: usize) {
        if tick == 0 || !matches!(self.cfg.policy, RecalPolicy::Periodic { .. }) {
            return;
        }
        if self.nodes[0].coeffs.is_none() {
            // bootstrap is handled by `measure`
            return;
        }
        self.try_start_round(tick, day);
    }

    fn try_start_round(&mut self, tick: Tick, day: usize) {
        if !self.nodes[0].online || self.nodes[0].round.is_some() {
            return;
        }
        if day + 1 < self.cfg.spec.train_window {
            return;
        }
        // Include the error column only once an error history exists.
        let with_error = self.cfg.spec.use_error
            && self.nodes[0]
                .control
                .as_ref()
                .expect("master control")
                .has_errors();
        self.round_counter += 1;
        let round_id = self.round_counter;
        self.records.push(LogRecord::RoundStarted {
            round: round_id,
            tick,
            window_end: day,
            with_error,
        });
        self.rounds_started.push((round_id, day, tick));
        if self.nodes.len() > 1 {
            self.send(
                tick,
                SimMessage {
                    from: 0,
                    to: Destination::Broadcast,
                    round_id,
                    tick_sent: tick,
                    payload: MessagePayload::LoadData {
                        window_end: day,
                        with_error,
                    },
                },
            );
        }
        if let Err(reason) = self.load_round(0, round_id, day, with_error, tick) {
            self.node_failure(tick, 0, round_id, reason);
        }
    }

    /// Every node with active coefficients contributes its weighted
    /// partial sum for the day; the shared prediction completes when all
    /// shares are in.
    fn predict(&mut self, tick: Tick, day: usize) {
        let total = self.nodes.len();
        for k in 0..total {
            let me = k as NodeId;
            if !self.nodes[k].online {
                continue;
            }
            let Some(spec) = self.nodes[k].active_spec.clone() else {
                continue;
            };
            let partition = self.nodes[k]
                .active_partition
                .clone()
                .expect("partition set with spec");
            let error = if k == 0 {
                self.nodes[0]
                    .control
                    .as_ref()
                    .expect("master control")
                    .error_at(day)
            } else {
                0.0 // non-master slices never include the error column
            };
            let node = &self.nodes[k];
            let cols = partition.block(k);
            let bundle = node.bundle();
            let Ok(slice) = features::build_row_slice(&bundle, &spec, error, day, cols.clone())
            else {
                continue;
            };
            let coeffs = node.coeffs.as_ref().expect("spec implies coefficients");
            let tau = dot_slices(&slice, &coeffs.weights.as_slice()[cols]);
            let node = &mut self.nodes[k];
            node.counters.flops += slice.len() as u64;
            let entry = node.shares.entry(day).or_default();
            entry.taus.insert(me, tau);
            entry.deadline = tick + self.cfg.timeout_ticks;
            if total > 1 {
                self.send(
                    tick,
                    SimMessage {
                        from: me,
                        to: Destination::Broadcast,
                        round_id: 0,
                        tick_sent: tick,
                        payload: MessagePayload::PredictShare { day, tau },
                    },
                );
            }
            self.maybe_complete_prediction(tick, me, day);
        }
    }

    fn on_predict_share(&mut self, tick: Tick, me: NodeId, day: usize, from: NodeId, tau: f64) {
        let node = &mut self.nodes[me as usize];
        let entry = node.shares.entry(day).or_default();
        entry.taus.insert(from, tau);
        if entry.deadline == 0 {
            entry.deadline = tick + self.cfg.timeout_ticks;
        }
        self.maybe_complete_prediction(tick, me, day);
    }

    fn maybe_complete_prediction(&mut self, tick: Tick, me: NodeId, day: usize) {
        let total = self.nodes.len();
        let node = &mut self.nodes[me as usize];
        let Some(entry) = node.shares.get(&day) else {
            return;
        };
        if entry.taus.len() < total || !entry.taus.contains_key(&me) {
            return;
        }
        // Sum in node-id order so every node lands on the identical value.
        let raw: f64 = entry.taus.values().sum();
        node.shares.remove(&day);
        if me == 0 {
            let lead = self.cfg.spec.lead;
            let control = self.nodes[0].control.as_mut().expect("master control");
            let p = control.record_prediction(day + lead, raw);
            self.records.push(LogRecord::Prediction {
                tick,
                day: day + lead,
                raw: p.raw,
                value: p.value,
            });
        }
    }

    fn check_timeouts(&mut self, tick: Tick) {
        for k in 0..self.nodes.len() {
            let me = k as NodeId;
            if !self.nodes[k].online {
                continue;
            }
            let expired = match &self.nodes[k].round {
                Some(round) => round
                    .expect
                    .map(|e| (round.round_id, e, round.deadline))
                    .filter(|(_, _, deadline)| tick >= *deadline),
                None => None,
            };
            if let Some((round_id, expect, _)) = expired {
                let reason = match expect {
                    Expectation::QColumn { .. } => FailureReason::QMissing,
                    Expectation::RAndQtb => FailureReason::RMissing,
                    Expectation::Coefficients => FailureReason::Timeout,
                };
                self.node_failure(tick, me, round_id, reason);
            }
            // stale share collections
            let node = &mut self.nodes[k];
            let dead: Vec<usize> = node
                .shares
                .iter()
                .filter(|(_, c)| tick >= c.deadline)
                .map(|(day, _)| *day)
                .collect();
            for day in dead {
                node.shares.remove(&day);
                if me == 0 {
                    self.records.push(LogRecord::PredictionSkipped { tick, day });
                }
            }
        }
    }

    // -- end of run ---------------------------------------------------------

    fn finalize(&mut self) {
        let started = self.rounds_started.clone();
        for (round_id, _, _) in started {
            let completed = self.round_completed.contains_key(&round_id);
            let reason = if completed {
                None
            } else {
                match self.round_failures.get(&round_id) {
                    Some(rs) if !rs.is_empty() => {
                        Some(*rs.iter().min_by_key(|r| r.precedence()).unwrap())
                    }
                    // never reached a terminal state before the run ended
                    _ => Some(FailureReason::Timeout),
                }
            };
            let master_messages = self
                .round_messages
                .get(&(round_id, 0))
                .copied()
                .unwrap_or(0);
            let bottleneck = (0..self.nodes.len() as NodeId)
                .map(|k| {
                    self.round_messages
                        .get(&(round_id, k))
                        .copied()
                        .unwrap_or(0)
                })
                .max()
                .unwrap_or(0);
            self.records.push(LogRecord::RoundOutcome {
                round: round_id,
                success: completed,
                reason,
                master_messages,
                bottleneck_messages: bottleneck,
            });
        }
        for node in &self.nodes {
            self.records.push(LogRecord::NodeCounters {
                node: node.id,
                flops: node.counters.flops,
                messages_sent: node.counters.messages_sent,
                messages_received: node.counters.messages_received,
                values_stored_peak: node.counters.values_stored_peak,
            });
        }
    }

    pub fn into_log(self) -> SimulationLog {
        SimulationLog {
            records: self.records,
        }
    }

    pub fn nodes(&self) -> &[SimNode] {
        &self.nodes
    }
}

fn effective_spec(base: &FeatureSpec, with_error: bool) -> FeatureSpec {
    let mut spec = base.clone();
    spec.use_error = with_error;
    spec
}

fn qr_failure_reason(e: &QrError) -> FailureReason {
    match e {
        QrError::ZeroColumn { col: 0, .. } => FailureReason::ZeroFirstColumn,
        // a later pivot collapsed: its column can never be broadcast
        QrError::ZeroColumn { .. } => FailureReason::QMissing,
        QrError::OutOfOrderColumn { .. } => FailureReason::QOutOfOrder,
        _ => FailureReason::QOutOfOrder,
    }
}
