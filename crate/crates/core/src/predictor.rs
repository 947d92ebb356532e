//! The recalibrating prediction loop and the distributed prediction step.
//!
//! A predictor fits coefficients over a trailing training window, then
//! predicts `lead` days ahead each day, tracking the signed prediction
//! error once observations arrive. Recalibration fires either on a fixed
//! day cadence or when the error exceeds a threshold with enough new data
//! in the window. A failed calibration never touches the active
//! coefficients.
//!
//! Bootstrap follows the two-phase scheme: an initial fit without the
//! error column, an in-sample prediction pass over the training window to
//! materialize an error history, then a refit with the error column.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::calibrate::{calibrate_centralized, CalibrateError, CoefficientVector, RoundStamp};
use crate::features::{self, FeatureError, FeatureSpec, SeriesBundle};
use crate::linalg::{dot_slices, ColumnPartition};
use crate::metrics;
use crate::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    /// No calibration has ever succeeded; there are no coefficients to
    /// predict with.
    #[error("no active coefficients: calibration has never succeeded")]
    StaleCoefficients,
    #[error("day {0} is not the next expected observation day {1}")]
    OutOfSequence(usize, usize),
}

/// When to refit the coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RecalPolicy {
    /// Every `window` days (fires when `day % window == 0`).
    Periodic { window: usize },
    /// When |error| exceeds `threshold` and at least `min_new_days`
    /// observations arrived since the last fit.
    ErrorThreshold { threshold: f64, min_new_days: usize },
}

/// Whether the group shares one prediction or each node fits its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    SharedSingle,
    PerNode,
}

/// One node's contribution to a distributed prediction: the weighted
/// partial sum over its owned feature slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionShare {
    pub node: NodeId,
    pub tau: f64,
}

/// A prediction, raw and clamped at zero (solar current cannot go
/// negative); the clamped value is what enters the logs and the error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub raw: f64,
    pub value: f64,
}

impl Prediction {
    fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            value: raw.max(0.0),
        }
    }
}

/// Prediction-loop bookkeeping shared by the local predictor and the simulated
/// master node: predictions by target day, defined errors, and the
/// recalibration trigger state. Holds no series data.
#[derive(Debug, Clone)]
pub struct PredictionLoop {
    lead: usize,
    policy: RecalPolicy,
    predictions: BTreeMap<usize, Prediction>,
    errors: BTreeMap<usize, f64>,
    last_calibration_day: Option<usize>,
}

/// Result of consuming one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observed {
    /// Signed error (predicted - observed) when a prediction for the day
    /// exists.
    pub error: Option<f64>,
    /// True when the recalibration policy fires on this observation.
    pub recal_due: bool,
}

impl PredictionLoop {
    pub fn new(lead: usize, policy: RecalPolicy) -> Self {
        Self {
            lead,
            policy,
            predictions: BTreeMap::new(),
            errors: BTreeMap::new(),
            last_calibration_day: None,
        }
    }

    pub fn lead(&self) -> usize {
        self.lead
    }

    pub fn record_prediction(&mut self, target_day: usize, raw: f64) -> Prediction {
        let p = Prediction::from_raw(raw);
        self.predictions.insert(target_day, p);
        p
    }

    pub fn prediction_for(&self, day: usize) -> Option<Prediction> {
        self.predictions.get(&day).copied()
    }

    /// All recorded predictions, keyed by target day.
    pub fn predictions(&self) -> impl Iterator<Item = (usize, Prediction)> + '_ {
        self.predictions.iter().map(|(d, p)| (*d, *p))
    }

    /// Consumes the day's observation: defines the error when a
    /// prediction exists and evaluates the recalibration policy.
    pub fn observe(&mut self, day: usize, observed: f64) -> Observed {
        let error = self.predictions.get(&day).map(|p| p.value - observed);
        if let Some(e) = error {
            self.errors.insert(day, e);
        }
        let recal_due = self.last_calibration_day.is_some()
            && match self.policy {
                RecalPolicy::Periodic { window } => day > 0 && day.is_multiple_of(window),
                RecalPolicy::ErrorThreshold {
                    threshold,
                    min_new_days,
                } => {
                    let new_days = day - self.last_calibration_day.unwrap();
                    matches!(error, Some(e) if e.abs() > threshold) && new_days >= min_new_days
                }
            };
        Observed { error, recal_due }
    }

    pub fn note_calibration(&mut self, day: usize) {
        self.last_calibration_day = Some(day);
    }

    pub fn last_calibration_day(&self) -> Option<usize> {
        self.last_calibration_day
    }

    /// Seeds the error history (bootstrap in-sample errors); real
    /// observations later overwrite these.
    pub fn seed_errors(&mut self, errors: impl IntoIterator<Item = (usize, f64)>) {
        for (day, e) in errors {
            self.errors.entry(day).or_insert(e);
        }
    }

    /// The error feature value at `day`: the most recent defined error at
    /// or before `day`, the first defined error when none precedes it,
    /// and 0 before any error exists.
    pub fn error_at(&self, day: usize) -> f64 {
        if let Some((_, e)) = self.errors.range(..=day).next_back() {
            return *e;
        }
        self.errors
            .values()
            .next()
            .copied()
            .unwrap_or(0.0)
    }

    /// Day-indexed error series through `day` with the carry rule of
    /// [`Self::error_at`] applied to every index.
    pub fn error_series_through(&self, day: usize) -> Vec<f64> {
        (0..=day).map(|d| self.error_at(d)).collect()
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// Outcome of one [`PredictorState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub error: Option<f64>,
    pub recalibrated: bool,
    /// A calibration was attempted and failed; the previous coefficients
    /// stay active.
    pub calibration_error: Option<CalibrateError>,
}

/// A single node running the full prediction loop on locally held data
/// (the per-node mode; shared-group prediction lives in `simnet`).
#[derive(Debug, Clone)]
pub struct PredictorState {
    spec: FeatureSpec,
    pub mode: PredictionMode,
    control: PredictionLoop,
    coeffs: Option<CoefficientVector>,
    /// Coefficient history as (round_id, fitted_at) stamps, oldest first.
    history: Vec<RoundStamp>,
    self_solar: Vec<f64>,
    neighbors: BTreeMap<NodeId, Vec<f64>>,
    env: BTreeMap<String, Vec<f64>>,
    round_counter: u64,
    pub counters: metrics::Counters,
}

impl PredictorState {
    pub fn new(
        spec: FeatureSpec,
        mode: PredictionMode,
        policy: RecalPolicy,
    ) -> Result<Self, FeatureError> {
        spec.validate()?;
        let lead = spec.lead;
        Ok(Self {
            spec,
            mode,
            control: PredictionLoop::new(lead, policy),
            coeffs: None,
            history: Vec::new(),
            self_solar: Vec::new(),
            neighbors: BTreeMap::new(),
            env: BTreeMap::new(),
            round_counter: 0,
            counters: metrics::Counters::default(),
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> Option<&CoefficientVector> {
        self.coeffs.as_ref()
    }

    pub fn coefficient_history(&self) -> &[RoundStamp] {
        &self.history
    }

    pub fn control(&self) -> &PredictionLoop {
        &self.control
    }

    /// Days of self observations recorded so far.
    pub fn days(&self) -> usize {
        self.self_solar.len()
    }

    pub fn record_neighbor(&mut self, node: NodeId, day: usize, value: f64) {
        let series = self.neighbors.entry(node).or_default();
        debug_assert_eq!(series.len(), day, "neighbor days must arrive in order");
        series.push(value);
    }

    pub fn record_env(&mut self, sensor: &str, day: usize, value: f64) {
        let series = self.env.entry(sensor.to_string()).or_default();
        debug_assert_eq!(series.len(), day, "env days must arrive in order");
        series.push(value);
    }

    fn bundle(&self) -> SeriesBundle<'_> {
        SeriesBundle {
            self_solar: &self.self_solar,
            neighbors: self
                .neighbors
                .iter()
                .map(|(k, v)| (*k, v.as_slice()))
                .collect(),
            env: self
                .env
                .iter()
                .map(|(k, v)| (k.clone(), v.as_slice()))
                .collect(),
        }
    }

    /// True once enough days exist for the first calibration.
    pub fn ready_to_bootstrap(&self) -> bool {
        self.coeffs.is_none() && self.days() >= self.spec.train_window
    }

    /// Initial calibration per the two-phase scheme. Call once
    /// [`Self::ready_to_bootstrap`] returns true.
    pub fn bootstrap(&mut self) -> Result<(), CalibrateError> {
        let window_end = self.days() - 1;
        let bundle = self.bundle();

        // Phase A: fit without the error column.
        let mut spec_a = self.spec.clone();
        spec_a.use_error = false;
        let fm = features::build_matrix(&bundle, &spec_a, None, window_end)
            .map_err(|e| CalibrateError::BadInput(e.to_string()))?;
        self.round_counter += 1;
        let stamp = RoundStamp {
            round_id: self.round_counter,
            fitted_at: window_end,
        };
        let cal_a = calibrate_centralized(&fm.x, &fm.targets, stamp)?;
        self.counters.flops += cal_a.flops;
        self.install(cal_a.coeffs.clone(), window_end);

        if !self.spec.use_error {
            return Ok(());
        }

        // In-sample pass: predict the training targets with the phase-A
        // coefficients and record the signed errors at the target days.
        let days = features::row_days(&spec_a, window_end)
            .map_err(|e| CalibrateError::BadInput(e.to_string()))?;
        let mut seeded = Vec::with_capacity(days.len());
        for (r, &day) in days.iter().enumerate() {
            let pred = dot_slices(fm.x.row(r), cal_a.coeffs.weights.as_slice());
            self.counters.flops += metrics::mlr_prediction_ops(fm.x.cols());
            let clamped = pred.max(0.0);
            seeded.push((day + self.spec.lead, clamped - fm.targets.get(r)));
        }
        self.control.seed_errors(seeded);

        // Phase B: refit with the error column included.
        let errors = self.control.error_series_through(window_end);
        let bundle = self.bundle();
        let fm = features::build_matrix(&bundle, &self.spec, Some(&errors), window_end)
            .map_err(|e| CalibrateError::BadInput(e.to_string()))?;
        self.round_counter += 1;
        let stamp = RoundStamp {
            round_id: self.round_counter,
            fitted_at: window_end,
        };
        let cal_b = calibrate_centralized(&fm.x, &fm.targets, stamp)?;
        self.counters.flops += cal_b.flops;
        self.install(cal_b.coeffs, window_end);
        Ok(())
    }

    fn install(&mut self, coeffs: CoefficientVector, day: usize) {
        debug_assert!(self
            .coeffs
            .as_ref()
            .map(|c| coeffs.round_id > c.round_id)
            .unwrap_or(true));
        self.history.push(RoundStamp {
            round_id: coeffs.round_id,
            fitted_at: coeffs.fitted_at,
        });
        self.coeffs = Some(coeffs);
        self.control.note_calibration(day);
    }

    /// Predicts the solar current `lead` days past `day` from data
    /// through `day`; records it for later error tracking.
    pub fn predict_local(&mut self, day: usize) -> Result<Prediction, PredictError> {
        let coeffs = self.coeffs.as_ref().ok_or(PredictError::StaleCoefficients)?;
        let row = features::build_row(&self.bundle(), &self.spec, self.control.error_at(day), day)?;
        let raw = dot_slices(row.as_slice(), coeffs.weights.as_slice());
        self.counters.flops += metrics::mlr_prediction_ops(row.len());
        Ok(self.control.record_prediction(day + self.spec.lead, raw))
    }

    /// Computes the same prediction as [`Self::predict_local`] by the
    /// distributed protocol run in process: each node's share is the dot
    /// product over its owned column slice, and the shares are summed in
    /// node order. Does not record the prediction.
    pub fn predict_distributed(
        &self,
        partition: &ColumnPartition,
        day: usize,
    ) -> Result<(f64, Vec<PredictionShare>), PredictError> {
        let coeffs = self.coeffs.as_ref().ok_or(PredictError::StaleCoefficients)?;
        assert_eq!(
            partition.total_cols(),
            self.spec.total_columns(),
            "partition must cover the feature columns"
        );
        let bundle = self.bundle();
        let error = self.control.error_at(day);
        let mut shares = Vec::with_capacity(partition.nodes());
        for node in 0..partition.nodes() {
            let cols = partition.block(node);
            let slice = features::build_row_slice(&bundle, &self.spec, error, day, cols.clone())?;
            let tau = dot_slices(&slice, &coeffs.weights.as_slice()[cols]);
            shares.push(PredictionShare {
                node: node as NodeId,
                tau,
            });
        }
        let total = shares.iter().map(|s| s.tau).sum();
        Ok((total, shares))
    }

    /// Consumes the day's observation: appends it to the self series,
    /// defines the prediction error, and recalibrates when the policy
    /// fires. Neighbor and environment values for the same day must be
    /// recorded before stepping.
    pub fn step(&mut self, day: usize, observation: f64) -> Result<StepOutcome, PredictError> {
        if day != self.self_solar.len() {
            return Err(PredictError::OutOfSequence(day, self.self_solar.len()));
        }
        self.self_solar.push(observation);
        let observed = self.control.observe(day, observation);
        let mut outcome = StepOutcome {
            error: observed.error,
            recalibrated: false,
            calibration_error: None,
        };
        if observed.recal_due && self.coeffs.is_some() {
            match self.recalibrate(day) {
                Ok(()) => outcome.recalibrated = true,
                Err(e) => outcome.calibration_error = Some(e),
            }
        }
        Ok(outcome)
    }

    /// Refits over the window ending at `day`. On failure the active
    /// coefficients are left untouched.
    fn recalibrate(&mut self, day: usize) -> Result<(), CalibrateError> {
        let errors_opt = if self.spec.use_error {
            Some(self.control.error_series_through(day))
        } else {
            None
        };
        let bundle = self.bundle();
        let fm = features::build_matrix(&bundle, &self.spec, errors_opt.as_deref(), day)
            .map_err(|e| CalibrateError::BadInput(e.to_string()))?;
        let stamp = RoundStamp {
            round_id: self.round_counter + 1,
            fitted_at: day,
        };
        let cal = calibrate_centralized(&fm.x, &fm.targets, stamp)?;
        self.round_counter += 1;
        self.counters.flops += cal.flops;
        self.install(cal.coeffs, day);
        Ok(())
    }
}
