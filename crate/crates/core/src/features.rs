//! Construction of the calibration matrix X and per-day feature rows
//! from lagged daily time series.
//!
//! Canonical column order, chosen so that every node's columns form one
//! contiguous run (the master owns everything derived from the predicted
//! series plus the environmental sensors):
//!
//! 1. self solar lags `0..n_self_lags`
//! 2. prediction-error column (if enabled)
//! 3. first-derivative column (if enabled)
//! 4. environmental lags, per sensor in spec order
//! 5. neighbor solar lags, per neighbor in spec order
//!
//! A row anchored at day `d` reads lag-`k` features from day `d - k` and
//! its target from day `d + lead`; no value after `target - lead` ever
//! enters the row.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use thiserror::Error;

use crate::linalg::{ColumnPartition, Matrix, Vector};
use crate::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing series for {0}")]
    MissingSeries(String),
    #[error("invalid feature spec: {0}")]
    BadSpec(String),
}

/// Which variables enter the model and with how many lagged values, plus
/// the timing windows: `lead` days ahead are predicted from a
/// `train_window`-day history, recalibrating every `recal_window` days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Number of past self solar values (lags 0..n-1).
    pub n_self_lags: usize,
    /// Per-neighbor (node id, lag count).
    pub neighbor_lags: Vec<(NodeId, usize)>,
    /// Per-sensor (name, lag count).
    pub env_lags: Vec<(String, usize)>,
    pub use_error: bool,
    pub use_derivative: bool,
    /// Prediction lead time T_L in days.
    pub lead: usize,
    /// Training window T_T in days.
    pub train_window: usize,
    /// Recalibration window T_R in days.
    pub recal_window: usize,
}

impl FeatureSpec {
    /// Total feature columns n.
    pub fn total_columns(&self) -> usize {
        self.n_self_lags
            + usize::from(self.use_error)
            + usize::from(self.use_derivative)
            + self.env_lags.iter().map(|(_, k)| k).sum::<usize>()
            + self.neighbor_lags.iter().map(|(_, k)| k).sum::<usize>()
    }

    /// Window days consumed by the lag structure (N past values consume
    /// N window days); sizes the usable row count.
    pub fn max_lag(&self) -> usize {
        let mut lag = self.n_self_lags;
        if self.use_derivative {
            lag = lag.max(1);
        }
        for (_, k) in &self.neighbor_lags {
            lag = lag.max(*k);
        }
        for (_, k) in &self.env_lags {
            lag = lag.max(*k);
        }
        lag
    }

    /// Deepest day index any column reaches behind its base day; the
    /// first usable base day of a window starts this far in.
    pub fn deepest_index(&self) -> usize {
        let mut deep = self.n_self_lags.saturating_sub(1);
        if self.use_derivative {
            deep = deep.max(1);
        }
        for (_, k) in &self.neighbor_lags {
            deep = deep.max(k.saturating_sub(1));
        }
        for (_, k) in &self.env_lags {
            deep = deep.max(k.saturating_sub(1));
        }
        deep
    }

    /// Usable training rows m for this spec's window.
    pub fn training_rows(&self) -> isize {
        self.train_window as isize - self.lead as isize - self.max_lag() as isize
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let n = self.total_columns();
        if n == 0 {
            return Err(FeatureError::BadSpec("no feature columns".into()));
        }
        if self.train_window <= self.lead {
            return Err(FeatureError::BadSpec(format!(
                "train_window {} must exceed lead {}",
                self.train_window, self.lead
            )));
        }
        if self.training_rows() < n as isize {
            return Err(FeatureError::BadSpec(format!(
                "window yields {} rows for {} columns",
                self.training_rows(),
                n
            )));
        }
        let mut seen_nodes = std::collections::BTreeSet::new();
        for (id, k) in &self.neighbor_lags {
            if *k == 0 {
                return Err(FeatureError::BadSpec(format!("neighbor {id} has 0 lags")));
            }
            if !seen_nodes.insert(id) {
                return Err(FeatureError::BadSpec(format!("duplicate neighbor {id}")));
            }
        }
        let mut seen_env = std::collections::BTreeSet::new();
        for (name, k) in &self.env_lags {
            if *k == 0 {
                return Err(FeatureError::BadSpec(format!("sensor {name} has 0 lags")));
            }
            if !seen_env.insert(name.clone()) {
                return Err(FeatureError::BadSpec(format!("duplicate sensor {name}")));
            }
        }
        Ok(())
    }

    /// Labels for every column, in canonical order.
    pub fn column_labels(&self) -> Vec<ColumnLabel> {
        let mut labels = Vec::with_capacity(self.total_columns());
        for lag in 0..self.n_self_lags {
            labels.push(ColumnLabel::SelfSolar { lag });
        }
        if self.use_error {
            labels.push(ColumnLabel::PredictionError);
        }
        if self.use_derivative {
            labels.push(ColumnLabel::Derivative);
        }
        for (name, lags) in &self.env_lags {
            for lag in 0..*lags {
                labels.push(ColumnLabel::Env {
                    sensor: name.clone(),
                    lag,
                });
            }
        }
        for (node, lags) in &self.neighbor_lags {
            for lag in 0..*lags {
                labels.push(ColumnLabel::NeighborSolar { node: *node, lag });
            }
        }
        labels
    }

    /// Partition for the shared-prediction protocol: the master owns the
    /// self/error/derivative/environment block, then one block per listed
    /// neighbor.
    pub fn shared_partition(&self) -> Result<ColumnPartition, FeatureError> {
        let master = self.n_self_lags
            + usize::from(self.use_error)
            + usize::from(self.use_derivative)
            + self.env_lags.iter().map(|(_, k)| k).sum::<usize>();
        if master == 0 {
            return Err(FeatureError::BadSpec(
                "master node owns no columns; add a self lag".into(),
            ));
        }
        let mut sizes = vec![master];
        for (_, k) in &self.neighbor_lags {
            sizes.push(*k);
        }
        ColumnPartition::from_block_sizes(&sizes)
            .map_err(|e| FeatureError::BadSpec(e.to_string()))
    }
}

impl Default for FeatureSpec {
    /// The field-scenario defaults: predict two days ahead from seven
    /// days of data, one self lag, recalibrating weekly.
    fn default() -> Self {
        Self {
            n_self_lags: 1,
            neighbor_lags: Vec::new(),
            env_lags: Vec::new(),
            use_error: false,
            use_derivative: false,
            lead: 2,
            train_window: 7,
            recal_window: 7,
        }
    }
}

/// Source and lag of one matrix column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnLabel {
    SelfSolar { lag: usize },
    PredictionError,
    Derivative,
    Env { sensor: String, lag: usize },
    NeighborSolar { node: NodeId, lag: usize },
}

/// Day-indexed views of every series a build needs. Index 0 is the first
/// day of the dataset; all slices share that origin.
#[derive(Debug, Clone, Default)]
pub struct SeriesBundle<'a> {
    /// The predicted node's solar series (also the target source).
    pub self_solar: &'a [f64],
    pub neighbors: BTreeMap<NodeId, &'a [f64]>,
    pub env: BTreeMap<String, &'a [f64]>,
}

/// The calibration matrix, its aligned targets, and provenance.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub x: Matrix,
    pub targets: Vector,
    pub column_labels: Vec<ColumnLabel>,
    /// First and last base day of the rows.
    pub time_span: (usize, usize),
}

/// Builds the full calibration matrix over the training window ending at
/// `window_end` (inclusive). `errors` must be supplied day-indexed iff
/// the spec uses the prediction-error feature.
pub fn build_matrix(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    errors: Option<&[f64]>,
    window_end: usize,
) -> Result<FeatureMatrix, FeatureError> {
    spec.validate()?;
    if spec.use_error != errors.is_some() {
        return Err(FeatureError::BadSpec(
            "errors must be supplied exactly when use_error is set".into(),
        ));
    }
    let n = spec.total_columns();
    let rows = row_days(spec, window_end)?;
    let mut data = Vec::with_capacity(rows.len() * n);
    let mut targets = Vec::with_capacity(rows.len());
    for &day in &rows {
        let row = build_row_block(bundle, spec, errors, ErrorInput::Series, day, 0..n)?;
        data.extend_from_slice(&row);
        targets.push(read(bundle.self_solar, "self solar", day + spec.lead)?);
    }
    let x = Matrix::new(rows.len(), n, data)
        .map_err(|e| FeatureError::InsufficientData(e.to_string()))?;
    let targets =
        Vector::new(targets).map_err(|e| FeatureError::InsufficientData(e.to_string()))?;
    Ok(FeatureMatrix {
        x,
        targets,
        column_labels: spec.column_labels(),
        time_span: (rows[0], *rows.last().unwrap()),
    })
}

/// A single feature row anchored at `day`, aligned column-for-column with
/// [`build_matrix`]; its dot product with the coefficient vector is the
/// prediction for `day + lead`. The error feature takes the scalar
/// `current_error`.
pub fn build_row(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    current_error: f64,
    day: usize,
) -> Result<Vector, FeatureError> {
    let n = spec.total_columns();
    let row = build_row_block(
        bundle,
        spec,
        None,
        ErrorInput::Scalar(current_error),
        day,
        0..n,
    )?;
    Vector::new(row).map_err(|e| FeatureError::BadSpec(e.to_string()))
}

/// The columns `cols` of the matrix row anchored at `day`. Nodes in the
/// distributed protocol call this with their owned column range and a
/// bundle holding only their own series.
pub fn build_row_slice(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    current_error: f64,
    day: usize,
    cols: Range<usize>,
) -> Result<Vec<f64>, FeatureError> {
    build_row_block(bundle, spec, None, ErrorInput::Scalar(current_error), day, cols)
}

/// The column block `cols` of the full training matrix, plus nothing
/// else; the distributed calibration loads each node's block this way.
pub fn build_matrix_block(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    errors: Option<&[f64]>,
    window_end: usize,
    cols: Range<usize>,
) -> Result<Matrix, FeatureError> {
    let rows = row_days(spec, window_end)?;
    let width = cols.len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &day in &rows {
        let row = build_row_block(bundle, spec, errors, ErrorInput::Series, day, cols.clone())?;
        data.extend_from_slice(&row);
    }
    Matrix::new(rows.len(), width, data).map_err(|e| FeatureError::InsufficientData(e.to_string()))
}

/// Targets aligned with the window's rows: self solar at `day + lead`.
pub fn build_targets(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    window_end: usize,
) -> Result<Vector, FeatureError> {
    let rows = row_days(spec, window_end)?;
    let mut targets = Vec::with_capacity(rows.len());
    for &day in &rows {
        targets.push(read(bundle.self_solar, "self solar", day + spec.lead)?);
    }
    Vector::new(targets).map_err(|e| FeatureError::InsufficientData(e.to_string()))
}

/// Base days of the training rows for the window ending at `window_end`.
pub fn row_days(spec: &FeatureSpec, window_end: usize) -> Result<Vec<usize>, FeatureError> {
    let t_t = spec.train_window;
    if window_end + 1 < t_t {
        return Err(FeatureError::InsufficientData(format!(
            "window end {window_end} gives fewer than {t_t} days"
        )));
    }
    let window_start = window_end + 1 - t_t;
    let m = spec.training_rows();
    if m < spec.total_columns() as isize || m < 1 {
        return Err(FeatureError::InsufficientData(format!(
            "window yields {m} rows for {} columns",
            spec.total_columns()
        )));
    }
    let first = window_start + spec.deepest_index();
    Ok((first..first + m as usize).collect())
}

enum ErrorInput {
    /// Day-indexed error series (matrix building).
    Series,
    /// Scalar current error (row building).
    Scalar(f64),
}

fn build_row_block(
    bundle: &SeriesBundle<'_>,
    spec: &FeatureSpec,
    errors: Option<&[f64]>,
    error_input: ErrorInput,
    day: usize,
    cols: Range<usize>,
) -> Result<Vec<f64>, FeatureError> {
    let mut out = Vec::with_capacity(cols.len());
    let mut col = 0usize;
    let mut push = |value: Result<f64, FeatureError>, col: usize| -> Result<(), FeatureError> {
        if cols.contains(&col) {
            out.push(value?);
        }
        Ok(())
    };

    for lag in 0..spec.n_self_lags {
        push(lagged(bundle.self_solar, "self solar", day, lag), col)?;
        col += 1;
    }
    if spec.use_error {
        // evaluated lazily: blocks that do not own this column may not
        // hold the error series at all
        let value = match (&error_input, errors) {
            (ErrorInput::Scalar(e), _) => Ok(*e),
            (ErrorInput::Series, Some(series)) => read(series, "prediction error", day),
            (ErrorInput::Series, None) => Err(FeatureError::BadSpec(
                "error series required by spec".into(),
            )),
        };
        push(value, col)?;
        col += 1;
    }
    if spec.use_derivative {
        let value = (|| {
            let today = lagged(bundle.self_solar, "self solar", day, 0)?;
            let yesterday = lagged(bundle.self_solar, "self solar", day, 1)?;
            Ok(today - yesterday)
        })();
        push(value, col)?;
        col += 1;
    }
    for (name, lags) in &spec.env_lags {
        let touched = (col..col + lags).any(|c| cols.contains(&c));
        let series = if touched {
            *bundle
                .env
                .get(name)
                .ok_or_else(|| FeatureError::MissingSeries(format!("sensor {name}")))?
        } else {
            &[][..] // block doesn't touch this sensor
        };
        for lag in 0..*lags {
            push(lagged(series, name, day, lag), col)?;
            col += 1;
        }
    }
    for (node, lags) in &spec.neighbor_lags {
        let touched = (col..col + lags).any(|c| cols.contains(&c));
        let series = if touched {
            *bundle
                .neighbors
                .get(node)
                .ok_or_else(|| FeatureError::MissingSeries(format!("neighbor node {node}")))?
        } else {
            &[][..]
        };
        for lag in 0..*lags {
            push(lagged(series, &format!("node {node}"), day, lag), col)?;
            col += 1;
        }
    }
    debug_assert_eq!(col, spec.total_columns());
    if out.len() != cols.len() {
        return Err(FeatureError::BadSpec(format!(
            "column range {cols:?} outside the {col} spec columns"
        )));
    }
    Ok(out)
}

fn lagged(series: &[f64], what: &str, day: usize, lag: usize) -> Result<f64, FeatureError> {
    if lag > day {
        return Err(FeatureError::InsufficientData(format!(
            "{what}: lag {lag} reaches before day 0 (day {day})"
        )));
    }
    read(series, what, day - lag)
}

fn read(series: &[f64], what: &str, day: usize) -> Result<f64, FeatureError> {
    series.get(day).copied().ok_or_else(|| {
        FeatureError::InsufficientData(format!(
            "{what}: day {day} beyond series length {}",
            series.len()
        ))
    })
}
