//! Evaluation metrics — RMSE, maximum absolute error, mean residual, and
//! the Student-t 95% confidence interval on the mean residual — plus the
//! operation and message counters behind the energy accounting.
//!
//! Residual sign convention: `predicted - observed`, so a positive mean
//! residual means overprediction. Prediction logs carry the signed
//! per-point residual so either framing can be read off directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {predicted} predictions vs {observed} observations")]
    LengthMismatch { predicted: usize, observed: usize },
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Two-tailed 95% critical values of the Student-t distribution for
/// df = 1..=200; beyond that the normal limit 1.960 applies.
#[rustfmt::skip]
const T_CRIT_95: [f64; 200] = [
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582,
    2.446912, 2.364624, 2.306004, 2.262157, 2.228139,
    2.200985, 2.178813, 2.160369, 2.144787, 2.131450,
    2.119905, 2.109816, 2.100922, 2.093024, 2.085963,
    2.079614, 2.073873, 2.068658, 2.063899, 2.059539,
    2.055529, 2.051831, 2.048407, 2.045230, 2.042272,
    2.039513, 2.036933, 2.034515, 2.032245, 2.030108,
    2.028094, 2.026192, 2.024394, 2.022691, 2.021075,
    2.019541, 2.018082, 2.016692, 2.015368, 2.014103,
    2.012896, 2.011741, 2.010635, 2.009575, 2.008559,
    2.007584, 2.006647, 2.005746, 2.004879, 2.004045,
    2.003241, 2.002465, 2.001717, 2.000995, 2.000298,
    1.999624, 1.998972, 1.998341, 1.997730, 1.997138,
    1.996564, 1.996008, 1.995469, 1.994945, 1.994437,
    1.993943, 1.993464, 1.992997, 1.992543, 1.992102,
    1.991673, 1.991254, 1.990847, 1.990450, 1.990063,
    1.989686, 1.989319, 1.988960, 1.988610, 1.988268,
    1.987934, 1.987608, 1.987290, 1.986979, 1.986675,
    1.986377, 1.986086, 1.985802, 1.985523, 1.985251,
    1.984984, 1.984723, 1.984467, 1.984217, 1.983972,
    1.983731, 1.983495, 1.983264, 1.983038, 1.982815,
    1.982597, 1.982383, 1.982173, 1.981967, 1.981765,
    1.981567, 1.981372, 1.981180, 1.980992, 1.980808,
    1.980626, 1.980448, 1.980272, 1.980100, 1.979930,
    1.979764, 1.979600, 1.979439, 1.979280, 1.979124,
    1.978971, 1.978820, 1.978671, 1.978524, 1.978380,
    1.978239, 1.978099, 1.977961, 1.977826, 1.977692,
    1.977561, 1.977431, 1.977304, 1.977178, 1.977054,
    1.976931, 1.976811, 1.976692, 1.976575, 1.976460,
    1.976346, 1.976233, 1.976122, 1.976013, 1.975905,
    1.975799, 1.975694, 1.975590, 1.975488, 1.975387,
    1.975288, 1.975189, 1.975092, 1.974996, 1.974902,
    1.974808, 1.974716, 1.974625, 1.974535, 1.974446,
    1.974358, 1.974271, 1.974185, 1.974100, 1.974017,
    1.973934, 1.973852, 1.973771, 1.973691, 1.973612,
    1.973534, 1.973457, 1.973381, 1.973305, 1.973231,
    1.973157, 1.973084, 1.973012, 1.972941, 1.972870,
    1.972800, 1.972731, 1.972663, 1.972595, 1.972528,
    1.972462, 1.972396, 1.972332, 1.972268, 1.972204,
    1.972141, 1.972079, 1.972017, 1.971957, 1.971896,
];

/// Two-tailed 95% t-critical value for the given degrees of freedom.
pub fn t_critical_95(df: usize) -> f64 {
    match df {
        0 => f64::INFINITY,
        1..=200 => T_CRIT_95[df - 1],
        _ => 1.960,
    }
}

/// Operation and message counters for one node (or an aggregate).
/// A multiply-accumulate counts as one operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub flops: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub values_stored_peak: u64,
}

impl Counters {
    pub fn merge(&mut self, other: &Counters) {
        self.flops += other.flops;
        self.messages_sent += other.messages_sent;
        self.messages_received += other.messages_received;
        self.values_stored_peak = self.values_stored_peak.max(other.values_stored_peak);
    }

    /// Tracks a storage gauge, keeping the peak.
    pub fn note_stored(&mut self, values: u64) {
        self.values_stored_peak = self.values_stored_peak.max(values);
    }
}

/// Evaluation of one model over one experiment span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub rmse: f64,
    pub max_abs_error: f64,
    /// Mean of (predicted - observed); positive means overprediction.
    pub mean_residual: f64,
    /// Half-width of the 95% confidence interval on the mean residual.
    pub ci95: f64,
    pub n_points: usize,
    /// First and last evaluated day, for span-compatibility checks.
    pub span: (usize, usize),
    pub counters: Counters,
    #[serde(default)]
    pub per_node_counters: Vec<Counters>,
}

/// Computes the error metrics for paired prediction/observation series.
pub fn evaluate(
    model: &str,
    predicted: &[f64],
    observed: &[f64],
    span: (usize, usize),
) -> Result<EvalReport, MetricsError> {
    if predicted.len() != observed.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            observed: observed.len(),
        });
    }
    let n = predicted.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints { needed: 2, got: n });
    }
    let residuals: Vec<f64> = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| p - o)
        .collect();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let max_abs = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
    let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    let ci95 = t_critical_95(n - 1) * s / (n as f64).sqrt();
    Ok(EvalReport {
        model: model.to_string(),
        rmse,
        max_abs_error: max_abs,
        mean_residual: mean,
        ci95,
        n_points: n,
        span,
        counters: Counters::default(),
        per_node_counters: Vec::new(),
    })
}

/// Operation cost of one MLR prediction with `terms` feature terms: one
/// multiply-accumulate per term.
pub fn mlr_prediction_ops(terms: usize) -> u64 {
    terms as u64
}

/// Operation cost of one EWMA update: two multiplies, one add.
pub const EWMA_UPDATE_OPS: u64 = 3;

/// Operation cost of one Persistence prediction: none.
pub const PERSISTENCE_OPS: u64 = 0;

/// Renders reports as an aligned text table with the four error columns.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>12} {:>14} {:>10} {:>8}\n",
        "Model", "RMSE", "Max Abs Err", "Mean Residual", "95% CI", "Points"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>12.4} {:>14.4} {:>10.4} {:>8}\n",
            r.model, r.rmse, r.max_abs_error, r.mean_residual, r.ci95, r.n_points
        ));
    }
    out
}
