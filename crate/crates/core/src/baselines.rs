//! Persistence and daily-adapted EWMA reference predictors.

use serde::{Deserialize, Serialize};

/// Default smoothing parameter for the EWMA baseline.
pub const DEFAULT_EWMA_ALPHA: f64 = 0.15;

/// Persistence predicts that nothing will change: the future value equals
/// the current value.
#[inline]
pub fn persistence_predict(x_t: f64) -> f64 {
    x_t
}

/// Exponentially weighted moving average over the daily history:
/// `b <- alpha * b + (1 - alpha) * x`, seeded with the first observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    pub alpha: f64,
    current: Option<f64>,
}

impl EwmaState {
    pub fn new(alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
        Self {
            alpha,
            current: None,
        }
    }

    pub fn initialized(&self) -> bool {
        self.current.is_some()
    }

    pub fn current(&self) -> Option<f64> {
        self.current
    }

    /// Consumes one observation and returns the updated prediction.
    pub fn update(&mut self, x_t: f64) -> f64 {
        let next = match self.current {
            None => x_t,
            Some(b) => self.alpha * b + (1.0 - self.alpha) * x_t,
        };
        self.current = Some(next);
        next
    }
}

impl Default for EwmaState {
    fn default() -> Self {
        Self::new(DEFAULT_EWMA_ALPHA)
    }
}

/// Hour-of-day EWMA for hourly re-binned comparisons: one independent
/// state per hour, matching the original hourly scheme.
#[derive(Debug, Clone)]
pub struct HourlyEwma {
    states: Vec<EwmaState>,
}

impl HourlyEwma {
    pub fn new(alpha: f64) -> Self {
        Self {
            states: vec![EwmaState::new(alpha); 24],
        }
    }

    pub fn update(&mut self, hour_of_day: usize, x_t: f64) -> f64 {
        self.states[hour_of_day % 24].update(x_t)
    }
}
