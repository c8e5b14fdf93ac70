//! Event-rate estimation and the multiplicative slowness-weight controller.

use std::io::Write;

use crate::codec::DenseCodes;
use crate::error::{Error, Result};

/// Events in `codes` per second: one initial event per channel plus one per
/// change of level between consecutive steps, summed over channels.
pub fn estimate_aer(codes: &DenseCodes) -> f64 {
    event_count(codes) as f64 / codes.duration_s()
}

/// Mean rate over a batch; zero for an empty batch.
pub fn estimate_batch_aer(batch: &[DenseCodes]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(estimate_aer).sum::<f64>() / batch.len() as f64
}

/// Run count of `codes` with unbounded run length.
pub fn event_count(codes: &DenseCodes) -> usize {
    let levels = codes.levels();
    let changes = (1..levels.steps())
        .map(|t| levels.row(t).iter().zip(levels.row(t - 1)).filter(|(a, b)| a != b).count())
        .sum::<usize>();
    levels.channels() + changes
}

/// Direction of one controller update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaStep {
    Increase,
    Hold,
    Decrease,
}

impl LambdaStep {
    pub fn sign(self) -> i8 {
        match self {
            LambdaStep::Increase => 1,
            LambdaStep::Hold => 0,
            LambdaStep::Decrease => -1,
        }
    }
}

/// Adaptive slowness weight steering the event rate toward a target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    pub lambda: f64,
    pub target_rate_hz: f64,
    /// Relative tolerance around the target.
    pub epsilon: f64,
    /// Multiplicative step.
    pub delta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl ControllerState {
    pub const DEFAULT_LAMBDA: f64 = 1e-6;
    pub const DEFAULT_EPSILON: f64 = 1e-2;
    pub const DEFAULT_DELTA: f64 = 1e-3;
    pub const LAMBDA_MIN: f64 = 1e-8;
    pub const LAMBDA_MAX: f64 = 1e8;

    pub fn new(target_rate_hz: f64) -> Self {
        Self {
            lambda: Self::DEFAULT_LAMBDA,
            target_rate_hz,
            epsilon: Self::DEFAULT_EPSILON,
            delta: Self::DEFAULT_DELTA,
            lambda_min: Self::LAMBDA_MIN,
            lambda_max: Self::LAMBDA_MAX,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda.clamp(self.lambda_min, self.lambda_max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.target_rate_hz > 0.0
            && self.epsilon > 0.0
            && self.delta > 0.0
            && self.lambda_min > 0.0
            && self.lambda_min <= self.lambda_max
            && (self.lambda_min..=self.lambda_max).contains(&self.lambda);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent controller state {self:?}")))
        }
    }

    /// Rates inside `[R_T / (1 + ε), (1 + ε)·R_T]` leave λ unchanged.
    pub fn band(&self) -> (f64, f64) {
        (self.target_rate_hz / (1.0 + self.epsilon), self.target_rate_hz * (1.0 + self.epsilon))
    }

    /// One multiplicative update from a measured rate, then clamped to the caps.
    pub fn update(&mut self, measured_rate_hz: f64) -> LambdaStep {
        let (lo, hi) = self.band();
        let step = if measured_rate_hz > hi {
            self.lambda *= 1.0 + self.delta;
            LambdaStep::Increase
        } else if measured_rate_hz < lo {
            self.lambda /= 1.0 + self.delta;
            LambdaStep::Decrease
        } else {
            LambdaStep::Hold
        };
        self.lambda = self.lambda.clamp(self.lambda_min, self.lambda_max);
        step
    }
}

/// Functional form of [`ControllerState::update`].
pub fn update_lambda(state: ControllerState, measured_rate_hz: f64) -> ControllerState {
    let mut next = state;
    next.update(measured_rate_hz);
    next
}

/// Appends `step,lambda,aer` rows to a CSV sink.
pub struct TrajectoryLog<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "step,lambda,aer")?;
        Ok(Self { out })
    }

    pub fn record(&mut self, step: usize, lambda: f64, aer: f64) -> Result<()> {
        writeln!(self.out, "{step},{lambda:e},{aer}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
