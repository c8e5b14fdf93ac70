//! Slowness penalties on the continuous encoder output and their gradients.
//!
//! With `Δ_{t,c} = z_{t+1,c} − z_{t,c}` and `N = (T − 1)·C`:
//!
//! * L2: `Σ Δ² / N`
//! * L1: `Σ |Δ| / N`
//! * group-sparse: `(Σ_t ‖Δ_t‖₂)² / N`, L1 over time and L2 across channels.
//!
//! Values and gradients are always accumulated in `f64`, whatever the model
//! precision, so that large or tiny penalty weights do not underflow.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PenaltyKind {
    L2,
    L1,
    #[default]
    GroupSparse,
}

impl PenaltyKind {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::L2 => "l2",
            PenaltyKind::L1 => "l1",
            PenaltyKind::GroupSparse => "gs",
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(PenaltyKind::L2),
            "l1" => Ok(PenaltyKind::L1),
            "gs" | "group_sparse" | "group-sparse" => Ok(PenaltyKind::GroupSparse),
            other => Err(Error::InvalidArgument(format!("unknown slowness penalty {other:?}"))),
        }
    }
}

/// Penalty selection plus the group-sparse scaling switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Slowness {
    pub kind: PenaltyKind,
    /// Drop the outer square of the group-sparse sum. Off by default.
    pub unsquared_group_sum: bool,
}

impl Slowness {
    pub fn new(kind: PenaltyKind) -> Self {
        Self { kind, unsquared_group_sum: false }
    }

    pub fn penalty<T: Scalar>(&self, z: &Grid<T>) -> Result<f64> {
        let (steps, channels) = check(z)?;
        let norm = ((steps - 1) * channels) as f64;
        let deltas = deltas(z);
        let value = match self.kind {
            PenaltyKind::L2 => deltas.iter().map(|d| d * d).sum::<f64>(),
            PenaltyKind::L1 => deltas.iter().map(|d| d.abs()).sum::<f64>(),
            PenaltyKind::GroupSparse => {
                let s: f64 = deltas.chunks(channels).map(group_norm).sum();
                if self.unsquared_group_sum {
                    s
                } else {
                    s * s
                }
            }
        };
        Ok(value / norm)
    }

    /// Gradient with respect to every entry of `z`. Where `|Δ|` or a group
    /// norm is exactly zero the subgradient 0 is used.
    pub fn gradient<T: Scalar>(&self, z: &Grid<T>) -> Result<Grid<f64>> {
        let (steps, channels) = check(z)?;
        let norm = ((steps - 1) * channels) as f64;
        let deltas = deltas(z);
        let d_delta: Vec<f64> = match self.kind {
            PenaltyKind::L2 => deltas.iter().map(|d| 2.0 * d / norm).collect(),
            PenaltyKind::L1 => deltas.iter().map(|&d| sign0(d) / norm).collect(),
            PenaltyKind::GroupSparse => {
                let norms: Vec<f64> = deltas.chunks(channels).map(group_norm).collect();
                let outer = if self.unsquared_group_sum { 1.0 / norm } else { 2.0 * norms.iter().sum::<f64>() / norm };
                deltas
                    .chunks(channels)
                    .zip(&norms)
                    .flat_map(|(group, &n)| group.iter().map(move |&d| if n > 0.0 { outer * d / n } else { 0.0 }))
                    .collect()
            }
        };
        let mut grad = vec![0.0; steps * channels];
        for (i, &g) in d_delta.iter().enumerate() {
            // Δ index i spans flat entries i (negative) and i + channels (positive).
            grad[i] -= g;
            grad[i + channels] += g;
        }
        Grid::new(steps, channels, grad)
    }
}

/// Slowness penalty of `z` with the default group-sparse scaling.
pub fn slowness_penalty<T: Scalar>(z: &Grid<T>, kind: PenaltyKind) -> Result<f64> {
    Slowness::new(kind).penalty(z)
}

pub fn slowness_gradient<T: Scalar>(z: &Grid<T>, kind: PenaltyKind) -> Result<Grid<f64>> {
    Slowness::new(kind).gradient(z)
}

fn check<T>(z: &Grid<T>) -> Result<(usize, usize)>
where
    T: Copy,
{
    if z.steps() < 2 {
        return Err(Error::InvalidArgument(format!("slowness needs at least two time steps, got {}", z.steps())));
    }
    Ok((z.steps(), z.channels()))
}

/// Row-major `(T − 1) × C` temporal differences.
fn deltas<T: Scalar>(z: &Grid<T>) -> Vec<f64> {
    let c = z.channels();
    let flat = z.as_slice();
    flat[c..].iter().zip(flat).map(|(next, prev)| next.f64() - prev.f64()).collect()
}

fn group_norm(group: &[f64]) -> f64 {
    group.iter().map(|d| d * d).sum::<f64>().sqrt()
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
