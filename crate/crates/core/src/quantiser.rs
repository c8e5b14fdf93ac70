//! Scalar and Schmitt-trigger quantisation, the range margin penalty and mu-law companding.
//!
//! Quantised values live on the grid `{-k, …, k} / k`; functions here return
//! the integer level `round(k·z)` and callers divide by `k` when they need the
//! real value. Rounding is half-away-from-zero on every platform.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantiserConfig {
    /// Half the number of levels; there are `2k + 1`.
    pub k: u32,
    /// Hysteresis margin in `z` units. `m ≤ 1/(2k)` is plain rounding.
    pub margin: f64,
}

impl QuantiserConfig {
    /// Schmitt-trigger defaults: `m = 1/k`.
    pub fn new(k: u32) -> Self {
        assert!(k > 0, "k must be positive");
        Self { k, margin: 1.0 / k as f64 }
    }

    pub fn with_margin(self, margin: f64) -> Self {
        assert!(margin >= 0.0, "margin must be nonnegative");
        Self { margin, ..self }
    }

    /// The largest margin that still reduces to memoryless rounding.
    pub fn memoryless(k: u32) -> Self {
        Self::new(k).with_margin(0.5 / k as f64)
    }

    pub fn levels(&self) -> usize {
        2 * self.k as usize + 1
    }
}

fn check_finite<T: Scalar>(z: &[T]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// `clip(round(k·z), -k, k)` as an integer level.
#[inline]
pub fn quantise_level(z: f64, k: u32) -> i32 {
    let k = k as f64;
    (z * k).round().clamp(-k, k) as i32
}

/// Memoryless quantisation of every entry.
pub fn scalar_quantise<T: Scalar>(z: &Grid<T>, k: u32) -> Result<Grid<i32>> {
    check_finite(z.as_slice())?;
    Ok(z.map(|v| quantise_level(v.f64(), k)))
}

/// Schmitt-trigger quantisation applied independently to every channel.
///
/// The first step is quantised without memory. Afterwards a channel keeps its
/// previous level while the input stays within `margin` of that level's value,
/// and otherwise re-rounds. Candidate levels are clipped to `[-k, k]`; the
/// comparison uses the unclipped input.
pub fn stq<T: Scalar>(z: &Grid<T>, cfg: &QuantiserConfig) -> Result<Grid<i32>> {
    check_finite(z.as_slice())?;
    let k = cfg.k as f64;
    let mut out = z.map(|v| quantise_level(v.f64(), cfg.k));
    for c in 0..z.channels() {
        let mut prev = out.get(0, c);
        for t in 1..z.steps() {
            let zt = z.get(t, c).f64();
            if (prev as f64 / k - zt).abs() > cfg.margin {
                prev = out.get(t, c);
            }
            out.set(t, c, prev);
        }
    }
    Ok(out)
}

/// `Σ max(|z| - 1, 0)²`, evaluated in double precision.
pub fn margin_penalty<T: Scalar>(z: &[T]) -> f64 {
    z.iter()
        .map(|v| {
            let excess = (v.f64().abs() - 1.0).max(0.0);
            excess * excess
        })
        .sum()
}

/// Analytic gradient of [`margin_penalty`]: `2·sign(z)·max(|z| - 1, 0)`.
pub fn margin_gradient<T: Scalar>(z: &[T]) -> Vec<f64> {
    z.iter()
        .map(|v| {
            let v = v.f64();
            2.0 * v.signum() * (v.abs() - 1.0).max(0.0)
        })
        .collect()
}

/// Companding constant for 8-bit mu-law.
pub const MU: f64 = 255.0;
/// Number of mu-law classes.
pub const MU_LAW_CLASSES: usize = 256;

/// Continuous mu-law compression of `x ∈ [-1, 1]`.
#[inline]
pub fn mu_law_compress(x: f64) -> f64 {
    x.signum() * (MU * x.abs()).ln_1p() / MU.ln_1p()
}

/// Inverse of [`mu_law_compress`].
#[inline]
pub fn mu_law_expand(y: f64) -> f64 {
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}

/// 8-bit mu-law code of `x`; the midpoint `x = 0` maps to 128.
pub fn mu_law_encode(x: f64) -> Result<u8> {
    if !x.is_finite() || x.abs() > 1.0 {
        return Err(Error::OutOfRange(format!("mu-law input {x} outside [-1, 1]")));
    }
    Ok(mu_law_encode_clamped(x))
}

/// Like [`mu_law_encode`] but saturates out-of-range input.
#[inline]
pub fn mu_law_encode_clamped(x: f64) -> u8 {
    let y = mu_law_compress(x.clamp(-1.0, 1.0));
    ((y + 1.0) / 2.0 * MU).round() as u8
}

/// Amplitude at the centre of mu-law bin `code`.
#[inline]
pub fn mu_law_decode(code: u8) -> f64 {
    mu_law_expand(code as f64 / MU * 2.0 - 1.0)
}
