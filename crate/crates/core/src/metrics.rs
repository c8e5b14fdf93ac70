//! Correlations, jump histograms, event barcodes and bit-rate accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{DenseCodes, EventSequence};
use crate::error::{Error, Result};

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    if let Some(i) = xs.iter().chain(ys).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i % xs.len()));
    }
    Ok(())
}

/// Product-moment correlation. Constant inputs are an error.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant vector is undefined".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation with average-rank ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// `(pearson, spearman)`.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    Ok((pearson(xs, ys)?, spearman(xs, ys)?))
}

/// Counts of nonzero level jumps; entry `i` counts jumps of size `i + 1`, up to `2k`.
pub fn jump_histogram(codes: &DenseCodes) -> Vec<u64> {
    let mut hist = vec![0u64; 2 * codes.k() as usize];
    let levels = codes.levels();
    for t in 1..levels.steps() {
        for (a, b) in levels.row(t).iter().zip(levels.row(t - 1)) {
            let jump = a.abs_diff(*b) as usize;
            if jump > 0 {
                hist[jump - 1] += 1;
            }
        }
    }
    hist
}

/// Events per time bin of width `bin_width_s`, by the start time of each event.
pub fn barcode(events: &EventSequence, bin_width_s: f64) -> Result<Vec<usize>> {
    if !bin_width_s.is_finite() || bin_width_s <= 0.0 {
        return Err(Error::InvalidArgument(format!("bin width {bin_width_s} must be positive")));
    }
    let rate = events.base_rate_hz() as f64;
    let placement = events.placement();
    let span = events.channel_durations().into_iter().max().unwrap_or(0) as f64 / rate;
    let mut bins = vec![0usize; ((span / bin_width_s).ceil() as usize).max(1)];
    for &offset in &placement.offsets {
        let bin = (offset as f64 / rate / bin_width_s).floor() as usize;
        if bin >= bins.len() {
            bins.resize(bin + 1, 0);
        }
        bins[bin] += 1;
    }
    Ok(bins)
}

/// Uncompressed PCM rate.
pub fn pcm_bit_rate(sample_rate_hz: f64, bits_per_sample: u32, channels: u32) -> f64 {
    sample_rate_hz * bits_per_sample as f64 * channels as f64
}

/// Bits needed to write one event naively: a value and a length symbol.
pub fn bits_per_event(k: u32, max_run_length: u32) -> f64 {
    ((2 * k + 1) as f64).log2() + (max_run_length as f64).log2()
}

/// Raw rate of an event stream at `events_per_s`.
pub fn raw_code_bit_rate(events_per_s: f64, k: u32, max_run_length: u32) -> f64 {
    events_per_s * bits_per_event(k, max_run_length)
}

/// A negative log-likelihood in nats spread over `duration_s` seconds, in bits per second.
pub fn nll_bit_rate(total_nll_nats: f64, duration_s: f64) -> Result<f64> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    Ok(total_nll_nats / std::f64::consts::LN_2 / duration_s)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Jumps of size 1, 2, … in level units.
    pub jump_histogram: Vec<u64>,
    /// Events per bin.
    pub event_density: Vec<usize>,
    pub bin_width_s: f64,
    pub bit_rates: BTreeMap<String, f64>,
    pub clips: usize,
    pub mean_event_rate_hz: f64,
}

impl MetricsReport {
    /// Adds `other`'s histogram to this one, growing it if needed.
    pub fn add_jumps(&mut self, hist: &[u64]) {
        if self.jump_histogram.len() < hist.len() {
            self.jump_histogram.resize(hist.len(), 0);
        }
        for (a, &b) in self.jump_histogram.iter_mut().zip(hist) {
            *a += b;
        }
    }

    /// `key,value` lines: scalars first, then `jump_<size>` and `density_<bin>` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out += &format!("pearson,{}\nspearman,{}\n", opt(self.pearson), opt(self.spearman));
        out += &format!(
            "clips,{}\nmean_event_rate_hz,{}\nbin_width_s,{}\n",
            self.clips, self.mean_event_rate_hz, self.bin_width_s
        );
        for (k, v) in &self.bit_rates {
            out += &format!("bps_{k},{v}\n");
        }
        for (i, c) in self.jump_histogram.iter().enumerate() {
            out += &format!("jump_{},{c}\n", i + 1);
        }
        for (i, c) in self.event_density.iter().enumerate() {
            out += &format!("density_{i},{c}\n");
        }
        out
    }
}
