//! Piecewise-stationary synthetic signals with known change points.
//!
//! A clip is split into regimes at `Poisson(rate · duration)` uniformly placed
//! boundaries. Each regime is either silent or a mix of one to three
//! sinusoids plus noise. Consecutive silent regimes merge, so the recorded
//! change points are exactly the boundaries where the generator switches to
//! something audibly different. The first change point is always 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::DataConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSignal {
    pub samples: Vec<f64>,
    /// Sorted, strictly increasing, starting at 0.
    pub change_points: Vec<usize>,
    pub class_id: usize,
    pub sample_rate_hz: u32,
}

impl SyntheticSignal {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Number of regimes.
    pub fn regime_count(&self) -> usize {
        self.change_points.len()
    }
}

/// Regime statistics of one source class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalClass {
    pub regime_rate_hz: f64,
    pub silence_prob: f64,
}

impl SignalClass {
    /// Expected number of regimes in a clip of `duration_s`.
    pub fn expected_regimes(&self, duration_s: f64) -> f64 {
        1.0 + self.regime_rate_hz * duration_s * (1.0 - self.silence_prob * self.silence_prob)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate_hz: u32,
    pub classes: Vec<SignalClass>,
    pub noise_level: f64,
}

impl SynthConfig {
    /// Classes interpolate linearly between the `min` and `max` settings of `data`.
    pub fn from_data(data: &DataConfig) -> Self {
        let n = data.num_classes.max(1);
        let lerp = |a: f64, b: f64, i: usize| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 };
        Self {
            sample_rate_hz: data.sample_rate_hz,
            classes: (0..n)
                .map(|i| SignalClass {
                    regime_rate_hz: lerp(data.rate_min_hz, data.rate_max_hz, i),
                    silence_prob: lerp(data.silence_max, data.silence_min, i),
                })
                .collect(),
            noise_level: data.noise_level,
        }
    }

    pub fn class(&self, class_id: usize) -> Result<SignalClass> {
        self.classes
            .get(class_id)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("class {class_id} of {}", self.classes.len())))
    }

    pub fn generate(&self, seed: u64, duration_s: f64, class_id: usize) -> Result<SyntheticSignal> {
        let class = self.class(class_id)?;
        let n = (duration_s * self.sample_rate_hz as f64).round() as usize;
        if duration_s.is_nan() || duration_s <= 0.0 || n == 0 {
            return Err(Error::InvalidArgument(format!("duration {duration_s} s holds no samples")));
        }
        if !(0.0..=1.0).contains(&class.silence_prob) || class.regime_rate_hz.is_nan() || class.regime_rate_hz < 0.0 {
            return Err(Error::InvalidArgument(format!("bad class parameters {class:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = class.regime_rate_hz * duration_s;
        let boundaries =
            if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize } else { 0 };
        let mut starts: Vec<usize> =
            (0..boundaries).map(|_| rng.random_range(1..n.max(2))).filter(|&b| b < n).collect();
        starts.push(0);
        starts.sort_unstable();
        starts.dedup();

        let rate = self.sample_rate_hz as f64;
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut samples = vec![0.0; n];
        let mut change_points = Vec::with_capacity(starts.len());
        let mut prev_silent = None;
        for (i, &start) in starts.iter().enumerate() {
            let end = starts.get(i + 1).copied().unwrap_or(n);
            let silent = rng.random::<f64>() < class.silence_prob;
            if !(silent && prev_silent == Some(true)) {
                change_points.push(start);
            }
            prev_silent = Some(silent);
            if silent {
                continue;
            }
            let amplitude = rng.random_range(0.2..0.7);
            let partials = rng.random_range(1..=3usize);
            let mut weights: Vec<f64> = (0..partials).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w *= amplitude / total);
            let tones: Vec<(f64, f64, f64)> = weights
                .into_iter()
                .map(|w| (w, rng.random_range(20.0..400.0), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            let sigma = self.noise_level * amplitude;
            for (t, s) in samples.iter_mut().enumerate().take(end).skip(start) {
                let time = t as f64 / rate;
                let tone: f64 = tones.iter().map(|&(w, f, p)| w * (std::f64::consts::TAU * f * time + p).sin()).sum();
                *s = (tone + sigma * noise.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
        Ok(SyntheticSignal { samples, change_points, class_id, sample_rate_hz: self.sample_rate_hz })
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::from_data(&DataConfig::default())
    }
}

/// Generates with the default toy classes.
pub fn generate_synthetic(seed: u64, duration_s: f64, class_id: usize) -> Result<SyntheticSignal> {
    SynthConfig::default().generate(seed, duration_s, class_id)
}

/// Derives an independent per-item seed from a run seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
