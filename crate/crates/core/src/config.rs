//! `key = value` configuration with `#` comments.
//!
//! Keys are namespaced `slowae.*`, `rlt.*`, `controller.*` and `data.*`.
//! Unknown keys, duplicate keys and unparsable values are errors carrying the
//! offending line number.
//!
//! ```
//! let cfg: vdrl::config::Config = "
//!     ## toy run
//!     slowae.channels = 4
//!     controller.target_rate_hz = 20   # Hz
//! ".parse().unwrap();
//! assert_eq!(cfg.slowae.channels, 4);
//! ```

use std::collections::HashSet;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use crate::controller::ControllerState;
use crate::error::{Error, Result};
use crate::slowness::PenaltyKind;

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub sample_rate_hz: u32,
    /// Training window length.
    pub window_s: f64,
    /// Held-out clip length for evaluation and event extraction.
    pub clip_s: f64,
    pub num_classes: usize,
    /// Number of clips written by `gen-data` and used for evaluation.
    pub clips: usize,
    /// Regime change rate of class 0 and of the last class; classes in between interpolate.
    pub rate_min_hz: f64,
    pub rate_max_hz: f64,
    pub silence_min: f64,
    pub silence_max: f64,
    /// Additive noise inside active regimes, relative to the regime amplitude.
    pub noise_level: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 2000,
            window_s: 0.5,
            clip_s: 2.0,
            num_classes: 4,
            clips: 256,
            rate_min_hz: 1.0,
            rate_max_hz: 8.0,
            silence_min: 0.1,
            silence_max: 0.4,
            noise_level: 0.05,
        }
    }
}

/// Toy slow autoencoder architecture and training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowAeConfig {
    /// Strided encoder stages; the downsampling factor is `2^stages`.
    pub stages: usize,
    pub channels: usize,
    pub k: u32,
    /// Schmitt-trigger margin; `None` means `1/k`.
    pub margin: Option<f64>,
    pub encoder_width: usize,
    pub encoder_res_layers: usize,
    pub anti_causal: bool,
    pub decoder_width: usize,
    /// Gated blocks with dilations 1, 2, 4, ….
    pub decoder_layers: usize,
    pub skip_width: usize,
    pub mu: f64,
    pub penalty: PenaltyKind,
    pub unsquared_group_sum: bool,
    pub noise_sigma: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Fraction of `steps` after which the learning rate drops by `lr_drop`.
    pub lr_drop_at: f64,
    pub lr_drop: f64,
    pub clip_norm: f64,
    pub polyak: f64,
    /// Trailing window for logged means.
    pub log_window: usize,
}

impl Default for SlowAeConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            channels: 4,
            k: 7,
            margin: None,
            encoder_width: 16,
            encoder_res_layers: 3,
            anti_causal: true,
            decoder_width: 16,
            decoder_layers: 6,
            skip_width: 32,
            mu: 100.0,
            penalty: PenaltyKind::GroupSparse,
            unsquared_group_sum: false,
            noise_sigma: 0.01,
            batch: 4,
            steps: 2000,
            lr: 2e-3,
            lr_drop_at: 0.9,
            lr_drop: 3.0,
            clip_norm: 5.0,
            polyak: 0.9999,
            log_window: 100,
        }
    }
}

impl SlowAeConfig {
    pub fn downsample(&self) -> usize {
        1 << self.stages
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(1.0 / self.k as f64)
    }
}

/// Toy run-length transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct RltConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_mult: usize,
    pub length_hidden: usize,
    pub max_run_length: u32,
    pub offset_buckets: usize,
    /// Offset units per bucket.
    pub bucket_width: usize,
    /// Relative attention bias distances beyond this share one entry.
    pub rel_clip: usize,
    pub window_events: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub catch_all_prob: f64,
    pub nucleus_p: f64,
    pub channel_in: bool,
    pub offset_in: bool,
    pub channel_out: bool,
    pub offset_out: bool,
    pub absolute_position: bool,
    pub channel_position: bool,
}

impl Default for RltConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            ffn_mult: 4,
            length_hidden: 128,
            max_run_length: 256,
            offset_buckets: 512,
            bucket_width: 1,
            rel_clip: 64,
            window_events: 512,
            batch: 8,
            steps: 1000,
            lr: 1e-3,
            clip_norm: 1.0,
            catch_all_prob: 0.1,
            nucleus_p: 0.8,
            channel_in: true,
            offset_in: true,
            channel_out: true,
            offset_out: true,
            absolute_position: false,
            channel_position: false,
        }
    }
}

/// Rate controller settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub target_rate_hz: f64,
    pub lambda_init: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let s = ControllerState::new(20.0);
        Self {
            target_rate_hz: s.target_rate_hz,
            lambda_init: s.lambda,
            epsilon: s.epsilon,
            delta: s.delta,
            lambda_min: s.lambda_min,
            lambda_max: s.lambda_max,
        }
    }
}

impl ControllerConfig {
    pub fn state(&self) -> Result<ControllerState> {
        let s = ControllerState {
            lambda: self.lambda_init,
            target_rate_hz: self.target_rate_hz,
            epsilon: self.epsilon,
            delta: self.delta,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: DataConfig,
    pub slowae: SlowAeConfig,
    pub rlt: RltConfig,
    pub controller: ControllerConfig,
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {value:?}")),
    }
}

fn positive(v: f64) -> std::result::Result<f64, String> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn nonzero(v: usize) -> std::result::Result<usize, String> {
    if v == 0 {
        Err("must be at least 1".into())
    } else {
        Ok(v)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (ns, name) = key.split_once('.').ok_or_else(|| format!("key {key:?} has no namespace"))?;
        match ns {
            "data" => self.set_data(name, value),
            "slowae" => self.set_slowae(name, value),
            "rlt" => self.set_rlt(name, value),
            "controller" => self.set_controller(name, value),
            _ => Err(format!("unknown namespace {ns:?}")),
        }
    }

    fn set_data(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        match name {
            "sample_rate_hz" => d.sample_rate_hz = parse::<u32>(v).and_then(|r| nonzero(r as usize).map(|_| r))?,
            "window_s" => d.window_s = positive(parse(v)?)?,
            "clip_s" => d.clip_s = positive(parse(v)?)?,
            "num_classes" => d.num_classes = nonzero(parse(v)?)?,
            "clips" => d.clips = nonzero(parse(v)?)?,
            "rate_min_hz" => d.rate_min_hz = parse(v)?,
            "rate_max_hz" => d.rate_max_hz = parse(v)?,
            "silence_min" => d.silence_min = parse(v)?,
            "silence_max" => d.silence_max = parse(v)?,
            "noise_level" => d.noise_level = parse(v)?,
            _ => return Err(format!("unknown key data.{name}")),
        }
        Ok(())
    }

    fn set_slowae(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.slowae;
        match name {
            "stages" => s.stages = parse(v)?,
            "channels" => s.channels = nonzero(parse(v)?)?,
            "k" => s.k = parse::<u32>(v).and_then(|k| nonzero(k as usize).map(|_| k))?,
            "margin" => s.margin = Some(parse(v)?),
            "encoder_width" => s.encoder_width = nonzero(parse(v)?)?,
            "encoder_res_layers" => s.encoder_res_layers = parse(v)?,
            "anti_causal" => s.anti_causal = parse_bool(v)?,
            "decoder_width" => s.decoder_width = nonzero(parse(v)?)?,
            "decoder_layers" => s.decoder_layers = nonzero(parse(v)?)?,
            "skip_width" => s.skip_width = nonzero(parse(v)?)?,
            "mu" => s.mu = parse(v)?,
            "penalty" => s.penalty = parse(v)?,
            "unsquared_group_sum" => s.unsquared_group_sum = parse_bool(v)?,
            "noise_sigma" => s.noise_sigma = parse(v)?,
            "batch" => s.batch = nonzero(parse(v)?)?,
            "steps" => s.steps = nonzero(parse(v)?)?,
            "lr" => s.lr = positive(parse(v)?)?,
            "lr_drop_at" => s.lr_drop_at = parse(v)?,
            "lr_drop" => s.lr_drop = positive(parse(v)?)?,
            "clip_norm" => s.clip_norm = positive(parse(v)?)?,
            "polyak" => s.polyak = parse(v)?,
            "log_window" => s.log_window = nonzero(parse(v)?)?,
            _ => return Err(format!("unknown key slowae.{name}")),
        }
        Ok(())
    }

    fn set_rlt(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let r = &mut self.rlt;
        match name {
            "layers" => r.layers = parse(v)?,
            "heads" => r.heads = nonzero(parse(v)?)?,
            "width" => r.width = nonzero(parse(v)?)?,
            "ffn_mult" => r.ffn_mult = nonzero(parse(v)?)?,
            "length_hidden" => r.length_hidden = nonzero(parse(v)?)?,
            "max_run_length" => r.max_run_length = parse::<u32>(v).and_then(|m| nonzero(m as usize).map(|_| m))?,
            "offset_buckets" => r.offset_buckets = nonzero(parse(v)?)?,
            "bucket_width" => r.bucket_width = nonzero(parse(v)?)?,
            "rel_clip" => r.rel_clip = parse(v)?,
            "window_events" => r.window_events = nonzero(parse(v)?)?,
            "batch" => r.batch = nonzero(parse(v)?)?,
            "steps" => r.steps = nonzero(parse(v)?)?,
            "lr" => r.lr = positive(parse(v)?)?,
            "clip_norm" => r.clip_norm = positive(parse(v)?)?,
            "catch_all_prob" => r.catch_all_prob = parse(v)?,
            "nucleus_p" => r.nucleus_p = parse(v)?,
            "channel_in" => r.channel_in = parse_bool(v)?,
            "offset_in" => r.offset_in = parse_bool(v)?,
            "channel_out" => r.channel_out = parse_bool(v)?,
            "offset_out" => r.offset_out = parse_bool(v)?,
            "absolute_position" => r.absolute_position = parse_bool(v)?,
            "channel_position" => r.channel_position = parse_bool(v)?,
            _ => return Err(format!("unknown key rlt.{name}")),
        }
        if !r.width.is_multiple_of(r.heads) {
            return Err(format!("rlt.width {} is not divisible by rlt.heads {}", r.width, r.heads));
        }
        Ok(())
    }

    fn set_controller(&mut self, name: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.controller;
        match name {
            "target_rate_hz" => c.target_rate_hz = positive(parse(v)?)?,
            "lambda_init" => c.lambda_init = parse(v)?,
            "epsilon" => c.epsilon = parse(v)?,
            "delta" => c.delta = parse(v)?,
            "lambda_min" => c.lambda_min = parse(v)?,
            "lambda_max" => c.lambda_max = parse(v)?,
            _ => return Err(format!("unknown key controller.{name}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let s = &self.slowae;
        let r = &self.rlt;
        let c = &self.controller;
        let mut out: Vec<(&str, String)> = vec![
            ("data.sample_rate_hz", d.sample_rate_hz.to_string()),
            ("data.window_s", d.window_s.to_string()),
            ("data.clip_s", d.clip_s.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.clips", d.clips.to_string()),
            ("data.rate_min_hz", d.rate_min_hz.to_string()),
            ("data.rate_max_hz", d.rate_max_hz.to_string()),
            ("data.silence_min", d.silence_min.to_string()),
            ("data.silence_max", d.silence_max.to_string()),
            ("data.noise_level", d.noise_level.to_string()),
            ("slowae.stages", s.stages.to_string()),
            ("slowae.channels", s.channels.to_string()),
            ("slowae.k", s.k.to_string()),
        ];
        if let Some(m) = s.margin {
            out.push(("slowae.margin", m.to_string()));
        }
        out.extend([
            ("slowae.encoder_width", s.encoder_width.to_string()),
            ("slowae.encoder_res_layers", s.encoder_res_layers.to_string()),
            ("slowae.anti_causal", s.anti_causal.to_string()),
            ("slowae.decoder_width", s.decoder_width.to_string()),
            ("slowae.decoder_layers", s.decoder_layers.to_string()),
            ("slowae.skip_width", s.skip_width.to_string()),
            ("slowae.mu", s.mu.to_string()),
            ("slowae.penalty", s.penalty.name().to_string()),
            ("slowae.unsquared_group_sum", s.unsquared_group_sum.to_string()),
            ("slowae.noise_sigma", s.noise_sigma.to_string()),
            ("slowae.batch", s.batch.to_string()),
            ("slowae.steps", s.steps.to_string()),
            ("slowae.lr", s.lr.to_string()),
            ("slowae.lr_drop_at", s.lr_drop_at.to_string()),
            ("slowae.lr_drop", s.lr_drop.to_string()),
            ("slowae.clip_norm", s.clip_norm.to_string()),
            ("slowae.polyak", s.polyak.to_string()),
            ("slowae.log_window", s.log_window.to_string()),
            ("rlt.layers", r.layers.to_string()),
            ("rlt.heads", r.heads.to_string()),
            ("rlt.width", r.width.to_string()),
            ("rlt.ffn_mult", r.ffn_mult.to_string()),
            ("rlt.length_hidden", r.length_hidden.to_string()),
            ("rlt.max_run_length", r.max_run_length.to_string()),
            ("rlt.offset_buckets", r.offset_buckets.to_string()),
            ("rlt.bucket_width", r.bucket_width.to_string()),
            ("rlt.rel_clip", r.rel_clip.to_string()),
            ("rlt.window_events", r.window_events.to_string()),
            ("rlt.batch", r.batch.to_string()),
            ("rlt.steps", r.steps.to_string()),
            ("rlt.lr", r.lr.to_string()),
            ("rlt.clip_norm", r.clip_norm.to_string()),
            ("rlt.catch_all_prob", r.catch_all_prob.to_string()),
            ("rlt.nucleus_p", r.nucleus_p.to_string()),
            ("rlt.channel_in", r.channel_in.to_string()),
            ("rlt.offset_in", r.offset_in.to_string()),
            ("rlt.channel_out", r.channel_out.to_string()),
            ("rlt.offset_out", r.offset_out.to_string()),
            ("rlt.absolute_position", r.absolute_position.to_string()),
            ("rlt.channel_position", r.channel_position.to_string()),
            ("controller.target_rate_hz", c.target_rate_hz.to_string()),
            ("controller.lambda_init", c.lambda_init.to_string()),
            ("controller.epsilon", c.epsilon.to_string()),
            ("controller.delta", c.delta.to_string()),
            ("controller.lambda_min", c.lambda_min.to_string()),
            ("controller.lambda_max", c.lambda_max.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config { line, msg: "empty key or value".into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line, msg: format!("duplicate key {key}") });
            }
            cfg.set(key, value).map_err(|msg| Error::Config { line, msg })?;
        }
        Ok(cfg)
    }
}

impl Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
