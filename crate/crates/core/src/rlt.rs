//! Toy run-length transformer over interleaved event streams.
//!
//! Row `0` of the input is a start row; row `n + 1` describes event `n`. Every
//! row is a sum of learned embeddings:
//!
//! ```text
//! row 0     = E_start + E_cout[c_0] + E_oout[o_0] + E_cond
//! row n + 1 = E_v[v_n] + E_l[l_n] + E_cin[c_n] + E_oin[o_n]
//!           + E_cout[c_{n+1}] + E_oout[o_{n+1}] + E_cond   (+ optional positions)
//! ```
//!
//! so the output at row `n` predicts event `n` already knowing which channel
//! and offset it will occupy. Channels and offsets come from the lengths alone
//! (see [`ChannelTracker`]); offsets are taken relative to the smallest channel
//! position at the start of the window and bucketed linearly.
//!
//! A pre-norm causal transformer with per-head learned relative biases feeds a
//! value head and a two-layer length head that also sees the embedding of the
//! value being predicted.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::codec::{ChannelTracker, EventSequence, Run};
use crate::config::RltConfig;
use crate::error::{Error, Result};
use crate::metrics::{bits_per_event, nll_bit_rate};
use crate::nn::{clip_global_norm, Adam, Embedding, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::synth::mix_seed;

const STREAM_WINDOWS: u64 = 11;
const STREAM_CATCH_ALL: u64 = 12;

/// Which position embeddings enter the input sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub channel_in: bool,
    pub offset_in: bool,
    pub channel_out: bool,
    pub offset_out: bool,
    pub absolute_position: bool,
    pub channel_position: bool,
    pub offset_buckets: usize,
    pub bucket_width: usize,
}

impl EmbeddingConfig {
    /// Channel and offset embeddings on, absolute positions off.
    pub fn reference(offset_buckets: usize) -> Self {
        Self {
            channel_in: true,
            offset_in: true,
            channel_out: true,
            offset_out: true,
            absolute_position: false,
            channel_position: false,
            offset_buckets,
            bucket_width: 1,
        }
    }

    pub fn of(cfg: &RltConfig) -> Self {
        Self {
            channel_in: cfg.channel_in,
            offset_in: cfg.offset_in,
            channel_out: cfg.channel_out,
            offset_out: cfg.offset_out,
            absolute_position: cfg.absolute_position,
            channel_position: cfg.channel_position,
            offset_buckets: cfg.offset_buckets,
            bucket_width: cfg.bucket_width,
        }
    }

    /// Writes the flags back into `cfg`.
    pub fn apply(&self, cfg: &mut RltConfig) {
        cfg.channel_in = self.channel_in;
        cfg.offset_in = self.offset_in;
        cfg.channel_out = self.channel_out;
        cfg.offset_out = self.offset_out;
        cfg.absolute_position = self.absolute_position;
        cfg.channel_position = self.channel_position;
        cfg.offset_buckets = self.offset_buckets;
        cfg.bucket_width = self.bucket_width;
    }

    pub fn is_reference(&self) -> bool {
        self.channel_in
            && self.offset_in
            && self.channel_out
            && self.offset_out
            && !self.absolute_position
            && !self.channel_position
    }

    pub fn without_channel_offset(mut self) -> Self {
        self.channel_in = false;
        self.offset_in = false;
        self.channel_out = false;
        self.offset_out = false;
        self
    }

    pub fn bucket(&self, offset: usize) -> usize {
        (offset / self.bucket_width.max(1)).min(self.offset_buckets - 1)
    }
}

/// A contiguous slice of an event stream, placed by [`ChannelTracker`].
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub events: Vec<Run>,
    pub channels: Vec<usize>,
    /// Window-relative start offsets.
    pub offsets: Vec<usize>,
    /// Channel and relative offset of the event after the last one.
    pub next: (usize, usize),
    /// `None` selects the catch-all condition.
    pub condition: Option<usize>,
    /// Per event: whether it contributes to the loss.
    pub mask: Vec<bool>,
}

impl Window {
    /// Places `events` after `before` on `num_channels` channels.
    pub fn build(before: &[Run], events: &[Run], num_channels: usize, condition: Option<usize>) -> Self {
        let mut tracker = ChannelTracker::new(num_channels);
        for e in before {
            tracker.push(e.length);
        }
        let base = tracker.complete_steps();
        let (mut channels, mut offsets) = (Vec::with_capacity(events.len()), Vec::with_capacity(events.len()));
        for e in events {
            let (c, o) = tracker.push(e.length);
            channels.push(c);
            offsets.push(o - base);
        }
        let (c, o) = tracker.next_slot();
        Self {
            events: events.to_vec(),
            channels,
            offsets,
            next: (c, o - base),
            condition,
            mask: vec![true; events.len()],
        }
    }

    /// Events `start..start + len` of `seq`.
    pub fn slice(seq: &EventSequence, start: usize, len: usize, condition: Option<usize>) -> Result<Self> {
        let events = seq.events();
        if start + len > events.len() {
            return Err(Error::OutOfRange(format!("window {start}..{} of {} events", start + len, events.len())));
        }
        Ok(Self::build(&events[..start], &events[start..start + len], seq.num_channels(), condition))
    }

    pub fn whole(seq: &EventSequence, condition: Option<usize>) -> Self {
        Self::build(&[], seq.events(), seq.num_channels(), condition)
    }

    /// Consecutive non-overlapping windows of at most `size` events.
    pub fn tile(seq: &EventSequence, size: usize, condition: Option<usize>) -> Vec<Self> {
        let n = seq.len();
        (0..n.div_ceil(size.max(1)))
            .map(|i| {
                let start = i * size;
                Self::build(
                    &seq.events()[..start],
                    &seq.events()[start..n.min(start + size)],
                    seq.num_channels(),
                    condition,
                )
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Table indices for every input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputIndices {
    /// `v + k`, per event.
    pub values: Vec<usize>,
    /// `l − 1`, per event.
    pub lengths: Vec<usize>,
    pub channels_in: Vec<usize>,
    pub offsets_in: Vec<usize>,
    /// Per row, so one longer than the event lists.
    pub channels_out: Vec<usize>,
    pub offsets_out: Vec<usize>,
    /// Earlier events on the same channel within the window.
    pub channel_positions: Vec<usize>,
    pub condition: usize,
}

/// Mean negative log-likelihoods in nats per event.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Nll {
    pub value: f64,
    pub length: f64,
    pub events: usize,
}

impl Nll {
    pub fn total(&self) -> f64 {
        self.value + self.length
    }
}

#[derive(Debug, Clone, Copy)]
struct Tables {
    start: Embedding,
    value: Embedding,
    length: Embedding,
    channel_in: Embedding,
    offset_in: Embedding,
    channel_out: Embedding,
    offset_out: Embedding,
    condition: Embedding,
    absolute: Embedding,
    channel_position: Embedding,
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    rel_bias: Vec<crate::autodiff::ParamId>,
    norm2: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Rlt<T> {
    pub config: RltConfig,
    pub embedding: EmbeddingConfig,
    pub k: u32,
    pub num_channels: usize,
    pub num_classes: usize,
    pub params: ParamStore<T>,
    tables: Tables,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
    value_head: Linear,
    length_hidden: Linear,
    length_out: Linear,
}

impl<T: Scalar> Rlt<T> {
    /// Every table is allocated whatever the flags, so configurations that
    /// differ only in flags start from identical weights.
    pub fn new(config: &RltConfig, k: u32, num_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if k == 0 || num_channels == 0 || config.max_run_length == 0 {
            return Err(Error::InvalidArgument("k, channels and max_run_length must be positive".into()));
        }
        if config.width == 0 || config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!("width {} and heads {}", config.width, config.heads)));
        }
        if config.offset_buckets == 0 || config.window_events == 0 {
            return Err(Error::InvalidArgument("offset buckets and window size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        let std = 0.1;
        let table =
            |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, n: usize| Embedding::new(p, rng, name, n, w, std);
        let tables = Tables {
            start: table(&mut p, &mut rng, "emb.start", 1),
            value: table(&mut p, &mut rng, "emb.value", 2 * k as usize + 1),
            length: table(&mut p, &mut rng, "emb.length", config.max_run_length as usize),
            channel_in: table(&mut p, &mut rng, "emb.cin", num_channels),
            offset_in: table(&mut p, &mut rng, "emb.oin", config.offset_buckets),
            channel_out: table(&mut p, &mut rng, "emb.cout", num_channels),
            offset_out: table(&mut p, &mut rng, "emb.oout", config.offset_buckets),
            condition: table(&mut p, &mut rng, "emb.cond", num_classes + 1),
            absolute: table(&mut p, &mut rng, "emb.abs", config.window_events + 1),
            channel_position: table(&mut p, &mut rng, "emb.chpos", config.window_events + 1),
        };
        let ffn = w * config.ffn_mult;
        let layers = (0..config.layers)
            .map(|l| Layer {
                norm1: LayerNorm::new(&mut p, &format!("l{l}.ln1"), w),
                query: Linear::new(&mut p, &mut rng, &format!("l{l}.q"), w, w, 1.0),
                key: Linear::new(&mut p, &mut rng, &format!("l{l}.k"), w, w, 1.0),
                value: Linear::new(&mut p, &mut rng, &format!("l{l}.v"), w, w, 1.0),
                proj: Linear::new(&mut p, &mut rng, &format!("l{l}.o"), w, w, 0.5),
                rel_bias: (0..config.heads)
                    .map(|h| p.add(format!("l{l}.rel{h}"), Tensor::zeros(1, config.rel_clip + 1)))
                    .collect(),
                norm2: LayerNorm::new(&mut p, &format!("l{l}.ln2"), w),
                ffn_in: Linear::new(&mut p, &mut rng, &format!("l{l}.ffn1"), w, ffn, 1.0),
                ffn_out: Linear::new(&mut p, &mut rng, &format!("l{l}.ffn2"), ffn, w, 0.5),
            })
            .collect();
        let final_norm = LayerNorm::new(&mut p, "ln_f", w);
        let values = 2 * k as usize + 1;
        let value_head = Linear::new(&mut p, &mut rng, "head.value", w, values, 0.1);
        let length_hidden = Linear::new(&mut p, &mut rng, "head.len1", 2 * w, config.length_hidden, 1.0);
        let length_out =
            Linear::new(&mut p, &mut rng, "head.len2", config.length_hidden, config.max_run_length as usize, 0.1);
        Ok(Self {
            config: config.clone(),
            embedding: EmbeddingConfig::of(config),
            k,
            num_channels,
            num_classes,
            params: p,
            tables,
            layers,
            final_norm,
            value_head,
            length_hidden,
            length_out,
        })
    }

    pub fn value_classes(&self) -> usize {
        2 * self.k as usize + 1
    }

    pub fn length_classes(&self) -> usize {
        self.config.max_run_length as usize
    }

    fn condition_index(&self, condition: Option<usize>) -> Result<usize> {
        match condition {
            None => Ok(self.num_classes),
            Some(c) if c < self.num_classes => Ok(c),
            Some(c) => Err(Error::OutOfRange(format!("condition {c} of {}", self.num_classes))),
        }
    }

    /// Embedding indices of `window`; out-of-vocabulary events are errors.
    pub fn input_indices(&self, window: &Window) -> Result<InputIndices> {
        let n = window.len();
        if window.channels.len() != n || window.offsets.len() != n || window.mask.len() != n {
            return Err(Error::Shape("window placement and mask must match its events".into()));
        }
        if n > self.config.window_events {
            return Err(Error::OutOfRange(format!("{n} events exceed the window of {}", self.config.window_events)));
        }
        let k = self.k as i64;
        let mut idx = InputIndices {
            values: Vec::with_capacity(n),
            lengths: Vec::with_capacity(n),
            channels_in: window.channels.clone(),
            offsets_in: window.offsets.iter().map(|&o| self.embedding.bucket(o)).collect(),
            channels_out: Vec::with_capacity(n + 1),
            offsets_out: Vec::with_capacity(n + 1),
            channel_positions: Vec::with_capacity(n),
            condition: self.condition_index(window.condition)?,
        };
        let mut per_channel = vec![0usize; self.num_channels];
        for (i, e) in window.events.iter().enumerate() {
            let v = e.value as i64;
            if v.abs() > k {
                return Err(Error::OutOfRange(format!("event {i}: value {v} outside ±{k}")));
            }
            if e.length == 0 || e.length > self.config.max_run_length {
                return Err(Error::OutOfRange(format!(
                    "event {i}: length {} outside 1..={}",
                    e.length, self.config.max_run_length
                )));
            }
            let c = window.channels[i];
            if c >= self.num_channels {
                return Err(Error::OutOfRange(format!("event {i}: channel {c} of {}", self.num_channels)));
            }
            idx.values.push((v + k) as usize);
            idx.lengths.push(e.length as usize - 1);
            idx.channel_positions.push(per_channel[c].min(self.config.window_events));
            per_channel[c] += 1;
        }
        idx.channels_out.extend(window.channels.iter().copied().chain([window.next.0]));
        idx.offsets_out.extend(window.offsets.iter().chain([&window.next.1]).map(|&o| self.embedding.bucket(o)));
        Ok(idx)
    }

    /// Input rows on `tape`: `N + 1` rows of width `config.width`.
    fn inputs_var(&self, tape: &mut Tape<T>, idx: &InputIndices) -> Var {
        let n = idx.values.len();
        let rows = n + 1;
        let w = self.config.width;
        let e = &self.embedding;
        let t = &self.tables;
        // Event-row terms, with a dummy index on the start row masked out below.
        let pad = |v: &[usize]| -> Vec<usize> { std::iter::once(0).chain(v.iter().copied()).collect() };
        let mut event_terms = vec![
            t.value.forward(tape, &self.params, &pad(&idx.values)),
            t.length.forward(tape, &self.params, &pad(&idx.lengths)),
        ];
        if e.channel_in {
            event_terms.push(t.channel_in.forward(tape, &self.params, &pad(&idx.channels_in)));
        }
        if e.offset_in {
            event_terms.push(t.offset_in.forward(tape, &self.params, &pad(&idx.offsets_in)));
        }
        if e.channel_position {
            event_terms.push(t.channel_position.forward(tape, &self.params, &pad(&idx.channel_positions)));
        }
        let mut events = event_terms[0];
        for &term in &event_terms[1..] {
            events = tape.add(events, term);
        }
        let mut is_event = vec![T::one(); rows * w];
        is_event[..w].iter_mut().for_each(|v| *v = T::zero());
        let mut is_start = vec![T::zero(); rows * w];
        is_start[..w].iter_mut().for_each(|v| *v = T::one());
        let event_mask = tape.constant(Tensor::new(rows, w, is_event));
        let start_mask = tape.constant(Tensor::new(rows, w, is_start));
        let events = tape.mul(events, event_mask);
        let start = t.start.forward(tape, &self.params, &vec![0; rows]);
        let start = tape.mul(start, start_mask);
        let mut x = tape.add(events, start);
        let cond = t.condition.forward(tape, &self.params, &vec![idx.condition; rows]);
        x = tape.add(x, cond);
        if e.channel_out {
            let v = t.channel_out.forward(tape, &self.params, &idx.channels_out);
            x = tape.add(x, v);
        }
        if e.offset_out {
            let v = t.offset_out.forward(tape, &self.params, &idx.offsets_out);
            x = tape.add(x, v);
        }
        if e.absolute_position {
            let pos: Vec<usize> = (0..rows).map(|i| i.min(self.config.window_events)).collect();
            let v = t.absolute.forward(tape, &self.params, &pos);
            x = tape.add(x, v);
        }
        x
    }

    /// The summed input vectors of `events`, start row first.
    pub fn assemble_inputs(&self, events: &EventSequence, condition: Option<usize>) -> Result<Tensor<T>> {
        self.check_stream(events)?;
        let idx = self.input_indices(&Window::whole(events, condition))?;
        let mut tape = Tape::new();
        let x = self.inputs_var(&mut tape, &idx);
        Ok(tape.value(x).clone())
    }

    fn check_stream(&self, events: &EventSequence) -> Result<()> {
        if events.k() != self.k || events.num_channels() != self.num_channels {
            return Err(Error::InvalidArgument(format!(
                "stream has k = {}, C = {}; model expects k = {}, C = {}",
                events.k(),
                events.num_channels(),
                self.k,
                self.num_channels
            )));
        }
        Ok(())
    }

    /// Transformer output, `N + 1` rows after the final layer norm.
    fn trunk(&self, tape: &mut Tape<T>, idx: &InputIndices) -> Var {
        let mut x = self.inputs_var(tape, idx);
        let heads = self.config.heads;
        let dh = self.config.width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for layer in &self.layers {
            let a = layer.norm1.forward(tape, &self.params, x);
            let q = layer.query.forward(tape, &self.params, a);
            let k = layer.key.forward(tape, &self.params, a);
            let v = layer.value.forward(tape, &self.params, a);
            let mut outs = Vec::with_capacity(heads);
            for (h, &bias) in layer.rel_bias.iter().enumerate() {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let table = tape.param(&self.params, bias);
                let attn = tape.causal_softmax(scores, Some((table, self.config.rel_clip)));
                outs.push(tape.matmul(attn, vh));
            }
            let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = layer.proj.forward(tape, &self.params, o);
            x = tape.add(x, o);
            let f = layer.norm2.forward(tape, &self.params, x);
            let f = layer.ffn_in.forward(tape, &self.params, f);
            let f = tape.relu(f);
            let f = layer.ffn_out.forward(tape, &self.params, f);
            x = tape.add(x, f);
        }
        self.final_norm.forward(tape, &self.params, x)
    }

    fn value_logits_var(&self, tape: &mut Tape<T>, h: Var) -> Var {
        self.value_head.forward(tape, &self.params, h)
    }

    /// Length logits for every row of `h`, given the value index each row predicts.
    fn length_logits_var(&self, tape: &mut Tape<T>, h: Var, next_values: &[usize]) -> Var {
        let v = self.tables.value.forward(tape, &self.params, next_values);
        let joined = tape.concat_cols(&[h, v]);
        let hidden = self.length_hidden.forward(tape, &self.params, joined);
        let hidden = tape.relu(hidden);
        self.length_out.forward(tape, &self.params, hidden)
    }

    /// Loss of a batch of windows on `tape`: summed value and length mean
    /// cross-entropies over unmasked events.
    pub fn loss(&self, tape: &mut Tape<T>, windows: &[Window]) -> Result<(Var, Nll)> {
        let count: usize = windows.iter().map(|w| w.mask.iter().filter(|&&m| m).count()).sum();
        if count == 0 {
            return Err(Error::Empty("no unmasked events in the batch"));
        }
        let weight = T::of(1.0 / count as f64);
        let mut total: Option<Var> = None;
        let mut nll = Nll { events: count, ..Nll::default() };
        for window in windows {
            let idx = self.input_indices(window)?;
            let n = window.len();
            let h = self.trunk(tape, &idx);
            let mut weights: Vec<T> = window.mask.iter().map(|&m| if m { weight } else { T::zero() }).collect();
            weights.push(T::zero());
            let mut value_targets = idx.values.clone();
            value_targets.push(0);
            let mut length_targets = idx.lengths.clone();
            length_targets.push(0);
            let vl = self.value_logits_var(tape, h);
            let ll = self.length_logits_var(tape, h, &value_targets);
            let v = tape.cross_entropy(vl, &value_targets, &weights);
            let l = tape.cross_entropy(ll, &length_targets, &weights);
            debug_assert_eq!(weights.len(), n + 1);
            nll.value += tape.value(v).item().f64();
            nll.length += tape.value(l).item().f64();
            let both = tape.add(v, l);
            total = Some(match total {
                Some(t) => tape.add(t, both),
                None => both,
            });
        }
        Ok((total.expect("nonempty batch"), nll))
    }

    /// Teacher-forced next-event distributions: row `i` of each result is the
    /// distribution of event `i` given events before it; the final row
    /// predicts the event after the window (its length row assumes value 0).
    pub fn distributions(&self, window: &Window) -> Result<(ProbRows, ProbRows)> {
        let idx = self.input_indices(window)?;
        let mut next = idx.values.clone();
        next.push(self.k as usize);
        let mut tape = Tape::new();
        let h = self.trunk(&mut tape, &idx);
        let vl = self.value_logits_var(&mut tape, h);
        let ll = self.length_logits_var(&mut tape, h, &next);
        let rows = |t: &Tensor<T>| (0..t.rows).map(|r| softmax(t.row(r))).collect();
        Ok((rows(tape.value(vl)), rows(tape.value(ll))))
    }

    /// Mean per-event NLL of `windows`, every event counted.
    pub fn evaluate(&self, windows: &[Window]) -> Result<Nll> {
        let mut sum = Nll::default();
        for w in windows.iter().filter(|w| !w.is_empty()) {
            let mut tape = Tape::new();
            let (_, nll) = self.loss(&mut tape, std::slice::from_ref(w))?;
            sum.value += nll.value * nll.events as f64;
            sum.length += nll.length * nll.events as f64;
            sum.events += nll.events;
        }
        if sum.events == 0 {
            return Err(Error::Empty("no events to evaluate"));
        }
        Ok(Nll { value: sum.value / sum.events as f64, length: sum.length / sum.events as f64, events: sum.events })
    }

    /// Autoregressive sampling after an optional prompt.
    pub fn sample(&self, prompt: Option<&EventSequence>, opts: &SampleOptions) -> Result<SampleTrace> {
        if !(opts.nucleus_p > 0.0 && opts.nucleus_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("nucleus p = {} outside (0, 1]", opts.nucleus_p)));
        }
        self.condition_index(opts.condition)?;
        let (mut events, rate) = match prompt {
            Some(p) => {
                self.check_stream(p)?;
                (p.events().to_vec(), p.base_rate_hz())
            }
            None => (Vec::new(), opts.base_rate_hz),
        };
        let prompt_len = events.len();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut tracker = ChannelTracker::new(self.num_channels);
        for e in &events {
            tracker.push(e.length);
        }
        let mut trace = SampleTrace {
            events: EventSequence::new(Vec::new(), self.num_channels, self.k, self.config.max_run_length, rate.max(1))?,
            value_probs: Vec::with_capacity(opts.num_events),
            length_probs: Vec::with_capacity(opts.num_events),
            slots: Vec::with_capacity(opts.num_events),
            prompt_len,
        };
        let context = self.config.window_events;
        for _ in 0..opts.num_events {
            let from = events.len().saturating_sub(context);
            let window = Window::build(&events[..from], &events[from..], self.num_channels, opts.condition);
            let idx = self.input_indices(&window)?;
            let last = idx.values.len();
            let mut tape = Tape::new();
            let h = self.trunk(&mut tape, &idx);
            let vl = self.value_logits_var(&mut tape, h);
            let value_probs = softmax(tape.value(vl).row(last));
            let v = draw(&nucleus_truncate(&value_probs, opts.nucleus_p)?, &mut rng);
            let mut next = idx.values.clone();
            next.push(v);
            let ll = self.length_logits_var(&mut tape, h, &next);
            let length_probs = softmax(tape.value(ll).row(last));
            let l = draw(&nucleus_truncate(&length_probs, opts.nucleus_p)?, &mut rng);
            let run = Run::new(v as i32 - self.k as i32, l as u32 + 1);
            trace.slots.push(tracker.push(run.length));
            trace.value_probs.push(value_probs);
            trace.length_probs.push(length_probs);
            events.push(run);
        }
        trace.events = EventSequence::new(events, self.num_channels, self.k, self.config.max_run_length, rate.max(1))?;
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(ModelKind::Rlt, &self.params);
        ck.num_classes = self.num_classes as u32;
        ck.config.rlt = self.config.clone();
        ck.config.slowae.k = self.k;
        ck.config.slowae.channels = self.num_channels;
        ck
    }

    /// Rebuilds a model saved by [`Rlt::checkpoint`]; `k` and `C` are read from the `slowae.*` keys.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Rlt {
            return Err(Error::Format("checkpoint does not hold a run-length transformer".into()));
        }
        let mut model =
            Self::new(&ck.config.rlt, ck.config.slowae.k, ck.config.slowae.channels, ck.num_classes as usize, ck.seed)?;
        ck.restore(&mut model.params)?;
        Ok(model)
    }
}

/// One probability vector per event.
pub type ProbRows = Vec<Vec<f64>>;

/// Sampling controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub num_events: usize,
    pub nucleus_p: f64,
    pub seed: u64,
    pub condition: Option<usize>,
    /// Rate stamped on the output when there is no prompt.
    pub base_rate_hz: u32,
}

/// A sampled stream plus the untruncated distributions each event was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// Prompt followed by the sampled events.
    pub events: EventSequence,
    pub value_probs: Vec<Vec<f64>>,
    pub length_probs: Vec<Vec<f64>>,
    /// Channel and absolute offset assigned to each sampled event.
    pub slots: Vec<(usize, usize)>,
    pub prompt_len: usize,
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

/// Keeps the smallest set of most probable entries holding at least `p` of
/// the mass (ties by lower index) and renormalises. Cumulative mass is
/// compared with a relative slack of `1e-12`, so `p` equal to an exact partial
/// sum is met despite rounding. `p = 1` returns the input untouched.
pub fn nucleus_truncate(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("nucleus p = {p} outside (0, 1]")));
    }
    if let Some(i) = probs.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("probability {i} is {}", probs[i])));
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("all probabilities are zero".into()));
    }
    if p == 1.0 {
        return Ok(probs.to_vec());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let goal = p * total * (1.0 - 1e-12);
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        if probs[i] == 0.0 {
            break;
        }
        out[i] = probs[i];
        mass += probs[i];
        if mass >= goal {
            break;
        }
    }
    out.iter_mut().for_each(|v| *v /= mass);
    Ok(out)
}

/// Event streams with their class ids.
pub type Corpus = [(EventSequence, usize)];

/// `count` windows of up to `size` events at uniform start positions.
pub fn random_windows<R: Rng>(corpus: &Corpus, count: usize, size: usize, rng: &mut R) -> Result<Vec<Window>> {
    let usable: Vec<&(EventSequence, usize)> = corpus.iter().filter(|(s, _)| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("corpus has no events"));
    }
    (0..count)
        .map(|_| {
            let (seq, class) = usable[rng.random_range(0..usable.len())];
            let len = seq.len().min(size);
            let start = rng.random_range(0..=seq.len() - len);
            Window::slice(seq, start, len, Some(*class))
        })
        .collect()
}

/// Every event of `corpus` in tiled windows of `size`.
pub fn holdout_windows(corpus: &Corpus, size: usize) -> Vec<Window> {
    corpus.iter().flat_map(|(s, c)| Window::tile(s, size, Some(*c))).collect()
}

/// Training state for a run-length transformer.
pub struct RltTrainer<T> {
    pub model: Rlt<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub seed: u64,
}

impl<T: Scalar> RltTrainer<T> {
    pub fn new(model: Rlt<T>, seed: u64) -> Self {
        Self { adam: Adam::new(&model.params, 0.9, 0.999), model, step: 0, seed }
    }

    /// One update on `windows`; each condition is replaced by the catch-all
    /// with probability `catch_all_prob`.
    pub fn train_step(&mut self, windows: &[Window]) -> Result<Nll> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_CATCH_ALL, self.step));
        let batch: Vec<Window> = windows
            .iter()
            .map(|w| {
                let mut w = w.clone();
                if rng.random::<f64>() < self.model.config.catch_all_prob {
                    w.condition = None;
                }
                w
            })
            .collect();
        let mut tape = Tape::new();
        let (loss, nll) = self.model.loss(&mut tape, &batch)?;
        if !nll.total().is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{nll:?}") });
        }
        let mut grads: Grads<T> = self.model.params.zeros_like();
        tape.backward(loss).accumulate(&tape, &mut grads);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: "non-finite gradient".into() });
        }
        clip_global_norm(&mut grads, self.model.config.clip_norm);
        self.adam.update(&mut self.model.params, &grads, self.model.config.lr);
        self.step += 1;
        Ok(nll)
    }

    /// One update on a batch drawn from `corpus`; the draw depends only on the seed and step.
    pub fn train_on(&mut self, corpus: &Corpus) -> Result<Nll> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_WINDOWS, self.step));
        let cfg = &self.model.config;
        let windows = random_windows(corpus, cfg.batch, cfg.window_events, &mut rng)?;
        self.train_step(&windows)
    }
}

/// Holdout NLL at one point of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub value_nll: f64,
    pub length_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

impl AblationCurve {
    pub fn final_nll(&self) -> Option<f64> {
        self.points.last().map(|p| p.value_nll + p.length_nll)
    }
}

/// Shared settings of an ablation.
#[derive(Debug, Clone, Copy)]
pub struct AblationPlan {
    pub k: u32,
    pub num_channels: usize,
    pub num_classes: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

/// Trains one model per variant from the same seed on the same batches and
/// records holdout NLL every `eval_every` steps and at the end.
pub fn ablation_run(
    variants: &[(String, RltConfig)],
    plan: &AblationPlan,
    train: &Corpus,
    holdout: &Corpus,
) -> Result<Vec<AblationCurve>> {
    variants
        .iter()
        .map(|(name, cfg)| {
            let model = Rlt::<f32>::new(cfg, plan.k, plan.num_channels, plan.num_classes, plan.seed)?;
            let eval_windows = holdout_windows(holdout, cfg.window_events);
            let mut trainer = RltTrainer::new(model, plan.seed);
            let mut points = Vec::new();
            let mut record = |t: &RltTrainer<f32>| -> Result<()> {
                let nll = t.model.evaluate(&eval_windows)?;
                points.push(CurvePoint { step: t.step, value_nll: nll.value, length_nll: nll.length });
                Ok(())
            };
            for s in 0..plan.steps {
                trainer.train_on(train)?;
                if plan.eval_every > 0 && (s + 1) % plan.eval_every == 0 && s + 1 < plan.steps {
                    record(&trainer)?;
                }
            }
            record(&trainer)?;
            Ok(AblationCurve { name: name.clone(), points })
        })
        .collect()
}

/// `variant,step,value_nll,length_nll` rows.
pub fn write_curves_csv<W: Write>(mut w: W, curves: &[AblationCurve]) -> Result<()> {
    writeln!(w, "variant,step,value_nll,length_nll")?;
    for c in curves {
        for p in &c.points {
            writeln!(w, "{},{},{},{}", c.name, p.step, p.value_nll, p.length_nll)?;
        }
    }
    Ok(())
}

/// Bit rates of a holdout set under a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBound {
    /// Total NLL in bits per second of signal.
    pub bits_per_s: f64,
    /// Events per second times bits per event.
    pub raw_bits_per_s: f64,
    pub events_per_s: f64,
    pub nll: Nll,
}

pub fn entropy_bound<T: Scalar>(model: &Rlt<T>, holdout: &Corpus) -> Result<EntropyBound> {
    let duration: f64 = holdout.iter().map(|(s, _)| s.duration_s()).sum();
    let nll = model.evaluate(&holdout_windows(holdout, model.config.window_events))?;
    let events_per_s = nll.events as f64 / duration;
    Ok(EntropyBound {
        bits_per_s: nll_bit_rate(nll.total() * nll.events as f64, duration)?,
        raw_bits_per_s: events_per_s * bits_per_event(model.k, model.config.max_run_length),
        events_per_s,
        nll,
    })
}

/// Every event of the toy language: channel 0 repeats runs `(2, 3), (5, 5)`
/// and channel 1 repeats `(−3, 2), (1, 6)`, interleaved, over `steps` code steps.
/// That is at most `steps / 2 + 2` events.
pub fn toy_language(steps: usize) -> Result<EventSequence> {
    use crate::codec::{interleaved_encode, DenseCodes};
    use crate::grid::Grid;
    let pattern = |runs: &[(i32, usize)]| -> Vec<i32> {
        runs.iter().flat_map(|&(v, l)| std::iter::repeat_n(v, l)).cycle().take(steps).collect()
    };
    let dense = Grid::from_columns(&[pattern(&[(2, 3), (5, 5)]), pattern(&[(-3, 2), (1, 6)])])?;
    interleaved_encode(&DenseCodes::new(dense, 7, 100)?, usize::MAX, 256)
}
