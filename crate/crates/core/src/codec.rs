//! Multi-channel run-length event codec.
//!
//! A [`DenseCodes`] grid holds integer quantisation levels on a regular time
//! grid. Each channel is run-length encoded into `(value, length)` runs, and the
//! per-channel run lists are interleaved into one [`EventSequence`] ordered by
//! start offset and then by channel index. Because the ordering is fixed, the
//! channel and offset of every event can be recovered from the lengths alone
//! ([`infer_channels_offsets`]), which is what lets a sequence model emit only
//! values and lengths.
//!
//! Channels are 0-indexed throughout.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Longest run a single event may describe before it is split.
pub const DEFAULT_MAX_RUN_LENGTH: u32 = 256;

/// Quantised multi-channel codes: integer levels in `[-k, k]` on a `steps × channels` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCodes {
    levels: Grid<i32>,
    k: u32,
    base_rate_hz: u32,
}

impl DenseCodes {
    pub fn new(levels: Grid<i32>, k: u32, base_rate_hz: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if base_rate_hz == 0 {
            return Err(Error::InvalidArgument("base rate must be positive".into()));
        }
        let bound = k as i32;
        if let Some(pos) = levels.as_slice().iter().position(|v| v.abs() > bound) {
            return Err(Error::OutOfRange(format!(
                "level {} at flat index {pos} outside [-{k}, {k}]",
                levels.as_slice()[pos]
            )));
        }
        Ok(Self { levels, k, base_rate_hz })
    }

    pub fn levels(&self) -> &Grid<i32> {
        &self.levels
    }

    pub fn steps(&self) -> usize {
        self.levels.steps()
    }

    pub fn channels(&self) -> usize {
        self.levels.channels()
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn base_rate_hz(&self) -> u32 {
        self.base_rate_hz
    }

    /// Represented duration in seconds.
    pub fn duration_s(&self) -> f64 {
        self.steps() as f64 / self.base_rate_hz as f64
    }

    /// Levels mapped back to `[-1, 1]` (`z' = level / k`).
    pub fn values(&self) -> Grid<f64> {
        let k = self.k as f64;
        self.levels.map(|l| l as f64 / k)
    }
}

/// One run-length event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Run {
    pub value: i32,
    pub length: u32,
}

impl Run {
    pub const PADDING: Run = Run { value: 0, length: 0 };

    pub fn new(value: i32, length: u32) -> Self {
        Self { value, length }
    }
}

/// A fixed-width run table for one channel. Unused slots hold `(0, 0)` and only
/// ever appear as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelRuns {
    pub values: Vec<i32>,
    pub lengths: Vec<u32>,
}

impl ChannelRuns {
    /// Packs `runs` into `slots` entries, cropping or zero-padding as needed.
    pub fn from_runs(runs: &[Run], slots: usize) -> Self {
        let mut values = vec![0; slots];
        let mut lengths = vec![0; slots];
        for (i, run) in runs.iter().take(slots).enumerate() {
            values[i] = run.value;
            lengths[i] = run.length;
        }
        Self { values, lengths }
    }

    /// The non-padding runs.
    pub fn runs(&self) -> impl Iterator<Item = Run> + '_ {
        self.values.iter().zip(&self.lengths).take_while(|(_, &l)| l > 0).map(|(&value, &length)| Run { value, length })
    }

    pub fn run_count(&self) -> usize {
        self.lengths.iter().take_while(|&&l| l > 0).count()
    }

    /// Number of dense steps covered by the non-padding runs.
    pub fn duration(&self) -> usize {
        self.runs().map(|r| r.length as usize).sum()
    }
}

/// Result of [`rle_encode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleEncoding {
    pub runs: ChannelRuns,
    /// Set when runs were dropped because they did not fit in `output_length` slots.
    pub truncated: bool,
}

/// Maximal constant segments of `seq`, with segments longer than
/// `max_run_length` split greedily into full-length chunks plus a remainder.
pub fn runs_of(seq: &[i32], max_run_length: u32) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut iter = seq.iter().copied();
    let Some(mut current) = iter.next() else {
        return runs;
    };
    let mut length = 1u32;
    for v in iter {
        if v == current && length < max_run_length {
            length += 1;
        } else {
            runs.push(Run::new(current, length));
            current = v;
            length = 1;
        }
    }
    runs.push(Run::new(current, length));
    runs
}

/// Merges adjacent equal-valued runs, then re-splits at `max_run_length`.
pub fn normalize_runs(runs: &[Run], max_run_length: u32) -> Vec<Run> {
    let mut merged: Vec<(i32, usize)> = Vec::new();
    for run in runs.iter().filter(|r| r.length > 0) {
        match merged.last_mut() {
            Some((v, len)) if *v == run.value => *len += run.length as usize,
            _ => merged.push((run.value, run.length as usize)),
        }
    }
    let max = max_run_length as usize;
    let mut out = Vec::new();
    for (value, mut len) in merged {
        while len > max {
            out.push(Run::new(value, max_run_length));
            len -= max;
        }
        out.push(Run::new(value, len as u32));
    }
    out
}

/// Run-length encodes one channel into `output_length` zero-padded slots.
pub fn rle_encode(channel: &[i32], output_length: usize, max_run_length: u32) -> Result<RleEncoding> {
    if channel.is_empty() {
        return Err(Error::Empty("cannot run-length encode an empty sequence"));
    }
    if output_length == 0 {
        return Err(Error::InvalidArgument("output_length must be positive".into()));
    }
    if max_run_length == 0 {
        return Err(Error::InvalidArgument("max_run_length must be positive".into()));
    }
    let runs = runs_of(channel, max_run_length);
    Ok(RleEncoding { truncated: runs.len() > output_length, runs: ChannelRuns::from_runs(&runs, output_length) })
}

/// Expands `(values, lengths)` into a dense sequence of exactly `output_length`
/// steps. Longer expansions are cropped; shorter ones repeat the final value.
pub fn rle_decode(values: &[i32], lengths: &[u32], output_length: usize) -> Result<Vec<i32>> {
    if values.len() != lengths.len() {
        return Err(Error::Shape(format!("{} values but {} lengths", values.len(), lengths.len())));
    }
    if output_length == 0 {
        return Err(Error::InvalidArgument("output_length must be positive".into()));
    }
    let used = lengths.iter().take_while(|&&l| l > 0).count();
    if lengths[used..].iter().any(|&l| l > 0) {
        return Err(Error::Format(format!("zero-length run at index {used} is followed by a non-empty run")));
    }
    if used == 0 {
        return Err(Error::Empty("no runs to decode"));
    }
    let mut out = Vec::with_capacity(output_length);
    for (&v, &l) in values[..used].iter().zip(&lengths[..used]) {
        let remaining = output_length - out.len();
        out.extend(std::iter::repeat_n(v, (l as usize).min(remaining)));
        if out.len() == output_length {
            return Ok(out);
        }
    }
    let last = values[used - 1];
    out.resize(output_length, last);
    Ok(out)
}

/// Exclusive prefix sum of run lengths: the start offset of every run.
pub fn lengths_to_offsets(lengths: &[u32]) -> Vec<usize> {
    lengths
        .iter()
        .scan(0usize, |acc, &l| {
            let start = *acc;
            *acc += l as usize;
            Some(start)
        })
        .collect()
}

/// Incremental channel/offset bookkeeping for an interleaved event stream.
///
/// The next event always belongs to the channel whose decoded position is
/// smallest, with ties going to the lowest channel index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelTracker {
    positions: Vec<usize>,
}

impl ChannelTracker {
    pub fn new(num_channels: usize) -> Self {
        assert!(num_channels > 0, "at least one channel");
        Self { positions: vec![0; num_channels] }
    }

    /// Channel and offset the next event will occupy.
    pub fn next_slot(&self) -> (usize, usize) {
        let mut best = 0;
        for (c, &p) in self.positions.iter().enumerate().skip(1) {
            if p < self.positions[best] {
                best = c;
            }
        }
        (best, self.positions[best])
    }

    /// Records an event of `length` and returns the `(channel, offset)` it was assigned.
    pub fn push(&mut self, length: u32) -> (usize, usize) {
        let (c, o) = self.next_slot();
        self.positions[c] += length as usize;
        (c, o)
    }

    /// Decoded duration of every channel so far.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Steps that every channel has fully decoded.
    pub fn complete_steps(&self) -> usize {
        self.positions.iter().copied().min().unwrap_or(0)
    }
}

/// Per-event channel indices and start offsets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Placement {
    pub channels: Vec<usize>,
    pub offsets: Vec<usize>,
}

/// Recovers the channel and offset of every event from its lengths alone.
pub fn infer_channels_offsets(lengths: &[u32], num_channels: usize) -> Result<Placement> {
    if num_channels == 0 {
        return Err(Error::InvalidArgument("num_channels must be positive".into()));
    }
    let mut tracker = ChannelTracker::new(num_channels);
    let (channels, offsets) = lengths.iter().map(|&l| tracker.push(l)).unzip();
    Ok(Placement { channels, offsets })
}

/// For each event, how many earlier events share its channel.
pub fn channel_event_indices(channels: &[usize], num_channels: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_channels];
    channels
        .iter()
        .map(|&c| {
            let slot = counts
                .get_mut(c)
                .ok_or_else(|| Error::OutOfRange(format!("channel {c} with only {num_channels} channels")))?;
            let index = *slot;
            *slot += 1;
            Ok(index)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InterleaveOptions {
    pub include_channels: bool,
    pub include_offsets: bool,
}

impl InterleaveOptions {
    pub const ALL: Self = Self { include_channels: true, include_offsets: true };
}

/// Output of [`interleave`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaved {
    pub events: Vec<Run>,
    pub channels: Option<Vec<usize>>,
    pub offsets: Option<Vec<usize>>,
    pub truncated: bool,
}

/// Merges per-channel runs into one stream sorted by `(start offset, channel)`,
/// cropped to `output_length` events.
pub fn interleave(
    per_channel: &[ChannelRuns],
    output_length: usize,
    options: InterleaveOptions,
) -> Result<Interleaved> {
    if per_channel.is_empty() {
        return Err(Error::Empty("interleave needs at least one channel"));
    }
    let durations: Vec<usize> = per_channel.iter().map(ChannelRuns::duration).collect();
    if durations.iter().any(|&d| d != durations[0]) {
        return Err(Error::MismatchedDurations(durations));
    }
    let mut tagged: Vec<(usize, usize, Run)> = Vec::new();
    for (c, runs) in per_channel.iter().enumerate() {
        let mut offset = 0usize;
        for run in runs.runs() {
            tagged.push((offset, c, run));
            offset += run.length as usize;
        }
    }
    tagged.sort_unstable_by_key(|&(o, c, _)| (o, c));
    let truncated = tagged.len() > output_length;
    tagged.truncate(output_length);
    Ok(Interleaved {
        events: tagged.iter().map(|t| t.2).collect(),
        channels: options.include_channels.then(|| tagged.iter().map(|t| t.1).collect()),
        offsets: options.include_offsets.then(|| tagged.iter().map(|t| t.0).collect()),
        truncated,
    })
}

/// Splits an interleaved stream back into per-channel run tables of
/// `output_length` slots each. A prefix of a full stream yields ragged channels.
pub fn deinterleave(events: &[Run], num_channels: usize, output_length: usize) -> Result<Vec<ChannelRuns>> {
    let lengths: Vec<u32> = events.iter().map(|e| e.length).collect();
    let placement = infer_channels_offsets(&lengths, num_channels)?;
    let mut per_channel: Vec<Vec<Run>> = vec![Vec::new(); num_channels];
    for (event, &c) in events.iter().zip(&placement.channels) {
        per_channel[c].push(*event);
    }
    Ok(per_channel.iter().map(|runs| ChannelRuns::from_runs(runs, output_length)).collect())
}

/// An interleaved run-length event stream plus the metadata needed to decode it.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Run>,
    num_channels: usize,
    k: u32,
    max_run_length: u32,
    base_rate_hz: u32,
    placement: Option<Placement>,
    truncated: bool,
}

impl EventSequence {
    /// Validates every event against the vocabulary (`|value| ≤ k`, `1 ≤ length ≤ max_run_length`).
    pub fn new(events: Vec<Run>, num_channels: usize, k: u32, max_run_length: u32, base_rate_hz: u32) -> Result<Self> {
        if num_channels == 0 || k == 0 || max_run_length == 0 || base_rate_hz == 0 {
            return Err(Error::InvalidArgument(
                "channels, k, max_run_length and base rate must all be positive".into(),
            ));
        }
        for (i, e) in events.iter().enumerate() {
            if e.value.unsigned_abs() > k {
                return Err(Error::OutOfRange(format!("event {i}: value {} outside ±{k}", e.value)));
            }
            if e.length == 0 || e.length > max_run_length {
                return Err(Error::OutOfRange(format!("event {i}: length {} outside 1..={max_run_length}", e.length)));
            }
        }
        Ok(Self { events, num_channels, k, max_run_length, base_rate_hz, placement: None, truncated: false })
    }

    /// Attaches a precomputed placement; it must agree with inference.
    pub fn with_placement(mut self, placement: Placement) -> Result<Self> {
        let inferred = infer_channels_offsets(&self.lengths(), self.num_channels)?;
        if inferred != placement {
            return Err(Error::Format("cached channels/offsets disagree with inference".into()));
        }
        self.placement = Some(placement);
        Ok(self)
    }

    pub fn events(&self) -> &[Run] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn max_run_length(&self) -> u32 {
        self.max_run_length
    }

    pub fn base_rate_hz(&self) -> u32 {
        self.base_rate_hz
    }

    /// Whether encoding dropped events to respect an output length.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn values(&self) -> Vec<i32> {
        self.events.iter().map(|e| e.value).collect()
    }

    pub fn lengths(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.length).collect()
    }

    /// Cached placement if present, otherwise inferred from the lengths.
    pub fn placement(&self) -> Cow<'_, Placement> {
        match &self.placement {
            Some(p) => Cow::Borrowed(p),
            None => Cow::Owned(
                infer_channels_offsets(&self.lengths(), self.num_channels)
                    .expect("num_channels validated at construction"),
            ),
        }
    }

    /// Decoded duration of each channel after all events.
    pub fn channel_durations(&self) -> Vec<usize> {
        let mut tracker = ChannelTracker::new(self.num_channels);
        for e in &self.events {
            tracker.push(e.length);
        }
        tracker.positions().to_vec()
    }

    /// Dense steps recoverable for every channel (the shortest channel).
    pub fn complete_steps(&self) -> usize {
        self.channel_durations().into_iter().min().unwrap_or(0)
    }

    /// Seconds of signal represented by the fully decodable prefix.
    pub fn duration_s(&self) -> f64 {
        self.complete_steps() as f64 / self.base_rate_hz as f64
    }

    /// A copy keeping only the first `n` events.
    pub fn prefix(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.events.truncate(n);
        if let Some(p) = &mut out.placement {
            p.channels.truncate(n);
            p.offsets.truncate(n);
        }
        out
    }
}

/// Encodes every channel of `dense` and interleaves the result into at most
/// `output_length` events. Channels and offsets are cached on the output.
pub fn interleaved_encode(dense: &DenseCodes, output_length: usize, max_run_length: u32) -> Result<EventSequence> {
    if max_run_length == 0 {
        return Err(Error::InvalidArgument("max_run_length must be positive".into()));
    }
    let per_channel: Vec<ChannelRuns> = dense
        .levels()
        .columns()
        .iter()
        .map(|col| {
            let runs = runs_of(col, max_run_length);
            let slots = runs.len();
            ChannelRuns::from_runs(&runs, slots)
        })
        .collect();
    let inter = interleave(&per_channel, output_length, InterleaveOptions::ALL)?;
    let mut seq = EventSequence::new(inter.events, dense.channels(), dense.k(), max_run_length, dense.base_rate_hz())?;
    seq.placement =
        Some(Placement { channels: inter.channels.unwrap_or_default(), offsets: inter.offsets.unwrap_or_default() });
    seq.truncated = inter.truncated;
    Ok(seq)
}

/// Decodes an event stream back to a dense grid.
///
/// The result has `min(output_length, shortest channel duration)` steps, so a
/// cropped stream decodes to its fully determined prefix.
pub fn interleaved_decode(events: &EventSequence, output_length: usize) -> Result<DenseCodes> {
    if output_length == 0 {
        return Err(Error::InvalidArgument("output_length must be positive".into()));
    }
    let per_channel = deinterleave(events.events(), events.num_channels(), events.len())?;
    let steps = per_channel.iter().map(ChannelRuns::duration).min().unwrap_or(0).min(output_length);
    if steps == 0 {
        return Err(Error::Empty("event sequence does not cover every channel"));
    }
    let columns =
        per_channel.iter().map(|runs| rle_decode(&runs.values, &runs.lengths, steps)).collect::<Result<Vec<_>>>()?;
    DenseCodes::new(Grid::from_columns(&columns)?, events.k(), events.base_rate_hz())
}
