//! Toy slow autoencoder.
//!
//! Encoder: strided causal convolutions (kernel 4, stride 2, ReLU) followed by
//! dilated residual convolutions and a size-1 projection to `C` channels. With
//! `anti_causal` set the whole stack runs on the time-reversed signal, so code
//! `t` sees only samples `≥ D·t`.
//!
//! Bottleneck: Schmitt-trigger quantisation with a straight-through gradient.
//!
//! Decoder: a small WaveNet. The previous mu-law sample enters through a
//! kernel-2 causal convolution, then gated residual blocks with dilations
//! `1, 2, 4, …` receive the code-rate conditioning (size-1 projection of the
//! quantised codes plus a class embedding, ReLU) upsampled by repetition, and a
//! two-layer head produces 256 mu-law logits per sample.
//!
//! Loss per batch: mean NLL in nats per sample, plus `μ` times the margin
//! penalty and `λ` times the slowness penalty of each example, both averaged
//! over the batch.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::codec::{interleaved_decode, interleaved_encode, DenseCodes, EventSequence, DEFAULT_MAX_RUN_LENGTH};
use crate::config::{Config, SlowAeConfig};
use crate::controller::{estimate_batch_aer, ControllerState};
use crate::error::{Error, Result};
use crate::gradcheck::{check_parameters_with, GradCheckReport, Stencil};
use crate::grid::Grid;
use crate::nn::{clip_global_norm, Adam, Conv1d, Embedding, Linear, Polyak};
use crate::quantiser::{
    margin_gradient, margin_penalty, mu_law_decode, mu_law_encode_clamped, stq, QuantiserConfig, MU_LAW_CLASSES,
};
use crate::scalar::Scalar;
use crate::slowness::{PenaltyKind, Slowness};
use crate::synth::{mix_seed, SynthConfig, SyntheticSignal};

const STREAM_DATA: u64 = 1;
const STREAM_CLASS: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Mu-law code as a value in `[-1, 1]`.
#[inline]
fn code_to_unit(code: usize) -> f64 {
    code as f64 / 127.5 - 1.0
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv1d,
    cond: Linear,
    res: Linear,
    skip: Linear,
}

/// Model inputs for one clip, with decoder-side noise already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared<T> {
    /// Clean companded signal, `N × 1`.
    pub encoder_input: Tensor<T>,
    /// Noisy companded signal delayed by one sample, `N × 1`.
    pub decoder_input: Tensor<T>,
    /// Mu-law class of every noisy sample.
    pub targets: Vec<usize>,
    pub class_id: usize,
}

/// How the decoder sees the encoder output.
#[derive(Debug, Clone, Copy)]
pub enum Bottleneck<'a, T> {
    /// Schmitt-trigger quantisation, straight-through gradient.
    Stq,
    /// Quantiser removed.
    Identity,
    /// `z` plus a fixed per-example offset.
    Offset(&'a [Tensor<T>]),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    /// Nats per sample.
    pub nll: f64,
    pub margin: f64,
    pub slow: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.nll + self.mu * self.margin + self.lambda * self.slow
    }
}

pub struct ForwardOutput {
    pub loss: Var,
    pub terms: LossTerms,
    /// Continuous encoder output per example.
    pub z: Vec<Grid<f64>>,
    /// Quantised levels per example.
    pub levels: Vec<Grid<i32>>,
    pub logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SlowAe<T> {
    pub config: SlowAeConfig,
    pub num_classes: usize,
    pub sample_rate_hz: u32,
    pub params: ParamStore<T>,
    enc_down: Vec<Conv1d>,
    enc_res: Vec<Conv1d>,
    enc_out: Linear,
    dec_in: Conv1d,
    cond_in: Linear,
    class_emb: Embedding,
    blocks: Vec<Block>,
    head_hidden: Linear,
    head_out: Linear,
}

impl<T: Scalar> SlowAe<T> {
    pub fn new(config: &SlowAeConfig, num_classes: usize, sample_rate_hz: u32, seed: u64) -> Result<Self> {
        if num_classes == 0 || config.channels == 0 || config.k == 0 {
            return Err(Error::InvalidArgument("classes, channels and k must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (e, r, s) = (config.encoder_width, config.decoder_width, config.skip_width);
        let enc_down = (0..config.stages)
            .map(|i| Conv1d::new(&mut p, &mut rng, &format!("enc.down{i}"), if i == 0 { 1 } else { e }, e, 4, 2, 1))
            .collect();
        let enc_in_width = if config.stages == 0 { 1 } else { e };
        let enc_res = (0..config.encoder_res_layers)
            .map(|i| {
                let c_in = if i == 0 { enc_in_width } else { e };
                Conv1d::new(&mut p, &mut rng, &format!("enc.res{i}"), c_in, e, 2, 1, 1 << i)
            })
            .collect::<Vec<_>>();
        if config.stages == 0 && config.encoder_res_layers > 0 && e != 1 {
            return Err(Error::InvalidArgument("residual encoder layers need at least one strided stage".into()));
        }
        let enc_feat = if config.stages == 0 && config.encoder_res_layers == 0 { 1 } else { e };
        let enc_out = Linear::new(&mut p, &mut rng, "enc.out", enc_feat, config.channels, 0.5);
        let dec_in = Conv1d::new(&mut p, &mut rng, "dec.in", 1, r, 2, 1, 1);
        let cond_in = Linear::new(&mut p, &mut rng, "cond.in", config.channels, r, 1.0);
        let class_emb = Embedding::new(&mut p, &mut rng, "cond.class", num_classes, r, 0.1);
        let blocks = (0..config.decoder_layers)
            .map(|i| Block {
                conv: Conv1d::new(&mut p, &mut rng, &format!("dec.b{i}.conv"), r, 2 * r, 2, 1, 1 << i),
                cond: Linear::new(&mut p, &mut rng, &format!("dec.b{i}.cond"), r, 2 * r, 1.0),
                res: Linear::new(&mut p, &mut rng, &format!("dec.b{i}.res"), r, r, 0.5),
                skip: Linear::new(&mut p, &mut rng, &format!("dec.b{i}.skip"), r, s, 1.0),
            })
            .collect();
        let head_hidden = Linear::new(&mut p, &mut rng, "dec.head", s, s, 1.0);
        let head_out = Linear::new(&mut p, &mut rng, "dec.out", s, MU_LAW_CLASSES, 0.05);
        Ok(Self {
            config: config.clone(),
            num_classes,
            sample_rate_hz,
            params: p,
            enc_down,
            enc_res,
            enc_out,
            dec_in,
            cond_in,
            class_emb,
            blocks,
            head_hidden,
            head_out,
        })
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample()
    }

    pub fn code_rate_hz(&self) -> u32 {
        self.sample_rate_hz / self.downsample() as u32
    }

    pub fn quantiser(&self) -> QuantiserConfig {
        QuantiserConfig::new(self.config.k).with_margin(self.config.margin())
    }

    fn slowness(&self) -> Slowness {
        Slowness { kind: self.config.penalty, unsquared_group_sum: self.config.unsquared_group_sum }
    }

    /// Parameters on the encoder side of the bottleneck.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("enc.")).collect()
    }

    /// Conditioning stack and decoder parameters.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| !self.params.name(id).starts_with("enc.")).collect()
    }

    fn check_signal(&self, samples: &[f64], class_id: usize) -> Result<()> {
        let d = self.downsample();
        if samples.is_empty() || !samples.len().is_multiple_of(d) || samples.len() / d < 2 {
            return Err(Error::Shape(format!(
                "signal of {} samples is not a positive multiple of {d} covering two codes",
                samples.len()
            )));
        }
        if class_id >= self.num_classes {
            return Err(Error::OutOfRange(format!("class {class_id} of {}", self.num_classes)));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    /// Compands `samples`, draws decoder-side noise and builds the teacher-forcing inputs.
    pub fn prepare<R: Rng>(
        &self,
        samples: &[f64],
        class_id: usize,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<Prepared<T>> {
        self.check_signal(samples, class_id)?;
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let targets: Vec<usize> = samples
            .iter()
            .map(|&x| {
                let noisy = if noise_sigma > 0.0 { x + noise_sigma * noise.sample(rng) } else { x };
                mu_law_encode_clamped(noisy) as usize
            })
            .collect();
        Ok(self.prepared_from_targets(samples, targets, class_id))
    }

    fn prepared_from_targets(&self, samples: &[f64], targets: Vec<usize>, class_id: usize) -> Prepared<T> {
        let n = samples.len();
        let enc: Vec<T> = samples.iter().map(|&x| T::of(code_to_unit(mu_law_encode_clamped(x) as usize))).collect();
        let mut dec = vec![T::zero(); n];
        for i in 1..n {
            dec[i] = T::of(code_to_unit(targets[i - 1]));
        }
        Prepared { encoder_input: Tensor::new(n, 1, enc), decoder_input: Tensor::new(n, 1, dec), targets, class_id }
    }

    fn encoder_var(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let p = &self.params;
        let mut h = if self.config.anti_causal { tape.flip_rows(x) } else { x };
        for c in &self.enc_down {
            let y = c.forward(tape, p, h);
            h = tape.relu(y);
        }
        for c in &self.enc_res {
            let y = c.forward(tape, p, h);
            let y = tape.relu(y);
            h = if tape.shape(h) == tape.shape(y) { tape.add(h, y) } else { y };
        }
        let z = self.enc_out.forward(tape, p, h);
        if self.config.anti_causal {
            tape.flip_rows(z)
        } else {
            z
        }
    }

    fn conditioning_var(&self, tape: &mut Tape<T>, zq: Var, class_id: usize) -> Var {
        let c = self.cond_in.forward(tape, &self.params, zq);
        let e = self.class_emb.forward(tape, &self.params, &[class_id]);
        let c = tape.add_row(c, e);
        tape.relu(c)
    }

    fn decoder_var(&self, tape: &mut Tape<T>, prev: Var, cond: Var) -> Var {
        let p = &self.params;
        let r = self.config.decoder_width;
        let d = self.downsample();
        let mut h = self.dec_in.forward(tape, p, prev);
        let mut skip: Option<Var> = None;
        for b in &self.blocks {
            let a = b.conv.forward(tape, p, h);
            let cb = b.cond.forward(tape, p, cond);
            let cb = tape.repeat_rows(cb, d);
            let a = tape.add(a, cb);
            let f = tape.slice_cols(a, 0, r);
            let g = tape.slice_cols(a, r, r);
            let f = tape.tanh(f);
            let g = tape.sigmoid(g);
            let gated = tape.mul(f, g);
            let res = b.res.forward(tape, p, gated);
            h = tape.add(h, res);
            let s = b.skip.forward(tape, p, gated);
            skip = Some(match skip {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        let o = match skip {
            Some(s) => tape.relu(s),
            None => h,
        };
        let o = self.head_hidden.forward(tape, p, o);
        let o = tape.relu(o);
        self.head_out.forward(tape, p, o)
    }

    fn to_grid(tape: &Tape<T>, v: Var) -> Grid<f64> {
        let t = tape.value(v);
        Grid::new(t.rows, t.cols, t.data.iter().map(|x| x.f64()).collect()).expect("nonempty tensor")
    }

    /// Full training graph for `batch`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &[Prepared<T>],
        lambda: f64,
        bottleneck: Bottleneck<'_, T>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if let Bottleneck::Offset(o) = bottleneck {
            if o.len() != batch.len() {
                return Err(Error::Shape(format!("{} offsets for {} examples", o.len(), batch.len())));
            }
        }
        let b = batch.len() as f64;
        let mu = self.config.mu;
        let qcfg = self.quantiser();
        let slowness = self.slowness();
        let k = T::of_usize(self.config.k as usize);
        let mut terms = LossTerms { mu, lambda, ..Default::default() };
        let mut total: Option<Var> = None;
        let mut out_z = Vec::with_capacity(batch.len());
        let mut out_levels = Vec::with_capacity(batch.len());
        let mut out_logits = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let n = ex.encoder_input.rows;
            let d = self.downsample();
            if n % d != 0 || n / d < 2 || ex.decoder_input.rows != n || ex.targets.len() != n {
                return Err(Error::Shape(format!("example {i}: inconsistent lengths")));
            }
            if ex.class_id >= self.num_classes {
                return Err(Error::OutOfRange(format!("class {} of {}", ex.class_id, self.num_classes)));
            }
            let x = tape.constant(ex.encoder_input.clone());
            let z = self.encoder_var(tape, x);
            let zg = Self::to_grid(tape, z);
            let levels = stq(&zg, &qcfg)?;
            let zq = match bottleneck {
                Bottleneck::Stq => {
                    let (rows, cols) = tape.shape(z);
                    let q = Tensor::new(rows, cols, levels.as_slice().iter().map(|&l| T::of(l as f64) / k).collect());
                    tape.straight_through(z, q)
                }
                Bottleneck::Identity => z,
                Bottleneck::Offset(offsets) => {
                    let c = tape.constant(offsets[i].clone());
                    tape.add(z, c)
                }
            };
            let cond = self.conditioning_var(tape, zq, ex.class_id);
            let prev = tape.constant(ex.decoder_input.clone());
            let logits = self.decoder_var(tape, prev, cond);
            let w = vec![T::of(1.0 / (n as f64 * b)); n];
            let ce = tape.cross_entropy(logits, &ex.targets, &w);
            terms.nll += tape.value(ce).item().f64();
            let mut example = ce;

            let m = margin_penalty(zg.as_slice());
            terms.margin += m / b;
            if mu != 0.0 {
                let g = margin_gradient(zg.as_slice()).into_iter().map(|v| T::of(mu * v / b)).collect();
                let mv = tape.external(z, T::of(mu * m / b), g);
                example = tape.add(example, mv);
            }
            let s = slowness.penalty(&zg)?;
            terms.slow += s / b;
            if lambda != 0.0 {
                let g = slowness.gradient(&zg)?.into_vec().into_iter().map(|v| T::of(lambda * v / b)).collect();
                let sv = tape.external(z, T::of(lambda * s / b), g);
                example = tape.add(example, sv);
            }
            total = Some(match total {
                Some(acc) => tape.add(acc, example),
                None => example,
            });
            out_z.push(zg);
            out_levels.push(levels);
            out_logits.push(logits);
        }
        Ok(ForwardOutput {
            loss: total.expect("nonempty batch"),
            terms,
            z: out_z,
            levels: out_levels,
            logits: out_logits,
        })
    }

    /// Continuous encoder output for a clean signal.
    pub fn encode(&self, samples: &[f64]) -> Result<Grid<f64>> {
        self.check_signal(samples, 0)?;
        let mut tape = Tape::new();
        let enc: Vec<T> = samples.iter().map(|&x| T::of(code_to_unit(mu_law_encode_clamped(x) as usize))).collect();
        let x = tape.constant(Tensor::new(samples.len(), 1, enc));
        let z = self.encoder_var(&mut tape, x);
        Ok(Self::to_grid(&tape, z))
    }

    /// Quantised codes of a clean signal.
    pub fn encode_codes(&self, samples: &[f64]) -> Result<DenseCodes> {
        let z = self.encode(samples)?;
        DenseCodes::new(stq(&z, &self.quantiser())?, self.config.k, self.code_rate_hz())
    }

    /// Encoder, quantiser and interleaved run-length encoding.
    pub fn encode_to_events(&self, samples: &[f64]) -> Result<EventSequence> {
        let codes = self.encode_codes(samples)?;
        interleaved_encode(&codes, usize::MAX, DEFAULT_MAX_RUN_LENGTH)
    }

    fn check_codes(&self, codes: &DenseCodes, class_id: usize) -> Result<()> {
        if codes.k() != self.config.k || codes.channels() != self.config.channels {
            return Err(Error::InvalidArgument(format!(
                "codes have k = {}, C = {}; model expects k = {}, C = {}",
                codes.k(),
                codes.channels(),
                self.config.k,
                self.config.channels
            )));
        }
        if class_id >= self.num_classes {
            return Err(Error::OutOfRange(format!("class {class_id} of {}", self.num_classes)));
        }
        Ok(())
    }

    fn codes_tensor(&self, codes: &DenseCodes) -> Tensor<T> {
        let k = self.config.k as f64;
        let l = codes.levels();
        Tensor::new(l.steps(), l.channels(), l.as_slice().iter().map(|&v| T::of(v as f64 / k)).collect())
    }

    /// Teacher-forced decoder logits for a clean signal and given codes.
    pub fn decoder_logits(&self, samples: &[f64], codes: &DenseCodes, class_id: usize) -> Result<Tensor<T>> {
        self.check_signal(samples, class_id)?;
        self.check_codes(codes, class_id)?;
        if codes.steps() * self.downsample() != samples.len() {
            return Err(Error::Shape(format!("{} codes for {} samples", codes.steps(), samples.len())));
        }
        let targets = samples.iter().map(|&x| mu_law_encode_clamped(x) as usize).collect();
        let prepared = self.prepared_from_targets(samples, targets, class_id);
        let mut tape = Tape::new();
        let zq = tape.constant(self.codes_tensor(codes));
        let cond = self.conditioning_var(&mut tape, zq, class_id);
        let prev = tape.constant(prepared.decoder_input);
        let logits = self.decoder_var(&mut tape, prev, cond);
        Ok(tape.value(logits).clone())
    }

    /// Fraction of samples whose mu-law class is the decoder's argmax under
    /// teacher forcing, and the same fraction for the best constant guess.
    pub fn class_accuracy(&self, samples: &[f64], class_id: usize) -> Result<(f64, f64)> {
        let codes = self.encode_codes(samples)?;
        let logits = self.decoder_logits(samples, &codes, class_id)?;
        let targets: Vec<usize> = samples.iter().map(|&x| mu_law_encode_clamped(x) as usize).collect();
        let mut hits = 0;
        let mut counts = vec![0usize; MU_LAW_CLASSES];
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == t);
            counts[t] += 1;
        }
        let n = targets.len() as f64;
        Ok((hits as f64 / n, *counts.iter().max().unwrap_or(&0) as f64 / n))
    }

    /// Autoregressive reconstruction from codes. `seed = None` decodes greedily.
    pub fn reconstruct(&self, codes: &DenseCodes, class_id: usize, seed: Option<u64>) -> Result<Vec<f64>> {
        self.check_codes(codes, class_id)?;
        let mut stepper = DecoderStepper::new(self, codes, class_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let n = codes.steps() * self.downsample();
        let mut out = Vec::with_capacity(n);
        let mut prev = 0.0;
        let mut probs = vec![0.0; MU_LAW_CLASSES];
        for _ in 0..n {
            let logits = stepper.step(prev);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let class = if seed.is_none() {
                logits.iter().position(|&v| v == max).unwrap_or(0)
            } else {
                let mut total = 0.0;
                for (p, &l) in probs.iter_mut().zip(&logits) {
                    *p = (l - max).exp();
                    total += *p;
                }
                let mut u = rng.random::<f64>() * total;
                let mut pick = MU_LAW_CLASSES - 1;
                for (j, &p) in probs.iter().enumerate() {
                    if u < p {
                        pick = j;
                        break;
                    }
                    u -= p;
                }
                pick
            };
            out.push(mu_law_decode(class as u8));
            prev = code_to_unit(class);
        }
        Ok(out)
    }

    /// Decodes `events` to codes, then reconstructs.
    pub fn reconstruct_events(&self, events: &EventSequence, class_id: usize, seed: Option<u64>) -> Result<Vec<f64>> {
        if events.k() != self.config.k || events.num_channels() != self.config.channels {
            return Err(Error::InvalidArgument("event stream does not match the model's k or C".into()));
        }
        self.reconstruct(&interleaved_decode(events, usize::MAX)?, class_id, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(ModelKind::SlowAe, &self.params);
        ck.num_classes = self.num_classes as u32;
        ck.sample_rate_hz = self.sample_rate_hz;
        ck.config.slowae = self.config.clone();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::SlowAe {
            return Err(Error::Format("checkpoint does not hold a slow autoencoder".into()));
        }
        let mut model = Self::new(&ck.config.slowae, ck.num_classes as usize, ck.sample_rate_hz, ck.seed)?;
        ck.restore(&mut model.params)?;
        Ok(model)
    }
}

/// Sample-by-sample decoder evaluation, equal to the convolutional graph.
struct DecoderStepper {
    r: usize,
    s: usize,
    d: usize,
    dilations: Vec<usize>,
    dec_in_w: Vec<f64>,
    dec_in_b: Vec<f64>,
    conv_w: Vec<Vec<f64>>,
    conv_b: Vec<Vec<f64>>,
    cond: Vec<Grid<f64>>,
    res_w: Vec<Vec<f64>>,
    res_b: Vec<Vec<f64>>,
    skip_w: Vec<Vec<f64>>,
    skip_b: Vec<Vec<f64>>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
    inputs: Vec<f64>,
    /// `history[l]` holds the input of block `l` at every past step, row-major.
    history: Vec<Vec<f64>>,
}

fn dense<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> Vec<f64> {
    store.get(id).data.iter().map(|v| v.f64()).collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    out.copy_from_slice(b);
    let cols = b.len();
    for (i, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xv * wv;
        }
    }
}

impl DecoderStepper {
    fn new<T: Scalar>(m: &SlowAe<T>, codes: &DenseCodes, class_id: usize) -> Self {
        let mut tape = Tape::new();
        let zq = tape.constant(m.codes_tensor(codes));
        let cond = m.conditioning_var(&mut tape, zq, class_id);
        let cond = m
            .blocks
            .iter()
            .map(|b| {
                let v = b.cond.forward(&mut tape, &m.params, cond);
                SlowAe::<T>::to_grid(&tape, v)
            })
            .collect();
        let p = &m.params;
        Self {
            r: m.config.decoder_width,
            s: m.config.skip_width,
            d: m.downsample(),
            dilations: m.blocks.iter().map(|b| b.conv.dilation).collect(),
            dec_in_w: dense(p, m.dec_in.weight),
            dec_in_b: dense(p, m.dec_in.bias),
            conv_w: m.blocks.iter().map(|b| dense(p, b.conv.weight)).collect(),
            conv_b: m.blocks.iter().map(|b| dense(p, b.conv.bias)).collect(),
            cond,
            res_w: m.blocks.iter().map(|b| dense(p, b.res.weight)).collect(),
            res_b: m.blocks.iter().map(|b| dense(p, b.res.bias)).collect(),
            skip_w: m.blocks.iter().map(|b| dense(p, b.skip.weight)).collect(),
            skip_b: m.blocks.iter().map(|b| dense(p, b.skip.bias)).collect(),
            head_w: dense(p, m.head_hidden.weight),
            head_b: dense(p, m.head_hidden.bias),
            out_w: dense(p, m.head_out.weight),
            out_b: dense(p, m.head_out.bias),
            inputs: Vec::new(),
            history: vec![Vec::new(); m.blocks.len() + 1],
        }
    }

    /// Logits for the next sample given the previous decoder input value.
    fn step(&mut self, input: f64) -> Vec<f64> {
        let (r, s) = (self.r, self.s);
        let n = self.inputs.len();
        self.inputs.push(input);
        let before = if n >= 1 { self.inputs[n - 1] } else { 0.0 };
        let mut h = self.dec_in_b.clone();
        for (c, hv) in h.iter_mut().enumerate() {
            *hv += input * self.dec_in_w[c] + before * self.dec_in_w[r + c];
        }
        let mut skip = vec![0.0; s];
        let mut a = vec![0.0; 2 * r];
        let mut gated = vec![0.0; r];
        let mut tmp_r = vec![0.0; r];
        let mut tmp_s = vec![0.0; s];
        for l in 0..self.conv_w.len() {
            self.history[l].extend_from_slice(&h);
            let dil = self.dilations[l];
            let w = &self.conv_w[l];
            a.copy_from_slice(&self.conv_b[l]);
            let code = self.cond[l].row(n / self.d);
            for (o, &cv) in a.iter_mut().zip(code) {
                *o += cv;
            }
            for j in 0..2 {
                let Some(src) = n.checked_sub(j * dil) else { continue };
                let x = &self.history[l][src * r..(src + 1) * r];
                for (i, &xv) in x.iter().enumerate() {
                    let row = &w[(j * r + i) * 2 * r..(j * r + i + 1) * 2 * r];
                    for (o, &wv) in a.iter_mut().zip(row) {
                        *o += xv * wv;
                    }
                }
            }
            for c in 0..r {
                gated[c] = a[c].tanh() * (1.0 / (1.0 + (-a[r + c]).exp()));
            }
            affine(&gated, &self.res_w[l], &self.res_b[l], &mut tmp_r);
            for (hv, &d) in h.iter_mut().zip(&tmp_r) {
                *hv += d;
            }
            affine(&gated, &self.skip_w[l], &self.skip_b[l], &mut tmp_s);
            for (sv, &d) in skip.iter_mut().zip(&tmp_s) {
                *sv += d;
            }
        }
        let last = self.history.len() - 1;
        self.history[last].extend_from_slice(&h);
        let o: Vec<f64> = if self.conv_w.is_empty() { h } else { skip.iter().map(|v| v.max(0.0)).collect() };
        let mut hidden = vec![0.0; self.head_b.len()];
        affine(&o, &self.head_w, &self.head_b, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = vec![0.0; MU_LAW_CLASSES];
        affine(&hidden, &self.out_w, &self.out_b, &mut logits);
        logits
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub terms: LossTerms,
    /// Batch event rate measured at this step, events per second.
    pub aer: f64,
    /// `λ` after the controller update.
    pub next_lambda: f64,
    pub grad_norm: f64,
}

/// Header of the metrics CSV.
pub const METRICS_HEADER: &str = "step,nll,margin,slow,lambda,aer";

pub fn write_metrics_row<W: Write>(mut w: W, r: &StepRecord) -> Result<()> {
    writeln!(w, "{},{},{},{},{},{}", r.step, r.terms.nll, r.terms.margin, r.terms.slow, r.terms.lambda, r.aer)?;
    Ok(())
}

/// Training state: model, optimiser, parameter average and controller.
pub struct Trainer<T> {
    pub model: SlowAe<T>,
    pub adam: Adam<T>,
    pub polyak: Polyak<T>,
    pub controller: ControllerState,
    pub step: u64,
    pub seed: u64,
    pub config: Config,
    synth: SynthConfig,
    window: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        let model = SlowAe::new(&config.slowae, config.data.num_classes, config.data.sample_rate_hz, seed)?;
        let d = model.downsample();
        let window = ((config.data.window_s * config.data.sample_rate_hz as f64) as usize / d) * d;
        if window / d < 2 {
            return Err(Error::InvalidArgument(format!("window of {window} samples is shorter than two codes")));
        }
        Ok(Self {
            adam: Adam::new(&model.params, 0.9, 0.999),
            polyak: Polyak::new(&model.params, config.slowae.polyak),
            controller: config.controller.state()?,
            step: 0,
            seed,
            config: config.clone(),
            synth: SynthConfig::from_data(&config.data),
            window,
            model,
        })
    }

    pub fn window_samples(&self) -> usize {
        self.window
    }

    /// The training clips of `step`; a pure function of the seed.
    pub fn batch_signals(&self, step: u64) -> Result<Vec<SyntheticSignal>> {
        let b = self.config.slowae.batch as u64;
        let duration = self.window as f64 / self.config.data.sample_rate_hz as f64;
        (0..b)
            .map(|i| {
                let idx = step * b + i;
                let class = (mix_seed(self.seed, STREAM_CLASS, idx) % self.config.data.num_classes as u64) as usize;
                self.synth.generate(mix_seed(self.seed, STREAM_DATA, idx), duration, class)
            })
            .collect()
    }

    fn learning_rate(&self) -> f64 {
        let s = &self.config.slowae;
        if (self.step as f64) >= s.lr_drop_at * s.steps as f64 {
            s.lr / s.lr_drop
        } else {
            s.lr
        }
    }

    /// One optimisation step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let signals = self.batch_signals(self.step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, STREAM_NOISE, self.step));
        let batch = signals
            .iter()
            .map(|s| self.model.prepare(&s.samples, s.class_id, self.config.slowae.noise_sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let lambda = self.controller.lambda;
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, &batch, lambda, Bottleneck::Stq)?;
        let total = out.terms.total();
        if !total.is_finite() || !tape.value(out.loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{:?}", out.terms) });
        }
        let mut grads: Grads<T> = self.model.params.zeros_like();
        tape.backward(out.loss).accumulate(&tape, &mut grads);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: "non-finite gradient".into() });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.slowae.clip_norm);
        let lr = self.learning_rate();
        self.adam.update(&mut self.model.params, &grads, lr);
        self.polyak.update(&self.model.params);
        let rate = self.model.code_rate_hz();
        let codes = out
            .levels
            .into_iter()
            .map(|l| DenseCodes::new(l, self.model.config.k, rate))
            .collect::<Result<Vec<_>>>()?;
        let aer = estimate_batch_aer(&codes);
        self.controller.update(aer);
        let record =
            StepRecord { step: self.step, terms: out.terms, aer, next_lambda: self.controller.lambda, grad_norm };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` updates, calling `on_step` after each.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.train_step()?;
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }

    /// Model with Polyak-averaged parameters.
    pub fn averaged_model(&self) -> SlowAe<T> {
        let mut m = self.model.clone();
        m.params = self.polyak.averaged(&self.model.params);
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.checkpoint();
        ck.seed = self.seed;
        ck.step = self.step;
        ck.config = self.config.clone();
        ck.controller = self.controller;
        ck
    }
}

/// Analytic gradient of the total loss against central differences.
///
/// The analytic side uses the straight-through bottleneck. The numeric side
/// evaluates the loss with the quantiser replaced by `z + (q(z₀) − z₀)`, the
/// identity at the quantised value, which equals the true loss whenever the
/// perturbation leaves every level unchanged. Perturbations that change a
/// level, flip the sign of any ReLU input or move a code across `|z| = 1`
/// leave the smooth piece the analytic gradient describes and are counted as
/// excluded. Pass `ids = None` to check every parameter.
pub fn gradient_check(
    model: &SlowAe<f64>,
    batch: &[Prepared<f64>],
    lambda: f64,
    ids: Option<&[ParamId]>,
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    run_check(model, batch, lambda, ids, step, stencil, true)
}

/// Like [`gradient_check`] with the quantiser removed on both sides.
pub fn gradient_check_identity(
    model: &SlowAe<f64>,
    batch: &[Prepared<f64>],
    lambda: f64,
    ids: Option<&[ParamId]>,
    step: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    run_check(model, batch, lambda, ids, step, stencil, false)
}

fn run_check(
    model: &SlowAe<f64>,
    batch: &[Prepared<f64>],
    lambda: f64,
    ids: Option<&[ParamId]>,
    step: f64,
    stencil: Stencil,
    quantise: bool,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let analytic = if quantise { Bottleneck::Stq } else { Bottleneck::Identity };
    let base = model.forward(&mut tape, batch, lambda, analytic)?;
    let pattern = tape.relu_pattern();
    let mut grads = model.params.zeros_like();
    tape.backward(base.loss).accumulate(&tape, &mut grads);
    let k = model.config.k as f64;
    let offsets: Vec<Tensor<f64>> = base
        .z
        .iter()
        .zip(&base.levels)
        .map(|(z, l)| {
            let data = z.as_slice().iter().zip(l.as_slice()).map(|(&zv, &lv)| lv as f64 / k - zv).collect();
            Tensor::new(z.steps(), z.channels(), data)
        })
        .collect();
    let numeric = if quantise { Bottleneck::Offset(&offsets) } else { Bottleneck::Identity };
    let all: Vec<ParamId> = model.params.ids().collect();
    let ids = ids.unwrap_or(&all);
    let penalty = model.config.penalty;
    let kinks = penalty_kinks(&base.z, penalty);
    let mut probe = model.clone();
    Ok(check_parameters_with(&model.params, &grads, ids, step, stencil, |p| {
        probe.params = p.clone();
        let mut t = Tape::new();
        let out = probe.forward(&mut t, batch, lambda, numeric).ok()?;
        if (quantise && out.levels != base.levels)
            || t.relu_pattern() != pattern
            || penalty_kinks(&out.z, penalty) != kinks
        {
            return None;
        }
        Some(t.value(out.loss).item())
    }))
}

/// Which side of every penalty kink the codes sit on: `|z| > 1` for the
/// margin, and the sign of every step for L1.
fn penalty_kinks(z: &[Grid<f64>], penalty: PenaltyKind) -> Vec<i8> {
    let mut out = Vec::new();
    for g in z {
        out.extend(g.as_slice().iter().map(|v| i8::from(v.abs() > 1.0)));
        if penalty == PenaltyKind::L1 {
            let c = g.channels();
            let s = g.as_slice();
            out.extend((c..s.len()).map(|i| (s[i] - s[i - c]).signum() as i8));
        }
    }
    out
}
