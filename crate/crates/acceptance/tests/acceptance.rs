//! Acceptance suite. Each test prints one `PASS` or `FAIL` line.
//!
//! Criteria 6 to 8 share one SlowAE training run, trained once per process.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vdrl::codec::{infer_channels_offsets, interleaved_decode, interleaved_encode, DenseCodes};
use vdrl::config::{Config, RltConfig, SlowAeConfig};
use vdrl::controller::{ControllerState, LambdaStep};
use vdrl::gradcheck::{numeric_gradient, vector_relative_error, Stencil};
use vdrl::metrics::{bits_per_event, pcm_bit_rate, pearson, raw_code_bit_rate, spearman};
use vdrl::quantiser::{margin_gradient, margin_penalty, scalar_quantise, stq, QuantiserConfig};
use vdrl::rlt::{
    ablation_run, nucleus_truncate, toy_language, AblationPlan, EmbeddingConfig, Rlt, RltTrainer, SampleOptions, Window,
};
use vdrl::slowae::{gradient_check, Bottleneck, Prepared, SlowAe, StepRecord, Trainer};
use vdrl::slowness::{PenaltyKind, Slowness};
use vdrl::synth::{generate_synthetic, mix_seed, SynthConfig};
use vdrl::{EventSequence, Grid, Run, Tape64};

/// Writes straight to the stderr handle, which the test harness does not capture.
fn report(id: u32, name: &str, ok: bool, detail: String) {
    let line = format!("{} [{id}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_golden_worked_example() {
    let t = Instant::now();
    let p = infer_channels_offsets(&[3, 2, 6, 2, 3], 2).unwrap();
    let runs = [(2, 3), (0, 2), (1, 6), (3, 2), (4, 3)].map(|(v, l)| Run::new(v, l));
    let seq = EventSequence::new(runs.to_vec(), 2, 7, 256, 100).unwrap();
    let cols = interleaved_decode(&seq, usize::MAX).unwrap().levels().columns();
    let ok = p.channels == [0, 1, 1, 0, 0]
        && p.offsets == [0, 0, 2, 3, 5]
        && cols == [vec![2, 2, 2, 3, 3, 4, 4, 4], vec![0, 0, 1, 1, 1, 1, 1, 1]]
        && t.elapsed().as_secs_f64() < 1.0;
    report(
        1,
        "golden worked example",
        ok,
        format!("channels {:?} offsets {:?} decoded {:?} in {:?}", p.channels, p.offsets, cols, t.elapsed()),
    );
}

// ---------------------------------------------------------------- 2

/// Runs of random length, so short and capped runs both occur.
fn random_grid(rng: &mut ChaCha8Rng) -> DenseCodes {
    let (t, c, k) = (rng.random_range(1..=128usize), rng.random_range(1..=4usize), rng.random_range(1..=7u32));
    let stay: f64 = rng.random_range(0.0..0.98);
    let ki = k as i32;
    let columns: Vec<Vec<i32>> = (0..c)
        .map(|_| {
            let mut v = rng.random_range(-ki..=ki);
            (0..t)
                .map(|_| {
                    if rng.random::<f64>() > stay {
                        v = rng.random_range(-ki..=ki);
                    }
                    v
                })
                .collect()
        })
        .collect();
    DenseCodes::new(Grid::from_columns(&columns).unwrap(), k, 250).unwrap()
}

#[test]
fn c02_codec_round_trip() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for i in 0..1000 {
        let codes = random_grid(&mut rng);
        let max = if i % 2 == 0 { 3 } else { 256 };
        let events = interleaved_encode(&codes, usize::MAX, max).unwrap();
        if interleaved_decode(&events, usize::MAX).ok().as_ref() != Some(&codes) {
            failures += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(2, "codec round-trip", failures == 0 && secs < 10.0, format!("{failures}/1000 grids differ, {secs:.2} s"));
}

// ---------------------------------------------------------------- 3

fn random_walk(rng: &mut ChaCha8Rng) -> Grid<f64> {
    let (t, c) = (rng.random_range(1..=200usize), rng.random_range(1..=4usize));
    let sigma = rng.random_range(0.005..0.3);
    let step = Normal::new(0.0, sigma).unwrap();
    let columns: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut z = rng.random_range(-1.2..1.2);
            (0..t)
                .map(|_| {
                    z += step.sample(rng);
                    z
                })
                .collect()
        })
        .collect();
    Grid::from_columns(&columns).unwrap()
}

fn level_changes(q: &Grid<i32>) -> usize {
    (1..q.steps()).map(|t| q.row(t).iter().zip(q.row(t - 1)).filter(|(a, b)| a != b).count()).sum()
}

#[test]
fn c03_stq_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatched, mut more_changes) = (0, 0);
    let (mut stq_total, mut plain_total) = (0, 0);
    for i in 0..1000 {
        let z = random_walk(&mut rng);
        let k = rng.random_range(1..=7u32);
        let plain = scalar_quantise(&z, k).unwrap();
        // Every tenth margin sits exactly on the bound.
        let m = if i % 10 == 0 { 0.5 / k as f64 } else { rng.random_range(0.0..=0.5 / k as f64) };
        if stq(&z, &QuantiserConfig::new(k).with_margin(m)).unwrap() != plain {
            mismatched += 1;
        }
        let schmitt = stq(&z, &QuantiserConfig::new(k)).unwrap();
        let (a, b) = (level_changes(&schmitt), level_changes(&plain));
        stq_total += a;
        plain_total += b;
        if a > b {
            more_changes += 1;
        }
    }
    report(
        3,
        "STQ reduction",
        mismatched == 0 && more_changes == 0,
        format!(
            "m <= 1/(2k): {mismatched}/1000 differ from rounding; m = 1/k: {more_changes}/1000 walks gain changes ({stq_total} vs {plain_total} in total)"
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_controller_law() {
    let (eps, delta) = (1e-2, 1e-3);
    let target = 20.0;
    let fresh = |lambda: f64| {
        let mut s = ControllerState::new(target).with_lambda(lambda);
        s.epsilon = eps;
        s.delta = delta;
        s
    };
    let above = target * (1.0 + eps) * (1.0 + 1e-9);
    let below = target / (1.0 + eps) * (1.0 - 1e-9);
    let mut checks = Vec::new();
    let mut case = |name: &str, lambda: f64, rate: f64, step: LambdaStep, want: f64| {
        let mut s = fresh(lambda);
        let got = s.update(rate);
        checks.push((name.to_string(), got == step && s.lambda == want));
    };
    case("increase", 0.37, above, LambdaStep::Increase, 0.37 * (1.0 + delta));
    case("decrease", 0.37, below, LambdaStep::Decrease, 0.37 / (1.0 + delta));
    case("hold at target", 0.37, target, LambdaStep::Hold, 0.37);
    case("hold on upper edge", 0.37, target * (1.0 + eps), LambdaStep::Hold, 0.37);
    case("hold on lower edge", 0.37, target / (1.0 + eps), LambdaStep::Hold, 0.37);
    case("cap above", 1e8, above, LambdaStep::Increase, 1e8);
    case("cap above from inside", 0.9999e8, above, LambdaStep::Increase, 1e8);
    case("cap below", 1e-8, below, LambdaStep::Decrease, 1e-8);
    case("cap below from inside", 1.00001e-8, below, LambdaStep::Decrease, 1e-8);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    report(4, "controller law", failed.is_empty(), format!("{} cases, failed: {failed:?}", checks.len()));
}

// ---------------------------------------------------------------- 5

fn tiny_slowae() -> SlowAeConfig {
    SlowAeConfig {
        stages: 2,
        channels: 2,
        k: 3,
        encoder_width: 4,
        encoder_res_layers: 1,
        decoder_width: 4,
        decoder_layers: 2,
        skip_width: 4,
        ..SlowAeConfig::default()
    }
}

/// Initial weights plus small noise, so no ReLU input or code sits on a tie.
fn jittered(cfg: &SlowAeConfig, seed: u64) -> SlowAe<f64> {
    let mut m = SlowAe::<f64>::new(cfg, 2, 2000, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for t in m.params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    m
}

fn toy_batch(m: &SlowAe<f64>, seed: u64) -> Vec<Prepared<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2u64)
        .map(|i| {
            let s = generate_synthetic(seed * 31 + i, 0.032, 1).unwrap();
            m.prepare(&s.samples, i as usize % 2, 0.01, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn c05_gradient_fidelity() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let z: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let numeric = numeric_gradient(&z, 1e-6, margin_penalty);
        worst[0] = worst[0].max(vector_relative_error(&margin_gradient(&z), &numeric));
        for (i, kind) in [PenaltyKind::L2, PenaltyKind::L1, PenaltyKind::GroupSparse].into_iter().enumerate() {
            let s = Slowness::new(kind);
            let grid = Grid::new(16, 4, z.clone()).unwrap();
            let analytic = s.gradient(&grid).unwrap();
            let numeric = numeric_gradient(&z, 1e-6, |x| s.penalty(&Grid::new(16, 4, x.to_vec()).unwrap()).unwrap());
            worst[i + 1] = worst[i + 1].max(vector_relative_error(analytic.as_slice(), &numeric));
        }
    }
    let mut model_worst = 0.0f64;
    let (mut checked, mut excluded) = (0, 0);
    for seed in [6u64, 7, 8] {
        let m = jittered(&tiny_slowae(), seed);
        let b = toy_batch(&m, seed - 4);
        let r = gradient_check(&m, &b, 0.3, None, 1e-3, Stencil::FivePoint).unwrap();
        model_worst = model_worst.max(r.max_rel_err());
        checked += r.checked();
        excluded += r.excluded();
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = worst.iter().all(|&e| e < 1e-4) && model_worst < 1e-4 && checked > excluded && secs < 120.0;
    report(
        5,
        "gradient fidelity",
        ok,
        format!(
            "max rel err margin {:.1e}, L2 {:.1e}, L1 {:.1e}, GS {:.1e}; toy SlowAE {model_worst:.1e} over {checked} checked, {excluded} excluded; {secs:.1} s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

// ---------------------------------------------------------------- 6, 7, 8

const TRAIN_SEED: u64 = 7;
const TRAIN_STEPS: usize = 2000;

fn closed_loop_config() -> Config {
    let mut c = Config::default();
    c.slowae.penalty = PenaltyKind::GroupSparse;
    c.slowae.steps = TRAIN_STEPS;
    c.controller.target_rate_hz = 20.0;
    // λ starts at its default; 2000 steps need a larger step than 1e-3 to reach the target.
    c.controller.delta = 1e-2;
    c
}

struct Trained {
    log: Vec<StepRecord>,
    model: SlowAe<f32>,
    config: Config,
    secs: f64,
}

fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let config = closed_loop_config();
        let mut trainer = Trainer::<f32>::new(&config, TRAIN_SEED).unwrap();
        let log = trainer.run(TRAIN_STEPS, |_| {}).unwrap();
        Trained { log, model: trainer.model, config, secs: t.elapsed().as_secs_f64() }
    })
}

/// Mean per-batch AER over each run of `window` steps.
fn trailing_aer(log: &[StepRecord], window: usize) -> Vec<f64> {
    log.windows(window).map(|w| w.iter().map(|r| r.aer).sum::<f64>() / window as f64).collect()
}

#[test]
fn c06_closed_loop_rate_control() {
    let run = trained();
    let c = &run.config.controller;
    let lo = c.target_rate_hz / (1.0 + c.epsilon) / 1.1;
    let hi = c.target_rate_hz * (1.0 + c.epsilon) * 1.1;
    let window = run.config.slowae.log_window;
    let trailing = trailing_aer(&run.log, window);
    let last = *trailing.last().unwrap();
    // trailing[i] ends at step i + window - 1.
    let entry = trailing.iter().position(|&a| a >= lo && a <= hi).map(|i| i + window - 1);
    // +1, 0 or -1 per update.
    let signs: Vec<i8> = run.log.iter().map(|r| r.next_lambda.total_cmp(&r.terms.lambda) as i8).collect();
    let (pairs, reversals) = match entry {
        Some(e) => {
            let after = &signs[e..];
            let pairs = after.len().saturating_sub(1);
            (pairs, after.windows(2).filter(|w| w[0] * w[1] < 0).count())
        }
        None => (0, 0),
    };
    let steady = if pairs > 0 { 1.0 - reversals as f64 / pairs as f64 } else { 0.0 };
    let final_in_band = last >= lo && last <= hi;
    let ok = run.log.len() >= 2000 && entry.is_some() && final_in_band && steady >= 0.9 && run.secs < 1800.0;
    report(
        6,
        "closed-loop rate control",
        ok,
        format!(
            "band [{lo:.2}, {hi:.2}] Hz; entry at step {}; final trailing AER {last:.2} Hz; \
             sign kept on {:.1}% of {pairs} consecutive updates after entry; λ {:.3e} -> {:.3e}; {:.0} s",
            entry.map_or("never".to_string(), |e| e.to_string()),
            steady * 100.0,
            run.log[0].terms.lambda,
            run.log.last().unwrap().next_lambda,
            run.secs
        ),
    );
}

#[test]
fn training_nll_falls() {
    let run = trained();
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.terms.nll).sum::<f64>() / r.len() as f64;
    let window = run.config.slowae.log_window;
    let early = mean(&run.log[..window]);
    let late = mean(&run.log[run.log.len() - window..]);
    assert!(late < early, "trailing NLL {early} -> {late}");
}

/// Held-out clips, drawn from a stream the trainer never uses.
fn heldout_clips(config: &Config, count: u64) -> Vec<vdrl::synth::SyntheticSignal> {
    let synth = SynthConfig::from_data(&config.data);
    let n = config.data.num_classes as u64;
    (0..count)
        .map(|i| synth.generate(mix_seed(TRAIN_SEED, 7001, i), config.data.clip_s, (i % n) as usize).unwrap())
        .collect()
}

#[test]
fn c07_event_density_correlation() {
    let run = trained();
    let t = Instant::now();
    let clips = heldout_clips(&run.config, 256);
    let mut events = Vec::new();
    let mut truth = Vec::new();
    for clip in &clips {
        events.push(run.model.encode_to_events(&clip.samples).unwrap().len() as f64);
        truth.push(clip.change_points.len() as f64);
    }
    let rho = spearman(&events, &truth).unwrap();
    let r = pearson(&events, &truth).unwrap();
    let n = (run.config.data.clip_s * run.config.data.sample_rate_hz as f64) as usize;
    let silent = run.model.encode_to_events(&vec![0.0; n]).unwrap();
    let codes = n / run.model.downsample();
    let forced = run.model.config.channels * codes.div_ceil(silent.max_run_length() as usize);
    let mean_active = events.iter().sum::<f64>() / events.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    let ok = rho > 0.5
        && clips.len() >= 256
        && silent.len() <= forced
        && (silent.len() as f64) < mean_active
        && secs < 600.0;
    report(
        7,
        "event-density correlation",
        ok,
        format!(
            "Spearman {rho:.3}, Pearson {r:.3} over {} clips; silent clip {} events (forced {forced}) vs mean {mean_active:.1}; {secs:.0} s",
            clips.len(),
            silent.len()
        ),
    );
}

fn ablation_rlt() -> RltConfig {
    RltConfig {
        layers: 2,
        heads: 2,
        width: 32,
        ffn_mult: 2,
        length_hidden: 32,
        offset_buckets: 256,
        rel_clip: 32,
        window_events: 96,
        batch: 8,
        lr: 3e-3,
        ..RltConfig::default()
    }
}

#[test]
fn c08_embedding_ablation() {
    let run = trained();
    let t = Instant::now();
    let clips = heldout_clips(&run.config, ABLATION_CLIPS);
    let corpus: Vec<(EventSequence, usize)> =
        clips.iter().map(|c| (run.model.encode_to_events(&c.samples).unwrap(), c.class_id)).collect();
    let (train, holdout) = corpus.split_at(corpus.len() * 9 / 10);
    let reference = ablation_rlt();
    let mut without = reference.clone();
    EmbeddingConfig::of(&reference).without_channel_offset().apply(&mut without);
    let variants = vec![("reference".to_string(), reference), ("no_channel_offset".to_string(), without)];
    let plan = AblationPlan {
        k: run.model.config.k,
        num_channels: run.model.config.channels,
        num_classes: run.config.data.num_classes,
        steps: ABLATION_STEPS,
        eval_every: 0,
        seed: 8,
    };
    let curves = ablation_run(&variants, &plan, train, holdout).unwrap();
    let (a, b) = (curves[0].final_nll().unwrap(), curves[1].final_nll().unwrap());
    let secs = t.elapsed().as_secs_f64();
    report(
        8,
        "embedding ablation",
        a < b && secs < 3600.0,
        format!("holdout NLL per event: reference {a:.4}, without channel/offset embeddings {b:.4}; {secs:.0} s"),
    );
}

const ABLATION_CLIPS: u64 = 3200;
const ABLATION_STEPS: usize = 600;

// ---------------------------------------------------------------- 9

/// Every distribution over `n` outcomes whose probabilities are multiples of `1/w`.
fn lattice(n: usize, w: u32) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<u32>, n: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            fill(prefix, n, left - v, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::new(), n, w, &mut out);
    out.into_iter().map(|c| c.iter().map(|&v| v as f64 / w as f64).collect()).collect()
}

/// Smallest subset size reaching mass `p`, and the largest mass among subsets of that size.
fn brute_force_nucleus(probs: &[f64], p: f64) -> (usize, f64) {
    let n = probs.len();
    let mut best: Option<(usize, f64)> = None;
    for mask in 1u32..(1 << n) {
        let size = mask.count_ones() as usize;
        let mass: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| probs[i]).sum();
        if mass < p - 1e-9 {
            continue;
        }
        best = match best {
            Some((s, m)) if s < size || (s == size && m >= mass) => Some((s, m)),
            _ => Some((size, mass)),
        };
    }
    best.unwrap()
}

fn nucleus_agrees(probs: &[f64], p: f64) -> bool {
    let kept = nucleus_truncate(probs, p).unwrap();
    if p == 1.0 {
        return kept == probs;
    }
    let (size, mass) = brute_force_nucleus(probs, p);
    let support: Vec<usize> = (0..probs.len()).filter(|&i| kept[i] > 0.0).collect();
    let kept_mass: f64 = support.iter().map(|&i| probs[i]).sum();
    support.len() == size
        && (kept_mass - mass).abs() < 1e-12
        && support.iter().all(|&i| (kept[i] - probs[i] / kept_mass).abs() < 1e-12)
        && (kept.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

#[test]
fn c09_rlt_memorisation_and_nucleus() {
    let t = Instant::now();
    let cfg = RltConfig {
        layers: 2,
        heads: 2,
        width: 32,
        ffn_mult: 2,
        length_hidden: 32,
        offset_buckets: 128,
        rel_clip: 16,
        window_events: 48,
        batch: 4,
        lr: 3e-3,
        catch_all_prob: 0.0,
        ..RltConfig::default()
    };
    let seq = toy_language(2 * (cfg.window_events - 2)).unwrap();
    let corpus = vec![(seq.clone(), 0)];
    let mut trainer = RltTrainer::new(Rlt::<f32>::new(&cfg, 7, 2, 1, 9).unwrap(), 9);
    for _ in 0..400 {
        trainer.train_on(&corpus).unwrap();
    }
    let nll = trainer.model.evaluate(&[Window::whole(&seq, Some(0))]).unwrap();
    let (mut right, mut total) = (0, 0);
    for s in 0..100 {
        let opts = SampleOptions {
            num_events: seq.len(),
            nucleus_p: cfg.nucleus_p,
            seed: s,
            condition: Some(0),
            base_rate_hz: 100,
        };
        let sample = trainer.model.sample(None, &opts).unwrap();
        total += seq.len();
        right += sample.events.events().iter().zip(seq.events()).filter(|(a, b)| a == b).count();
    }
    let accuracy = right as f64 / total as f64;

    let mut distributions = 0;
    let mut disagreements = 0;
    let ps = [0.05, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.625, 0.8, 0.9, 0.95, 0.999, 1.0];
    for n in 1..=8 {
        for probs in lattice(n, 8) {
            distributions += 1;
            for &p in &ps {
                if !nucleus_agrees(&probs, p) {
                    disagreements += 1;
                }
            }
            // p at every exact partial sum of the sorted masses.
            let mut sorted = probs.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut acc = 0.0;
            for v in sorted.iter().take_while(|&&v| v > 0.0) {
                acc += v;
                if acc < 1.0 && !nucleus_agrees(&probs, acc) {
                    disagreements += 1;
                }
            }
        }
    }
    let ok = nll.value < 0.05 && nll.length < 0.05 && accuracy >= 0.99 && disagreements == 0;
    report(
        9,
        "RLT memorisation and nucleus",
        ok,
        format!(
            "value NLL {:.4}, length NLL {:.4}, sample accuracy {:.2}% over 100 samples; nucleus: {disagreements} disagreements over {distributions} distributions; {:.1} s",
            nll.value,
            nll.length,
            accuracy * 100.0,
            t.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_bit_rate_accounting() {
    let pcm16 = pcm_bit_rate(24_000.0, 16, 1);
    let pcm8 = pcm_bit_rate(24_000.0, 8, 1);
    let raw = raw_code_bit_rate(75.0, 7, 256);
    let per_event = bits_per_event(7, 256);
    let ok = pcm16 == 384_000.0
        && pcm8 == 192_000.0
        && (raw - 893.0).abs() / 893.0 < 0.01
        && per_event == 15f64.log2() + 8.0;
    report(
        10,
        "bit-rate accounting",
        ok,
        format!("{pcm16} bps, {pcm8} bps, raw codes {raw:.1} bps ({per_event:.4} bits per event)"),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn c11_untrained_entropy() {
    let cfg = RltConfig { window_events: 128, ..RltConfig::default() };
    let model = Rlt::<f32>::new(&cfg, 7, 4, 4, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let windows: Vec<Window> = (0..4)
        .map(|c| {
            let runs = (0..128).map(|_| Run::new(rng.random_range(-7..=7), rng.random_range(1..=256))).collect();
            Window::whole(&EventSequence::new(runs, 4, 7, 256, 250).unwrap(), Some(c))
        })
        .collect();
    let nll = model.evaluate(&windows).unwrap();

    let ae_cfg = SlowAeConfig::default();
    let ae = SlowAe::<f64>::new(&ae_cfg, 4, 2000, 11).unwrap();
    let batch: Vec<Prepared<f64>> = (0..4u64)
        .map(|i| {
            let s = generate_synthetic(40 + i, 0.5, i as usize).unwrap();
            ae.prepare(&s.samples, i as usize, 0.01, &mut rng).unwrap()
        })
        .collect();
    let mut tape = Tape64::new();
    let decoder_nll = ae.forward(&mut tape, &batch, 0.0, Bottleneck::Stq).unwrap().terms.nll;

    let (v0, l0) = (15f64.ln(), 256f64.ln());
    let ok = (nll.value - v0).abs() < 0.5 && (nll.length - l0).abs() < 0.5 && (decoder_nll - l0).abs() < 0.5;
    report(
        11,
        "untrained-model entropy",
        ok,
        format!(
            "RLT value {:.3} (ln 15 = {v0:.3}), length {:.3} (ln 256 = {l0:.3}); SlowAE decoder {decoder_nll:.3} nats/step",
            nll.value, nll.length
        ),
    );
}
