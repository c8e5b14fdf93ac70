//! `vdrl`: synthetic data, slow autoencoder and run-length transformer from the command line.
//!
//! Failures print one JSON line on stderr, `{"error":<kind>,"code":<n>,"message":<text>}`,
//! and exit with `code`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vdrl::checkpoint::Checkpoint;
use vdrl::codec::{interleaved_decode, interleaved_encode, DEFAULT_MAX_RUN_LENGTH};
use vdrl::config::Config;
use vdrl::controller::TrajectoryLog;
use vdrl::format::{load_dense_csv, load_events, save_dense_csv, save_events};
use vdrl::gradcheck::{numeric_gradient, vector_relative_error, Stencil};
use vdrl::metrics::{barcode, correlation, jump_histogram, pcm_bit_rate, raw_code_bit_rate, MetricsReport};
use vdrl::quantiser::{margin_gradient, margin_penalty};
use vdrl::rlt::{
    ablation_run, entropy_bound, holdout_windows, toy_language, write_curves_csv, AblationPlan, EmbeddingConfig, Rlt,
    RltTrainer, SampleOptions,
};
use vdrl::slowae::{gradient_check, gradient_check_identity, write_metrics_row, SlowAe, Trainer, METRICS_HEADER};
use vdrl::slowness::{PenaltyKind, Slowness};
use vdrl::synth::{mix_seed, SynthConfig, SyntheticSignal};
use vdrl::{Error, EventSequence, Grid};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_CHECKPOINT_VERSION: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_INPUT: u8 = 6;
const EXIT_CHECK_FAILED: u8 = 7;

/// Seed stream for generated clips, kept apart from training streams.
const STREAM_CORPUS: u64 = 1001;
const STREAM_CORPUS_CLASS: u64 = 1002;

#[derive(Parser)]
#[command(name = "vdrl", version, about = "Variable-rate discrete representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Global seed for data, initialisation and noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of clips with known change points.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the slow autoencoder.
    TrainSlowae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Encode a corpus to event files with a trained autoencoder.
    ExtractEvents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus written by `gen-data`; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a run-length transformer on extracted events or the toy language.
    TrainRlt {
        #[command(flatten)]
        common: Common,
        /// Directory written by `extract-events`.
        #[arg(long, conflicts_with = "toy")]
        events: Option<PathBuf>,
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Also train the no channel/offset embedding variant and write both curves.
        #[arg(long)]
        ablation: bool,
        #[arg(long, default_value_t = 50)]
        eval_every: usize,
    },
    /// Sample an event stream from a trained transformer.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        num_events: usize,
        /// Nucleus mass; defaults to `rlt.nucleus_p`.
        #[arg(long)]
        p: Option<f64>,
        /// Class id; the catch-all condition when absent.
        #[arg(long)]
        condition: Option<usize>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Code rate stamped on unprompted output; defaults to the autoencoder code rate.
        #[arg(long)]
        rate: Option<u32>,
    },
    /// Dense level CSV to an event file.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Levels run from `-k` to `k`; defaults to `slowae.k`.
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        rate: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_MAX_RUN_LENGTH)]
        max_run_length: u32,
    },
    /// Event file to a dense level CSV.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Event statistics, correlations and bit rates of a trained autoencoder.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clips to evaluate; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Transformer checkpoint for an entropy bound on the extracted events.
        #[arg(long)]
        rlt: Option<PathBuf>,
        /// Barcode bin width in seconds.
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
    },
    /// Analytic against numeric gradients for the penalties and a small autoencoder.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl Into<String>) -> Self {
        Self { kind, code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Config { .. } => ("config", EXIT_CONFIG),
            Error::CheckpointVersion { .. } => ("checkpoint_version", EXIT_CHECKPOINT_VERSION),
            Error::Io(_) => ("io", EXIT_IO),
            Error::Format(_) | Error::Csv(_) => ("input", EXIT_INPUT),
            _ => ("failure", EXIT_FAILURE),
        };
        Failure::new(kind, code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new("input", EXIT_INPUT, e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail(Failure::new("usage", EXIT_USAGE, first));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = json!({ "error": f.kind, "code": f.code, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn setup(common: &Common) -> Outcome<Config> {
    let config = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    fs::create_dir_all(&common.out)?;
    Ok(config)
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::TrainSlowae { common, steps } => train_slowae(&common, steps),
        Command::ExtractEvents { common, checkpoint, data } => extract_events(&common, &checkpoint, data.as_deref()),
        Command::TrainRlt { common, events, toy, steps, ablation, eval_every } => {
            train_rlt(&common, events.as_deref(), toy, steps, ablation, eval_every)
        }
        Command::Sample { common, checkpoint, num_events, p, condition, prompt, rate } => {
            sample(&common, &checkpoint, num_events, p, condition, prompt.as_deref(), rate)
        }
        Command::Encode { common, input, k, rate, max_run_length } => encode(&common, &input, k, rate, max_run_length),
        Command::Decode { common, input } => decode(&common, &input),
        Command::Eval { common, checkpoint, data, rlt, bin_width } => {
            eval(&common, &checkpoint, data.as_deref(), rlt.as_deref(), bin_width)
        }
        Command::GradCheck { common, samples, step, tolerance } => grad_check(&common, samples, step, tolerance),
    }
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json(path: &Path) -> Outcome<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into())
}

fn code_rate(config: &Config) -> u32 {
    config.data.sample_rate_hz / config.slowae.downsample() as u32
}

// ---------------------------------------------------------------- corpus

/// The clips of a corpus, generated deterministically from the seed.
fn generate_corpus(config: &Config, seed: u64) -> Outcome<Vec<SyntheticSignal>> {
    let synth = SynthConfig::from_data(&config.data);
    let n = config.data.num_classes as u64;
    (0..config.data.clips as u64)
        .map(|i| {
            let class = (mix_seed(seed, STREAM_CORPUS_CLASS, i) % n) as usize;
            Ok(synth.generate(mix_seed(seed, STREAM_CORPUS, i), config.data.clip_s, class)?)
        })
        .collect()
}

fn clip_name(i: usize) -> String {
    format!("clip_{i:05}")
}

fn gen_data(common: &Common) -> Outcome {
    let config = setup(common)?;
    let clips = generate_corpus(&config, common.seed)?;
    let mut manifest = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let file = format!("{}.csv", clip_name(i));
        let mut text = String::from("sample\n");
        for v in &clip.samples {
            text += &format!("{v}\n");
        }
        fs::write(common.out.join(&file), text)?;
        manifest.push(json!({ "file": file, "class_id": clip.class_id, "change_points": clip.change_points }));
    }
    write_json(
        &common.out.join("corpus.json"),
        &json!({ "sample_rate_hz": config.data.sample_rate_hz, "seed": common.seed, "clips": manifest }),
    )
}

fn load_corpus(dir: &Path) -> Outcome<Vec<SyntheticSignal>> {
    let manifest = read_json(&dir.join("corpus.json"))?;
    let bad = |what: &str| Failure::new("input", EXIT_INPUT, format!("corpus.json: {what}"));
    let rate = manifest["sample_rate_hz"].as_u64().ok_or_else(|| bad("missing sample_rate_hz"))? as u32;
    let clips = manifest["clips"].as_array().ok_or_else(|| bad("missing clips"))?;
    clips
        .iter()
        .map(|c| {
            let file = c["file"].as_str().ok_or_else(|| bad("clip without file"))?;
            let class_id = c["class_id"].as_u64().ok_or_else(|| bad("clip without class_id"))? as usize;
            let change_points = c["change_points"]
                .as_array()
                .ok_or_else(|| bad("clip without change_points"))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(|| bad("bad change point")))
                .collect::<Outcome<Vec<_>>>()?;
            let text = fs::read_to_string(dir.join(file))?;
            let samples = text
                .lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.trim().parse::<f64>().map_err(|_| bad(&format!("{file}: bad sample {l:?}"))))
                .collect::<Outcome<Vec<_>>>()?;
            Ok(SyntheticSignal { samples, change_points, class_id, sample_rate_hz: rate })
        })
        .collect()
}

fn corpus(config: &Config, seed: u64, data: Option<&Path>) -> Outcome<Vec<SyntheticSignal>> {
    match data {
        Some(dir) => load_corpus(dir),
        None => generate_corpus(config, seed),
    }
}

/// Crops a clip to a whole number of code steps.
fn usable(samples: &[f64], downsample: usize) -> &[f64] {
    &samples[..samples.len() / downsample * downsample]
}

// ---------------------------------------------------------------- slow autoencoder

fn train_slowae(common: &Common, steps: Option<usize>) -> Outcome {
    let mut config = setup(common)?;
    if let Some(s) = steps {
        config.slowae.steps = s;
    }
    let mut trainer = Trainer::<f32>::new(&config, common.seed)?;
    let mut metrics = format!("{METRICS_HEADER}\n").into_bytes();
    let mut trajectory = TrajectoryLog::new(Vec::new())?;
    let mut failure = None;
    trainer.run(config.slowae.steps, |r| {
        if failure.is_none() {
            if let Err(e) = write_metrics_row(&mut metrics, r)
                .and_then(|_| trajectory.record(r.step as usize, r.terms.lambda, r.aer))
            {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    fs::write(common.out.join("metrics.csv"), metrics)?;
    fs::write(common.out.join("controller.csv"), trajectory.into_inner())?;
    trainer.checkpoint().save(common.out.join("slowae.ck"))?;
    Ok(())
}

fn load_slowae(path: &Path) -> Outcome<SlowAe<f32>> {
    Ok(SlowAe::<f32>::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn extract_events(common: &Common, checkpoint: &Path, data: Option<&Path>) -> Outcome {
    let config = setup(common)?;
    let model = load_slowae(checkpoint)?;
    let clips = corpus(&config, common.seed, data)?;
    let mut manifest = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let events = model.encode_to_events(usable(&clip.samples, model.downsample()))?;
        let file = format!("{}.vdrl", clip_name(i));
        save_events(common.out.join(&file), &events)?;
        manifest.push(json!({
            "file": file,
            "class_id": clip.class_id,
            "events": events.len(),
            "change_points": clip.change_points.len(),
        }));
    }
    write_json(&common.out.join("events.json"), &json!({ "clips": manifest }))
}

fn load_event_corpus(dir: &Path) -> Outcome<Vec<(EventSequence, usize)>> {
    let manifest = read_json(&dir.join("events.json"))?;
    let bad = |what: &str| Failure::new("input", EXIT_INPUT, format!("events.json: {what}"));
    manifest["clips"]
        .as_array()
        .ok_or_else(|| bad("missing clips"))?
        .iter()
        .map(|c| {
            let file = c["file"].as_str().ok_or_else(|| bad("clip without file"))?;
            let class = c["class_id"].as_u64().ok_or_else(|| bad("clip without class_id"))? as usize;
            Ok((load_events(dir.join(file))?, class))
        })
        .collect()
}

// ---------------------------------------------------------------- run-length transformer

fn train_rlt(
    common: &Common,
    events: Option<&Path>,
    toy: bool,
    steps: Option<usize>,
    ablation: bool,
    eval_every: usize,
) -> Outcome {
    let mut config = setup(common)?;
    if let Some(s) = steps {
        config.rlt.steps = s;
    }
    let (train, holdout, num_classes) = match (events, toy) {
        (Some(dir), _) => {
            let all = load_event_corpus(dir)?;
            if all.len() < 2 {
                return Err(Failure::new("input", EXIT_INPUT, "need at least two event files"));
            }
            let held = (all.len() / 10).max(1);
            let classes = all.iter().map(|(_, c)| c + 1).max().unwrap_or(1).max(config.data.num_classes);
            let (train, holdout) = all.split_at(all.len() - held);
            (train.to_vec(), holdout.to_vec(), classes)
        }
        (None, true) => {
            // Whole sequences from t = 0; the language emits two events per channel every 8 steps.
            let seq = toy_language(2 * config.rlt.window_events.saturating_sub(2).max(1))?;
            (vec![(seq.clone(), 0)], vec![(seq, 0)], 1)
        }
        (None, false) => return Err(Failure::new("usage", EXIT_USAGE, "train-rlt needs --events <dir> or --toy")),
    };
    let first = &train[0].0;
    let (k, channels) = (first.k(), first.num_channels());
    if train.iter().chain(&holdout).any(|(s, _)| s.k() != k || s.num_channels() != channels) {
        return Err(Failure::new("input", EXIT_INPUT, "event files disagree on k or channel count"));
    }
    let model = Rlt::<f32>::new(&config.rlt, k, channels, num_classes, common.seed)?;
    let mut trainer = RltTrainer::new(model, common.seed);
    let eval_windows = holdout_windows(&holdout, config.rlt.window_events);
    let mut curve = String::from("step,value_nll,length_nll,holdout_value_nll,holdout_length_nll\n");
    for s in 0..config.rlt.steps {
        let nll = trainer.train_on(&train)?;
        let last = s + 1 == config.rlt.steps;
        if last || (eval_every > 0 && (s + 1) % eval_every == 0) {
            let h = trainer.model.evaluate(&eval_windows)?;
            curve += &format!("{},{},{},{},{}\n", s + 1, nll.value, nll.length, h.value, h.length);
        }
    }
    fs::write(common.out.join("rlt_metrics.csv"), curve)?;
    let mut ck = trainer.model.checkpoint();
    ck.seed = common.seed;
    ck.step = trainer.step;
    ck.save(common.out.join("rlt.ck"))?;
    let bound = entropy_bound(&trainer.model, &holdout)?;
    let mut report = json!({
        "steps": trainer.step,
        "holdout_value_nll": bound.nll.value,
        "holdout_length_nll": bound.nll.length,
        "holdout_events": bound.nll.events,
        "bits_per_s": bound.bits_per_s,
        "raw_bits_per_s": bound.raw_bits_per_s,
        "events_per_s": bound.events_per_s,
    });
    if ablation {
        let reference = EmbeddingConfig::of(&config.rlt);
        let mut without = config.rlt.clone();
        reference.without_channel_offset().apply(&mut without);
        let variants = vec![("reference".to_string(), config.rlt.clone()), ("no_channel_offset".to_string(), without)];
        let plan = AblationPlan {
            k,
            num_channels: channels,
            num_classes,
            steps: config.rlt.steps,
            eval_every,
            seed: common.seed,
        };
        let curves = ablation_run(&variants, &plan, &train, &holdout)?;
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &curves)?;
        fs::write(common.out.join("ablation.csv"), buf)?;
        report["ablation"] = curves.iter().map(|c| (c.name.clone(), json!(c.final_nll()))).collect();
    }
    write_json(&common.out.join("rlt_report.json"), &report)
}

fn sample(
    common: &Common,
    checkpoint: &Path,
    num_events: usize,
    p: Option<f64>,
    condition: Option<usize>,
    prompt: Option<&Path>,
    rate: Option<u32>,
) -> Outcome {
    let config = setup(common)?;
    let model = Rlt::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let prompt = prompt.map(load_events).transpose()?;
    let opts = SampleOptions {
        num_events,
        nucleus_p: p.unwrap_or(model.config.nucleus_p),
        seed: common.seed,
        condition,
        base_rate_hz: rate.unwrap_or_else(|| code_rate(&config)),
    };
    let trace = model.sample(prompt.as_ref(), &opts)?;
    save_events(common.out.join("sample.vdrl"), &trace.events)?;
    Ok(())
}

// ---------------------------------------------------------------- codec

fn encode(common: &Common, input: &Path, k: Option<u32>, rate: Option<u32>, max_run_length: u32) -> Outcome {
    let config = setup(common)?;
    let codes = load_dense_csv(input, k.unwrap_or(config.slowae.k), rate.unwrap_or_else(|| code_rate(&config)))?;
    let events = interleaved_encode(&codes, usize::MAX, max_run_length)?;
    save_events(common.out.join(format!("{}.vdrl", stem(input))), &events)?;
    Ok(())
}

fn decode(common: &Common, input: &Path) -> Outcome {
    setup(common)?;
    let events = load_events(input)?;
    let codes = interleaved_decode(&events, usize::MAX)?;
    save_dense_csv(common.out.join(format!("{}.csv", stem(input))), &codes)?;
    Ok(())
}

// ---------------------------------------------------------------- evaluation

fn eval(common: &Common, checkpoint: &Path, data: Option<&Path>, rlt: Option<&Path>, bin_width: f64) -> Outcome {
    let config = setup(common)?;
    let model = load_slowae(checkpoint)?;
    let clips = corpus(&config, common.seed, data)?;
    if clips.len() < 2 {
        return Err(Failure::new("input", EXIT_INPUT, "evaluation needs at least two clips"));
    }
    let mut report = MetricsReport { bin_width_s: bin_width, clips: clips.len(), ..Default::default() };
    let (mut counts, mut truth) = (Vec::new(), Vec::new());
    let mut duration = 0.0;
    let mut sequences = Vec::new();
    for clip in &clips {
        let samples = usable(&clip.samples, model.downsample());
        let codes = model.encode_codes(samples)?;
        let events = interleaved_encode(&codes, usize::MAX, DEFAULT_MAX_RUN_LENGTH)?;
        report.add_jumps(&jump_histogram(&codes));
        let bins = barcode(&events, bin_width)?;
        if report.event_density.len() < bins.len() {
            report.event_density.resize(bins.len(), 0);
        }
        for (a, b) in report.event_density.iter_mut().zip(&bins) {
            *a += b;
        }
        counts.push(events.len() as f64);
        truth.push(clip.change_points.len() as f64);
        duration += codes.duration_s();
        sequences.push((events, clip.class_id));
    }
    if let Ok((p, s)) = correlation(&counts, &truth) {
        report.pearson = Some(p);
        report.spearman = Some(s);
    }
    report.mean_event_rate_hz = counts.iter().sum::<f64>() / duration;
    let rate = config.data.sample_rate_hz as f64;
    report.bit_rates.insert("pcm16".into(), pcm_bit_rate(rate, 16, 1));
    report.bit_rates.insert("pcm8".into(), pcm_bit_rate(rate, 8, 1));
    report.bit_rates.insert(
        "raw_events".into(),
        raw_code_bit_rate(report.mean_event_rate_hz, model.config.k, DEFAULT_MAX_RUN_LENGTH),
    );
    if let Some(path) = rlt {
        let lm = Rlt::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
        let bound = entropy_bound(&lm, &sequences)?;
        report.bit_rates.insert("rlt_nll".into(), bound.bits_per_s);
    }
    let silent = silent_active_rates(&model, &config)?;
    let mut value = serde_json::to_value(&report)?;
    value["silent_event_rate_hz"] = json!(silent.0);
    value["active_event_rate_hz"] = json!(silent.1);
    write_json(&common.out.join("report.json"), &value)?;
    fs::write(common.out.join("report.csv"), report.to_csv())?;
    Ok(())
}

/// Event rates beyond the initial events for a silent clip and for a steady tone.
fn silent_active_rates(model: &SlowAe<f32>, config: &Config) -> Outcome<(f64, f64)> {
    let n = (config.data.clip_s * config.data.sample_rate_hz as f64) as usize / model.downsample() * model.downsample();
    let rate = config.data.sample_rate_hz as f64;
    let tone: Vec<f64> = (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * 110.0 * i as f64 / rate).sin()).collect();
    let measure = |x: &[f64]| -> Outcome<f64> {
        let events = model.encode_to_events(x)?;
        Ok(events.len() as f64 / (n as f64 / rate))
    };
    Ok((measure(&vec![0.0; n])?, measure(&tone)?))
}

// ---------------------------------------------------------------- gradient check

fn grad_check(common: &Common, samples: usize, step: f64, tolerance: f64) -> Outcome {
    use rand::{Rng, SeedableRng};
    let config = setup(common)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
    let mut penalty_err: f64 = 0.0;
    let mut points: Vec<Grid<f64>> = Vec::new();
    for _ in 0..100 {
        points.push(Grid::new(16, 4, (0..64).map(|_| rng.random_range(-1.5..1.5)).collect())?);
    }
    for z in &points {
        let fd = numeric_gradient(z.as_slice(), 1e-6, margin_penalty);
        penalty_err = penalty_err.max(vector_relative_error(&margin_gradient(z.as_slice()), &fd));
        for kind in [PenaltyKind::L2, PenaltyKind::L1, PenaltyKind::GroupSparse] {
            let s = Slowness::new(kind);
            let fd = numeric_gradient(z.as_slice(), 1e-6, |v| {
                s.penalty(&Grid::new(16, 4, v.to_vec()).expect("same shape")).expect("two steps")
            });
            penalty_err = penalty_err.max(vector_relative_error(s.gradient(z)?.as_slice(), &fd));
        }
    }
    let mut model =
        SlowAe::<f64>::new(&config.slowae, config.data.num_classes, config.data.sample_rate_hz, common.seed)?;
    let noise = rand_distr::Normal::new(0.0, 0.05).expect("valid normal");
    for t in model.params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rand_distr::Distribution::sample(&noise, &mut rng);
        }
    }
    let d = model.downsample();
    let n = (samples / d).max(2) * d;
    let synth = SynthConfig::from_data(&config.data);
    let batch = (0..2u64)
        .map(|i| {
            let class = i as usize % config.data.num_classes;
            let s = synth.generate(
                mix_seed(common.seed, STREAM_CORPUS, i),
                n as f64 / config.data.sample_rate_hz as f64 + 0.01,
                class,
            )?;
            model.prepare(&s.samples[..n], class, config.slowae.noise_sigma, &mut rng)
        })
        .collect::<vdrl::Result<Vec<_>>>()?;
    let lambda = 0.3;
    let full = gradient_check(&model, &batch, lambda, None, step, Stencil::FivePoint)?;
    let identity = gradient_check_identity(&model, &batch, lambda, None, step, Stencil::FivePoint)?;
    let report = json!({
        "penalty_max_rel_err": penalty_err,
        "slowae_max_rel_err": full.max_rel_err(),
        "slowae_checked": full.checked(),
        "slowae_excluded": full.excluded(),
        "identity_max_rel_err": identity.max_rel_err(),
        "tolerance": tolerance,
        "groups": full.groups.iter().map(|g| json!({
            "name": g.name, "checked": g.checked, "excluded": g.excluded, "max_rel_err": g.max_rel_err,
        })).collect::<Vec<_>>(),
    });
    write_json(&common.out.join("grad_check.json"), &report)?;
    let worst = penalty_err.max(full.max_rel_err()).max(identity.max_rel_err());
    if worst >= tolerance {
        return Err(Failure::new(
            "check_failed",
            EXIT_CHECK_FAILED,
            format!("max relative error {worst:.3e} is not below {tolerance:.1e}"),
        ));
    }
    Ok(())
}
