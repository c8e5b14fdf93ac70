use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in seconds
data.clips = 6
data.clip_s = 0.256
data.window_s = 0.064
slowae.stages = 2
slowae.channels = 2
slowae.k = 3
slowae.encoder_width = 4
slowae.encoder_res_layers = 1
slowae.decoder_width = 4
slowae.decoder_layers = 2
slowae.skip_width = 4
slowae.batch = 2
rlt.layers = 1
rlt.width = 16
rlt.heads = 2
rlt.length_hidden = 16
rlt.window_events = 32
rlt.offset_buckets = 64
rlt.rel_clip = 8
rlt.batch = 2
";

fn vdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdrl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = vdrl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Exit code plus the parsed one-line error.
fn failure(args: &[&str]) -> (i32, serde_json::Value) {
    let out = vdrl(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["code"].as_i64().unwrap() as i32, out.status.code().unwrap());
    (out.status.code().unwrap(), v)
}

#[test]
fn encode_then_decode_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "3,-1,0\n3,-1,0\n3,2,0\n-7,2,0\n-7,2,1\n-7,2,1\n7,7,7\n";
    let input = dir.path().join("codes.csv");
    fs::write(&input, csv).unwrap();
    let (enc, dec) = (dir.path().join("enc"), dir.path().join("dec"));
    ok(&["encode", "--seed", "1", "--out", s(&enc), "--input", s(&input), "--k", "7", "--rate", "250"]);
    ok(&["decode", "--seed", "1", "--out", s(&dec), "--input", s(&enc.join("codes.vdrl"))]);
    assert_eq!(fs::read_to_string(dec.join("codes.csv")).unwrap(), csv);
    let bytes = fs::read(enc.join("codes.vdrl")).unwrap();
    assert_eq!(&bytes[..4], b"VDRL");
    // Three channels with 3, 3 and 3 runs.
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 9);
}

#[test]
fn short_runs_split_and_still_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv: String = (0..40).map(|t| format!("{}\n", if t < 30 { 1 } else { -2 })).collect();
    let input = dir.path().join("long.csv");
    fs::write(&input, &csv).unwrap();
    let (enc, dec) = (dir.path().join("enc"), dir.path().join("dec"));
    ok(&["encode", "--out", s(&enc), "--input", s(&input), "--k", "2", "--max-run-length", "4"]);
    ok(&["decode", "--out", s(&dec), "--input", s(&enc.join("long.vdrl"))]);
    assert_eq!(fs::read_to_string(dec.join("long.csv")).unwrap(), csv);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["gen-data", "--seed", seed, "--config", s(&cfg), "--out", s(&out.join("data"))]);
        ok(&["train-slowae", "--seed", seed, "--config", s(&cfg), "--out", s(&out.join("ae")), "--steps", "3"]);
        out
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    for file in ["data/corpus.json", "data/clip_00003.csv", "ae/slowae.ck", "ae/metrics.csv", "ae/controller.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_ne!(fs::read(a.join("ae/slowae.ck")).unwrap(), fs::read(c.join("ae/slowae.ck")).unwrap());
    let metrics = fs::read_to_string(a.join("ae/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,nll,margin,slow,lambda,aer");
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn full_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = p.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    ok(&["gen-data", "--seed", "3", "--config", c, "--out", s(&p.join("data"))]);
    ok(&["train-slowae", "--seed", "3", "--config", c, "--out", s(&p.join("ae")), "--steps", "4"]);
    let ck = p.join("ae/slowae.ck");
    ok(&[
        "extract-events",
        "--seed",
        "3",
        "--config",
        c,
        "--out",
        s(&p.join("ev")),
        "--checkpoint",
        s(&ck),
        "--data",
        s(&p.join("data")),
    ]);
    ok(&[
        "train-rlt",
        "--seed",
        "3",
        "--config",
        c,
        "--out",
        s(&p.join("lm")),
        "--events",
        s(&p.join("ev")),
        "--steps",
        "4",
        "--ablation",
        "--eval-every",
        "2",
    ]);
    let lm = p.join("lm/rlt.ck");
    ok(&[
        "sample",
        "--seed",
        "3",
        "--config",
        c,
        "--out",
        s(&p.join("smp")),
        "--checkpoint",
        s(&lm),
        "--num-events",
        "12",
        "--condition",
        "1",
    ]);
    ok(&[
        "eval",
        "--seed",
        "3",
        "--config",
        c,
        "--out",
        s(&p.join("rep")),
        "--checkpoint",
        s(&ck),
        "--data",
        s(&p.join("data")),
        "--rlt",
        s(&lm),
    ]);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("rep/report.json")).unwrap()).unwrap();
    for key in ["pearson", "spearman", "jump_histogram", "event_density", "bit_rates", "mean_event_rate_hz"] {
        assert!(report.get(key).is_some(), "{key} missing");
    }
    assert_eq!(report["clips"], 6);
    assert!(report["bit_rates"]["rlt_nll"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(p.join("rep/report.csv")).unwrap();
    assert!(csv.starts_with("key,value\n") && csv.contains("\nspearman,"));

    let sample = fs::read(p.join("smp/sample.vdrl")).unwrap();
    assert_eq!(u32::from_le_bytes(sample[14..18].try_into().unwrap()), 12);
    let ablation = fs::read_to_string(p.join("lm/ablation.csv")).unwrap();
    assert!(ablation.starts_with("variant,step,value_nll,length_nll\n"));
    assert!(ablation.contains("\nreference,") && ablation.contains("\nno_channel_offset,"));
    let events: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("ev/events.json")).unwrap()).unwrap();
    assert_eq!(events["clips"].as_array().unwrap().len(), 6);
}

#[test]
fn toy_language_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    ok(&["train-rlt", "--toy", "--config", s(&cfg), "--out", s(dir.path()), "--steps", "3"]);
    let curve = fs::read_to_string(dir.path().join("rlt_metrics.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
}

#[test]
fn grad_check_passes_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    ok(&["grad-check", "--seed", "2", "--config", s(&cfg), "--out", s(dir.path())]);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("grad_check.json")).unwrap()).unwrap();
    assert!(r["slowae_max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(r["penalty_max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let (code, v) = failure(&["encode", "--frobnicate"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"], "usage");
    assert_eq!(failure(&["no-such-command"]).0, 2);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(failure(&["train-rlt", "--out", s(dir.path())]).0, 2);
}

#[test]
fn malformed_config_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["slowae.k = banana\n", "no equals sign\n", "bogus.key = 1\n", "slowae.k = 3\nslowae.k = 4\n"] {
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, text).unwrap();
        let (code, v) = failure(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
        assert_eq!(code, 3, "{text}");
        assert_eq!(v["error"], "config");
    }
}

#[test]
fn checkpoint_version_mismatch_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let ae = dir.path().join("ae");
    ok(&["train-slowae", "--config", s(&cfg), "--out", s(&ae), "--steps", "1"]);
    let mut bytes = fs::read(ae.join("slowae.ck")).unwrap();
    bytes[4] = 9;
    let bad = dir.path().join("future.ck");
    fs::write(&bad, bytes).unwrap();
    let (code, v) = failure(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--checkpoint", s(&bad)]);
    assert_eq!(code, 4);
    assert_eq!(v["error"], "checkpoint_version");

    let (usage, _) = failure(&["train-slowae", "--out", s(dir.path()), "--steps", "x"]);
    let (config, _) = {
        let c = dir.path().join("bad.cfg");
        fs::write(&c, "x = 1\n").unwrap();
        failure(&["gen-data", "--config", s(&c), "--out", s(dir.path())])
    };
    let codes = [usage, config, code];
    assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
}
