use std::path::Path;
use std::process::{Command, Output};

fn vco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vco"))
        .args(args)
        .current_dir(dir)
        .env_remove("VCO_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

const TINY: &str = r#"
[dataset]
samples_per_class = 16
[train]
epochs = 2
warmup_epochs = 1
batch_size = 16
aux_loss = "hybrid"
[eval]
samples_per_class = 16
cfg_sweep = [1.0, 2.0]
[sampler]
steps = 3
"#;

#[test]
fn shift_prints_six_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vco(dir.path(), &["shift", "--alpha", "1", "--t", "0.3"]));
    assert_eq!(stdout(&o).trim(), "0.300000");
    let o = ok(vco(dir.path(), &["shift", "--alpha", "2", "--t", "0.5"]));
    assert_eq!(stdout(&o).trim(), "0.666667");
}

#[test]
fn invalid_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["shift", "--alpha", "-1", "--t", "0.5"][..],
        &["shift", "--alpha", "1", "--t", "1.5"],
        &["shift", "--alpha", "0", "--t", "0.5"],
    ] {
        assert_eq!(vco(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(dir.path().join("bad.toml"), "height = 18\n").unwrap();
    let o = vco(dir.path(), &["gen-data", "--spec", "bad.toml", "--out", "x.vcd"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.vcd").exists());
    std::fs::write(dir.path().join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let o = vco(dir.path(), &["train", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vco(dir.path(), &["gen-data", "--out", "a.vcd"]));
    assert!(stdout(&o).contains("2048"), "{}", stdout(&o));
    ok(vco(dir.path(), &["gen-data", "--out", "b.vcd"]));
    let a = std::fs::read(dir.path().join("a.vcd")).unwrap();
    assert!(a == std::fs::read(dir.path().join("b.vcd")).unwrap());
    ok(vco(dir.path(), &["--seed", "5", "gen-data", "--out", "c.vcd"]));
    assert!(a != std::fs::read(dir.path().join("c.vcd")).unwrap());
    assert!(dir.path().join("a.vcd.config.toml").exists());
}

#[test]
fn stats_reports_alpha() {
    let dir = tempfile::tempdir().unwrap();
    ok(vco(dir.path(), &["gen-data", "--out", "d.vcd"]));
    let o = ok(vco(dir.path(), &["stats", "--data", "d.vcd", "--teacher-seed", "7", "--out", "s.json"]));
    assert!(stdout(&o).contains("alpha ="));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("s.json")).unwrap()).unwrap();
    let alpha = v["calibration"]["alpha"].as_f64().unwrap();
    let rms = v["rms_scaled_features"].as_f64().unwrap();
    let px = v["calibration"]["rms_pixels"].as_f64().unwrap();
    assert!(alpha > 0.0 && ((rms - px) / px).abs() < 1e-6);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(vco(dir.path(), &["verify", "--seeds", "3"]));
    assert!(!stdout(&o).contains("FAIL"), "{}", stdout(&o));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_sample_eval_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    for d in [&a, &b, &c] {
        std::fs::create_dir(d).unwrap();
        std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    }
    let train = ["--seed", "2", "train", "--config", "tiny.toml", "--out-dir", "run"];
    ok(vco(&a, &train));
    ok(vco(&b, &train));
    for f in ["checkpoint.vco", "config.toml", "metrics.jsonl", "VERSION"] {
        assert!(a.join("run").join(f).exists(), "{f}");
    }
    let ckpt = read(a.join("run/checkpoint.vco"));
    assert!(ckpt == read(b.join("run/checkpoint.vco")), "same seed gave different checkpoints");
    let lines = std::fs::read_to_string(a.join("run/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);

    // stopping early and resuming ends at the same checkpoint
    ok(vco(&c, &[&train[..], &["--max-steps", "3"]].concat()));
    ok(vco(&c, &[&train[..], &["--resume", "run/checkpoint.vco"]].concat()));
    assert!(ckpt == read(c.join("run/checkpoint.vco")), "resumed run diverged");
    assert_eq!(std::fs::read_to_string(c.join("run/metrics.jsonl")).unwrap(), lines);

    for out in ["s1", "s2"] {
        ok(vco(&a, &["--seed", "4", "sample", "--ckpt", "run/checkpoint.vco", "--n", "6", "--cfg", "2", "--out", out]));
    }
    let img = read(a.join("s1/images.f32"));
    assert_eq!(img.len(), 6 * 16 * 16 * 4);
    assert!(img == read(a.join("s2/images.f32")), "sampling is not deterministic");
    assert!(a.join("s1/manifest.json").exists() && a.join("s1/semantics.f32").exists());

    std::fs::write(a.join("held.toml"), "samples_per_class = 16\nseed = 99\n").unwrap();
    ok(vco(&a, &["gen-data", "--spec", "held.toml", "--out", "held.vcd"]));
    ok(vco(&a, &["eval", "--ckpt", "run/checkpoint.vco", "--data", "held.vcd", "--out", "rep.json"]));
    let rep: serde_json::Value = serde_json::from_slice(&read(a.join("rep.json"))).unwrap();
    for k in ["1", "2"] {
        assert!(rep[k]["toy_fd"].as_f64().unwrap().is_finite(), "{rep}");
    }
    assert!(a.join("rep.json.config.toml").exists());
}
