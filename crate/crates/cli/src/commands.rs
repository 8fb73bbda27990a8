use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use vco::config::{RunConfig, CODE_VERSION};
use vco::data::{generate, Dataset, DatasetSpec};
use vco::eval::{reference_stats, sweep};
use vco::model::Model;
use vco::sampler::{generate as sample, SamplerConfig};
use vco::schedule::time_shift;
use vco::teacher::{SemanticPipeline, TeacherEncoder, TeacherSpec};
use vco::trainer::{select_weights, CalibrationMode, Checkpoint, Trainer};
use vco::verify::run_suite;
use vco::{Rng, Tensor};

/// Bad command-line input that the library never sees (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "vco", version, about = "Train, sample and evaluate pixel/semantic co-denoising models")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// Dataset spec as TOML; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Patch size the image dimensions must divide.
        #[arg(long, default_value_t = 4)]
        patch_size: usize,
    },
    /// Fit teacher feature statistics and the RMS calibration.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        feature_dim: usize,
        #[arg(long, default_value_t = 4)]
        patch_size: usize,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also keep a checkpoint every this many steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Stop after this many total steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Class id, `all` (cycled) or `none` (unconditional).
        #[arg(long, default_value = "all")]
        class: String,
        #[arg(long, default_value_t = 1.0)]
        cfg: f32,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a real dataset over a CFG sweep.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference (held-out) dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cfg_sweep: Option<Vec<f32>>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite.
    Verify {
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Print the SNR-equivalent shifted time.
    Shift {
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
    },
}

fn threads() -> Result<usize> {
    match std::env::var("VCO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("VCO_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    version: &'a str,
    command: &'a str,
    threads: usize,
    seed: Option<u64>,
    config: &'a T,
}

fn write_snapshot<T: Serialize>(path: &Path, command: &str, seed: Option<u64>, config: &T) -> Result<()> {
    let snap = Snapshot {
        version: CODE_VERSION,
        command,
        threads: threads()?,
        seed,
        config,
    };
    let text = toml::to_string(&snap).context("serialising config snapshot")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `<file>.config.toml` next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { spec, out, patch_size } => gen_data(spec, &out, patch_size, seed),
        Command::Stats {
            data,
            teacher_seed,
            out,
            feature_dim,
            patch_size,
        } => stats(&data, teacher_seed, feature_dim, patch_size, &out, seed),
        Command::Train {
            config,
            out_dir,
            epochs,
            resume,
            checkpoint_every,
            max_steps,
        } => train(config, out_dir, epochs, resume, checkpoint_every, max_steps, seed),
        Command::Sample {
            ckpt,
            class,
            cfg,
            n,
            steps,
            out,
        } => sample_cmd(&ckpt, &class, cfg, n, steps, &out, seed),
        Command::Eval {
            ckpt,
            data,
            cfg_sweep,
            n_per_class,
            steps,
            out,
        } => eval_cmd(&ckpt, &data, cfg_sweep, n_per_class, steps, &out, seed),
        Command::Verify { seeds } => verify(seeds),
        Command::Shift { alpha, t } => shift(alpha, t),
    }
}

fn gen_data(spec: Option<PathBuf>, out: &Path, patch_size: usize, seed: Option<u64>) -> Result<()> {
    let mut spec: DatasetSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| vco::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate(patch_size)?;
    let ds = generate(&spec)?;
    ensure_parent(out)?;
    ds.save(out)?;
    write_snapshot(&sidecar(out), "gen-data", seed, &spec)?;
    println!(
        "wrote {} images ({} classes x {}, {}x{}x{}, {:?}) to {}",
        ds.len(),
        spec.n_classes,
        spec.samples_per_class,
        spec.channels,
        spec.height,
        spec.width,
        spec.generator,
        out.display()
    );
    Ok(())
}

fn stats(data: &Path, teacher_seed: u64, feature_dim: usize, patch_size: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let ds = Dataset::load(data)?;
    if ds.is_empty() {
        return Err(vco::Error::Invalid("dataset is empty".into()).into());
    }
    let spec = TeacherSpec {
        seed: teacher_seed,
        patch_size,
        in_channels: ds.spec.channels,
        feature_dim,
    };
    let pipe = SemanticPipeline::fit(spec, &ds)?;
    let floored = pipe.stats.floored_dims();
    if floored > 0 {
        eprintln!("warning: {floored} of {feature_dim} feature dimensions have near-zero spread; their std was floored");
    }
    // in-run check that the scaled features match the pixel RMS
    let mut ss = 0.0f64;
    let mut count = 0usize;
    for i in 0..ds.len() {
        let d = pipe.prepare_semantics(&ds.image(i))?;
        ss += d.sum_sq();
        count += d.len();
    }
    let rms_scaled = (ss / count as f64).sqrt();
    let c = pipe.calibration;
    let doc = json!({
        "version": CODE_VERSION,
        "teacher": spec,
        "stats": pipe.stats,
        "calibration": c,
        "floored_dims": floored,
        "rms_scaled_features": rms_scaled,
    });
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    write_snapshot(&sidecar(out), "stats", seed, &spec)?;
    println!("alpha = {:.6}", c.alpha);
    println!(
        "rms(x) = {:.6}, rms(d) = {:.6}, rms(alpha*d) = {rms_scaled:.6}",
        c.rms_pixels, c.rms_features
    );
    Ok(())
}

fn load_dataset(rc: &mut RunConfig) -> Result<Dataset> {
    match &rc.data_path {
        Some(p) => {
            let ds = Dataset::load(p).with_context(|| format!("loading {}", p.display()))?;
            rc.dataset = ds.spec.clone();
            Ok(ds)
        }
        None => Ok(generate(&rc.dataset)?),
    }
}

fn train(
    config: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    epochs: Option<usize>,
    resume: Option<PathBuf>,
    checkpoint_every: Option<u64>,
    max_steps: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut rc = match &config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        rc.seed = s;
    }
    if let Some(d) = out_dir {
        rc.out_dir = d;
    }
    if let Some(e) = epochs {
        rc.train.epochs = e;
    }
    let ds = load_dataset(&mut rc)?;
    rc.validate()?;
    let dir = rc.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_text = rc.to_toml();
    write_snapshot(&dir.join("config.toml"), "train", seed, &rc)?;
    fs::write(dir.join("VERSION"), format!("{CODE_VERSION}\n"))?;

    let pipe = SemanticPipeline::fit(rc.teacher, &ds)?;
    let mut trainer = match &resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(rc.model.clone(), rc.train.clone(), &ds, pipe, rc.seed, ckpt)?
        }
        None => Trainer::new(rc.model.clone(), rc.train.clone(), &ds, pipe, rc.seed)?,
    };
    let metrics_path = dir.join("metrics.jsonl");
    let file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let total = trainer.total_steps();
    let end = max_steps.map_or(total, |m| m.min(total));
    println!(
        "training {} steps ({} per epoch), alpha = {:.4}",
        end.saturating_sub(trainer.step),
        trainer.steps_per_epoch(),
        trainer.pipeline.calibration.alpha
    );
    let every = checkpoint_every.filter(|&k| k > 0);
    while trainer.step < end {
        let rec = trainer.train_step()?;
        serde_json::to_writer(&mut metrics, &rec)?;
        metrics.write_all(b"\n")?;
        if rec.step % trainer.steps_per_epoch() == 0 {
            println!(
                "step {:>6}  loss {:.4}  vx {:.4}  vd {:.4}  aux {:.4}  lr {:.2e}",
                rec.step, rec.loss_total, rec.loss_vx, rec.loss_vd, rec.loss_aux, rec.lr
            );
        }
        if every.is_some_and(|k| trainer.step % k == 0) {
            trainer
                .checkpoint(&config_text)
                .save(&dir.join(format!("checkpoint-{}.vco", trainer.step)))?;
        }
    }
    metrics.flush()?;
    let path = dir.join("checkpoint.vco");
    trainer.checkpoint(&config_text).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

struct Loaded {
    rc: RunConfig,
    model: Model,
    weights: vco::model::ParamStore,
    pipeline: SemanticPipeline,
    shift: Option<f32>,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let rc = RunConfig::from_toml(&ckpt.config).context("checkpoint configuration")?;
    let encoder = TeacherEncoder::new(TeacherSpec {
        seed: ckpt.teacher_seed,
        ..rc.teacher
    })?;
    let pipeline = SemanticPipeline {
        encoder,
        stats: ckpt.stats.clone(),
        calibration: ckpt.calibration,
    };
    // the freshly initialised parameters only fix the layout
    let (model, _) = Model::new(rc.model.clone(), &mut Rng::new(0))?;
    let weights = select_weights(&ckpt.params, &ckpt.ema, rc.eval.ema_index)?;
    let shift = (rc.train.calibration == CalibrationMode::TimeShift).then_some(ckpt.calibration.alpha);
    Ok(Loaded {
        rc,
        model,
        weights,
        pipeline,
        shift,
    })
}

fn parse_classes(spec: &str, n: usize, n_classes: usize) -> Result<Vec<Option<usize>>> {
    match spec {
        "all" => Ok((0..n).map(|i| Some(i % n_classes)).collect()),
        "none" => Ok(vec![None; n]),
        id => {
            let c: usize = id
                .parse()
                .map_err(|_| usage(format!("--class must be an id, `all` or `none`, got {id:?}")))?;
            if c >= n_classes {
                return Err(usage(format!("class {c} out of range for {n_classes} classes")));
            }
            Ok(vec![Some(c); n])
        }
    }
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn sample_cmd(ckpt: &Path, class: &str, cfg: f32, n: usize, steps: Option<usize>, out: &Path, seed: Option<u64>) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let l = load_checkpoint(ckpt)?;
    let classes = parse_classes(class, n, l.rc.model.n_classes)?;
    let sc = SamplerConfig {
        cfg_scale: cfg,
        steps: steps.unwrap_or(l.rc.sampler.steps),
        ..l.rc.sampler
    };
    let seed_used = seed.unwrap_or(l.rc.seed);
    let set = sample(&l.model, &l.weights, &classes, &sc, l.shift, seed_used, l.rc.eval.chunk)?;
    fs::create_dir_all(out)?;
    write_f32(&out.join("images.f32"), &set.images)?;
    write_f32(&out.join("semantics.f32"), &set.semantics)?;
    let manifest = json!({
        "version": CODE_VERSION,
        "checkpoint": ckpt,
        "images": { "file": "images.f32", "dtype": "f32-le", "shape": set.images.shape() },
        "semantics": { "file": "semantics.f32", "dtype": "f32-le", "shape": set.semantics.shape() },
        "classes": set.classes,
        "cfg_scale": cfg,
        "steps": sc.steps,
        "seed": seed_used,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_snapshot(&out.join("config.toml"), "sample", Some(seed_used), &sc)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    cfg_sweep: Option<Vec<f32>>,
    n_per_class: Option<usize>,
    steps: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut l = load_checkpoint(ckpt)?;
    if let Some(s) = cfg_sweep {
        l.rc.eval.cfg_sweep = s;
    }
    if let Some(n) = n_per_class {
        l.rc.eval.samples_per_class = n;
    }
    if let Some(s) = steps {
        l.rc.sampler.steps = s;
    }
    l.rc.validate()?;
    let real = Dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
    let reference = reference_stats(&l.pipeline, &real)?;
    let seed_used = seed.unwrap_or(l.rc.seed);
    let report = sweep(
        &l.model,
        &l.weights,
        &l.pipeline,
        l.shift,
        &l.rc.sampler,
        &l.rc.eval,
        &real,
        &reference,
        seed_used,
    )?;
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    write_snapshot(&sidecar(out), "eval", Some(seed_used), &l.rc)?;
    for (k, m) in &report {
        println!("cfg {k:>4}  toy_fd {:.5}  class_mean_err {:.5}", m.toy_fd, m.class_mean_err);
    }
    Ok(())
}

fn verify(seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let checks = run_suite(seeds)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        anyhow::bail!("{failed} invariant checks failed");
    }
    Ok(())
}

fn shift(alpha: f64, t: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(usage(format!("--alpha must be positive, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(usage(format!("--t must lie in [0, 1], got {t}")));
    }
    println!("{:.6}", time_shift(alpha, t));
    Ok(())
}
