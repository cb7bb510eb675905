//! `maskdepth` command-line tool.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskdepth::checkpoint::load_checkpoint;
use maskdepth::data::{load_dataset, read_all, read_image, write_split, SceneConfig, SplitSpec};
use maskdepth::model::{Model, ModelConfig};
use maskdepth::trainer::{evaluate_model, fit, RunPaths};
use maskdepth::verify::{self, Suite};
use maskdepth::viz::{compose, mask_demo, DemoOptions};
use serde_json::{json, Map, Value};

use crate::manifest::RunManifest;

/// Bad invocation or config; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Failed self-check; exit code 2.
#[derive(Debug)]
struct CheckFailure(usize);

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for CheckFailure {}

#[derive(Parser)]
#[command(name = "maskdepth", version, about = "Semi-supervised depth estimation with K-way disjoint masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints metrics as JSON.
    Eval(EvalArgs),
    /// Run the built-in self-checks.
    Verify(VerifyArgs),
    /// Render weak/strong branch panels for one image.
    MaskDemo(MaskDemoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_labeled: usize,
    #[arg(long, default_value_t = 240)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of labeled pixels kept in each depth map.
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    texture_noise: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML, or JSON with a `.json` extension.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out labeled set for periodic evaluation.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    lambda_dc: Option<f64>,
    #[arg(long)]
    lambda_uc: Option<f64>,
    #[arg(long)]
    lambda_fc: Option<f64>,
    #[arg(long)]
    strong_k: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 80.0)]
    cap: f64,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Masking,
    Gradcheck,
    Metrics,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct MaskDemoArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Trained weights; without it a randomly initialised model is used.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Drop half the patches instead of K-way masking.
    #[arg(long)]
    naive: bool,
    #[arg(long, default_value_t = 0.5)]
    naive_ratio: f64,
    #[arg(long, default_value_t = 4)]
    scale: u32,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<CheckFailure>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<maskdepth::Error>() {
            use maskdepth::Error as E;
            return match e {
                E::InvalidConfig(_) | E::InvalidK(_) | E::InvalidRange(_) => 1,
                E::Io { .. }
                | E::Image { .. }
                | E::Format { .. }
                | E::EmptyLabeledPool
                | E::EmptyEvalSet
                | E::NoValidPixels
                | E::EmptySupervision => 3,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
        Command::MaskDemo(a) => demo(a),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut scene = SceneConfig::default();
    scene.height = a.height.unwrap_or(scene.height);
    scene.width = a.width.unwrap_or(scene.width);
    scene.d_min = a.d_min.unwrap_or(scene.d_min);
    scene.d_max = a.d_max.unwrap_or(scene.d_max);
    scene.min_objects = a.min_objects.unwrap_or(scene.min_objects);
    scene.max_objects = a.max_objects.unwrap_or(scene.max_objects);
    scene.texture_noise = a.texture_noise.unwrap_or(scene.texture_noise);
    scene.validate().map_err(|e| UsageError(e.to_string()))?;
    let split = SplitSpec { n_labeled: a.n_labeled, n_unlabeled: a.n_unlabeled, density: a.density, seed: a.seed };
    if is_nonempty_dir(&a.out) {
        if !a.force {
            return Err(UsageError(format!("{} exists and is not empty (use --force)", a.out.display())).into());
        }
        for sub in ["images", "depth"] {
            let p = a.out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let manifest_path = a.out.join("manifest.json");
    let mut m = RunManifest::start(
        "gen-data",
        json!({ "scene": scene, "split": split }),
        a.seed,
        vec![a.out.join("images"), a.out.join("depth")],
    );
    m.write(&manifest_path)?;
    let written = write_split(&a.out, &scene, &split)?;
    m.finish();
    m.write(&manifest_path)?;
    println!("{}", json!({ "images": written.len(), "labeled": a.n_labeled, "out": a.out }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut over = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            over.insert(k.into(), v);
        }
    };
    put("steps", a.steps.map(Value::from));
    put("seed", a.seed.map(Value::from));
    put("batch_size", a.batch_size.map(Value::from));
    put("lr_encoder", a.lr_encoder.map(Value::from));
    put("lr_decoder", a.lr_decoder.map(Value::from));
    put("lr_schedule", a.lr_schedule.map(Value::from));
    put("lambda_dc", a.lambda_dc.map(Value::from));
    put("lambda_uc", a.lambda_uc.map(Value::from));
    put("lambda_fc", a.lambda_fc.map(Value::from));
    put("strong_k", a.strong_k.map(Value::from));
    put("eval_every", a.eval_every.map(Value::from));
    put("checkpoint_every", a.checkpoint_every.map(Value::from));
    let cfg = config::resolve(a.config.as_deref(), over)?;
    let paths = RunPaths::new(&a.out);
    let config_echo = serde_json::to_value(&cfg)?;
    let mut m = RunManifest::start("train", config_echo.clone(), cfg.seed, vec![paths.log(), paths.checkpoint()]);
    m.write(&a.out.join("manifest.json"))?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&config_echo)?)
        .with_context(|| format!("writing {}", a.out.join("config.json").display()))?;

    let train = read_all::<f32>(&load_dataset(&a.data)?)?;
    let eval = match &a.eval_data {
        Some(p) => read_all::<f32>(&load_dataset(p)?)?,
        None => Vec::new(),
    };
    let summary = fit(&cfg, &train, &eval, &paths, a.resume.as_deref())?;
    m.finish();
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "{}",
        json!({ "steps": summary.steps_done, "last": summary.last, "metrics": summary.metrics, "checkpoint": paths.checkpoint() })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.cap > 0.0) {
        return Err(UsageError(format!("--cap must be positive, got {}", a.cap)).into());
    }
    let mut m = RunManifest::start("eval", json!({ "ckpt": a.ckpt, "data": a.data, "cap": a.cap }), 0, Vec::new());
    if let Some(p) = &a.manifest {
        m.write(p)?;
    }
    let ck = load_checkpoint::<f32>(&a.ckpt)?;
    let samples = read_all::<f32>(&load_dataset(&a.data)?)?;
    let metrics = evaluate_model(&ck.model, &samples, a.cap)?;
    println!("{}", serde_json::to_string(&metrics)?);
    if let Some(p) = &a.manifest {
        m.finish();
        m.write(p)?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let suite = match a.suite {
        SuiteArg::Masking => Suite::Masking,
        SuiteArg::Gradcheck => Suite::Gradcheck,
        SuiteArg::Metrics => Suite::Metrics,
        SuiteArg::All => Suite::All,
    };
    let mut m = RunManifest::start("verify", json!({ "suite": format!("{suite:?}").to_lowercase() }), a.seed, Vec::new());
    if let Some(p) = &a.manifest {
        m.write(p)?;
    }
    let checks = verify::run(suite, a.seed);
    for c in &checks {
        println!("{}", serde_json::to_string(c)?);
    }
    if let Some(p) = &a.manifest {
        m.finish();
        m.write(p)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CheckFailure(failed).into());
    }
    Ok(())
}

fn demo(a: MaskDemoArgs) -> Result<()> {
    if a.k == 0 {
        return Err(UsageError("--k must be at least 1".into()).into());
    }
    let manifest_path = a.out.with_extension("manifest.json");
    let mut m = RunManifest::start(
        "mask-demo",
        json!({ "image": a.image, "k": a.k, "ckpt": a.ckpt, "naive": a.naive, "naive_ratio": a.naive_ratio }),
        a.seed,
        vec![a.out.clone()],
    );
    m.write(&manifest_path)?;
    let image = read_image::<f64>(&a.image)?;
    let model = match &a.ckpt {
        Some(p) => load_checkpoint::<f64>(p)?.model,
        None => {
            let cfg = ModelConfig { image_height: image.height(), image_width: image.width(), ..ModelConfig::default() };
            Model::<f64>::new(cfg, a.seed).map_err(|e| UsageError(format!("image size: {e}")))?
        }
    };
    if (image.height(), image.width()) != (model.cfg.image_height, model.cfg.image_width) {
        return Err(maskdepth::Error::Format {
            path: a.image.clone(),
            msg: format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                model.cfg.image_height,
                model.cfg.image_width
            ),
        }
        .into());
    }
    let opts = DemoOptions {
        k: a.k,
        seed: a.seed,
        naive: a.naive,
        naive_ratio: a.naive_ratio,
        uncertainty: a.ckpt.is_some(),
        scale: a.scale,
    };
    let (panels, summary) = mask_demo(&model, &image, &opts)?;
    let out = compose(&panels);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.finish();
    m.write(&manifest_path)?;
    let names: Vec<&str> = panels.iter().map(|p| p.name).collect();
    println!("{}", json!({ "out": a.out, "panels": names, "summary": summary }));
    Ok(())
}
