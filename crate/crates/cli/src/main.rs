//! `unsod` binds the library into a six-command workflow: generate a
//! synthetic dataset, train the stage-1 model, distill pseudo-labels,
//! retrain on them, evaluate a checkpoint or label set, and export loss
//! landscapes.
//!
//! Settings flow from built-in defaults, through an optional flat
//! `key=value` file, to explicit flags, later layers winning. Commands that
//! own a run directory echo their effective settings into `config.txt`
//! there, so every artifact can be regenerated from the directory alone.
//!
//! Exit codes: 0 success, 2 bad settings or bad inputs, 3 I/O failure,
//! 4 numerical abort.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use unsod_core::data::{gen_synthetic, load_dataset, BlobKind, SyntheticSpec};
use unsod_core::gridcore::Grid;
use unsod_core::losses::{landscape_export, write_landscape_csv, LandscapeLoss, LossWeights};
use unsod_core::metrics::{evaluate_dataset, write_eval_report};
use unsod_core::model::forward_pass;
use unsod_core::pipeline::{
    generate_pseudo_labels, load_checkpoint, read_pseudo_labels, save_checkpoint, train_stage1,
    train_stage2, write_pseudo_labels, write_runlog, TrainConfig,
};
use unsod_core::texture::{canonical_modalities, Modality};
use unsod_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "unsod",
    version,
    about = "Two-stage unsupervised salient object detection on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest
    Gendata(GendataArgs),
    /// Stage-1 self-distilling training over a manifest
    Train(RunArgs),
    /// Distill binary pseudo-labels from a stage-1 checkpoint
    Pseudo(RunArgs),
    /// Retrain a fresh model on the pseudo-labels
    Retrain(RunArgs),
    /// Score a checkpoint or label set against ground truth
    Eval(EvalArgs),
    /// Export per-pixel loss landscape tables as CSV
    Landscape(LandscapeArgs),
}

#[derive(Args)]
struct GendataArgs {
    /// Directory to write images, masks, and the manifest into
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingFlags,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest to train from
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints, logs, labels, and the echoed config
    #[arg(long)]
    run_dir: PathBuf,
    #[command(flatten)]
    settings: SettingFlags,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "labels"]))]
struct EvalArgs {
    /// Dataset manifest with ground truth
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint whose predictions are scored
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Label directory scored in place of a checkpoint
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: SettingFlags,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Landscape CSV path
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated losses to export: csd, l1, bce
    #[arg(long, default_value = "csd,l1,bce")]
    losses: String,
    /// Comma-separated curriculum positions in [0, 1]
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    rho: String,
}

/// Every settings key, overridable per invocation. Unset flags fall back to
/// the config file, then to the defaults shown here.
#[derive(Args, Default)]
struct SettingFlags {
    /// Flat key=value settings file; `#` starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    /// Samples to generate [default: 8]
    #[arg(long)]
    count: Option<String>,
    /// Generated image side, a multiple of 16 [default: 64]
    #[arg(long)]
    side: Option<String>,
    /// Minimum blobs per scene [default: 1]
    #[arg(long)]
    blob_min: Option<String>,
    /// Maximum blobs per scene [default: 2]
    #[arg(long)]
    blob_max: Option<String>,
    /// Blob shape: ellipse or rounded-rect [default: ellipse]
    #[arg(long)]
    blob_kind: Option<String>,
    /// Foreground color lift over the background [default: 0.4]
    #[arg(long)]
    color_offset: Option<String>,
    /// Uniform noise amplitude, below the color offset [default: 0.05]
    #[arg(long)]
    noise_amp: Option<String>,
    /// Stage-1 epochs [default: 20]
    #[arg(long)]
    epochs: Option<String>,
    /// Batch size [default: 8]
    #[arg(long)]
    batch: Option<String>,
    /// Training input side, a multiple of 16 [default: 64]
    #[arg(long)]
    main_side: Option<String>,
    /// Comma-separated reference sides, multiples of 16 [default: 48,96]
    #[arg(long)]
    ref_sides: Option<String>,
    /// Initial stage-1 learning rate, decayed linearly [default: 0.1]
    #[arg(long)]
    lr: Option<String>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<String>,
    /// Appearance contrast sharpness of the texture loss [default: 200]
    #[arg(long)]
    alpha: Option<String>,
    /// Weight of the distilling loss [default: 1]
    #[arg(long)]
    lambda_c: Option<String>,
    /// Weight of the texture boundary loss [default: 0.05]
    #[arg(long)]
    lambda_b: Option<String>,
    /// Weight of the scale consistency loss [default: 1]
    #[arg(long)]
    lambda_m: Option<String>,
    /// Texture window side, odd and >= 3 [default: 5]
    #[arg(long)]
    window: Option<String>,
    /// Stage-2 epochs [default: 10]
    #[arg(long)]
    stage2_epochs: Option<String>,
    /// Initial stage-2 learning rate [default: 0.005]
    #[arg(long)]
    stage2_lr: Option<String>,
    /// Seed for every random draw [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated extra modalities: depth, thermal, flow [default: none]
    #[arg(long)]
    modalities: Option<String>,
}

impl SettingFlags {
    fn pairs(&self) -> [(&'static str, Option<&String>); 22] {
        [
            ("count", self.count.as_ref()),
            ("side", self.side.as_ref()),
            ("blob_min", self.blob_min.as_ref()),
            ("blob_max", self.blob_max.as_ref()),
            ("blob_kind", self.blob_kind.as_ref()),
            ("color_offset", self.color_offset.as_ref()),
            ("noise_amp", self.noise_amp.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("batch", self.batch.as_ref()),
            ("main_side", self.main_side.as_ref()),
            ("ref_sides", self.ref_sides.as_ref()),
            ("lr", self.lr.as_ref()),
            ("momentum", self.momentum.as_ref()),
            ("alpha", self.alpha.as_ref()),
            ("lambda_c", self.lambda_c.as_ref()),
            ("lambda_b", self.lambda_b.as_ref()),
            ("lambda_m", self.lambda_m.as_ref()),
            ("window", self.window.as_ref()),
            ("stage2_epochs", self.stage2_epochs.as_ref()),
            ("stage2_lr", self.stage2_lr.as_ref()),
            ("seed", self.seed.as_ref()),
            ("modalities", self.modalities.as_ref()),
        ]
    }
}

/// The merged settings of one invocation; superset of the generator spec
/// and the training config, with `seed` and `modalities` shared.
#[derive(Debug, Clone, PartialEq)]
struct Settings {
    count: usize,
    side: usize,
    blob_min: usize,
    blob_max: usize,
    blob_kind: BlobKind,
    color_offset: f64,
    noise_amp: f64,
    epochs: usize,
    batch: usize,
    main_side: usize,
    ref_sides: Vec<usize>,
    lr: f64,
    momentum: f64,
    alpha: f64,
    lambda_c: f64,
    lambda_b: f64,
    lambda_m: f64,
    window: usize,
    stage2_epochs: usize,
    stage2_lr: f64,
    seed: u64,
    modalities: Vec<Modality>,
}

impl Default for Settings {
    fn default() -> Self {
        let g = SyntheticSpec::default();
        let t = TrainConfig::default();
        Settings {
            count: g.count,
            side: g.side,
            blob_min: g.blob_min,
            blob_max: g.blob_max,
            blob_kind: g.blob_kind,
            color_offset: g.color_offset,
            noise_amp: g.noise_amp,
            epochs: t.epochs,
            batch: t.batch,
            main_side: t.main_side,
            ref_sides: t.ref_sides,
            lr: t.lr,
            momentum: t.momentum,
            alpha: t.alpha,
            lambda_c: t.weights.lambda_c,
            lambda_b: t.weights.lambda_b,
            lambda_m: t.weights.lambda_m,
            window: t.window,
            stage2_epochs: t.stage2_epochs,
            stage2_lr: t.stage2_lr,
            seed: t.seed,
            modalities: t.modalities,
        }
    }
}

fn split_list(value: &str) -> Vec<&str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl Settings {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("setting \"{key}\": cannot parse \"{value}\"")))
        }
        match key {
            "count" => self.count = num(key, value)?,
            "side" => self.side = num(key, value)?,
            "blob_min" => self.blob_min = num(key, value)?,
            "blob_max" => self.blob_max = num(key, value)?,
            "blob_kind" => self.blob_kind = BlobKind::from_name(value.trim())?,
            "color_offset" => self.color_offset = num(key, value)?,
            "noise_amp" => self.noise_amp = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "main_side" => self.main_side = num(key, value)?,
            "ref_sides" => {
                self.ref_sides = split_list(value)
                    .into_iter()
                    .map(|v| num("ref_sides", v))
                    .collect::<Result<_>>()?;
            }
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lambda_c" => self.lambda_c = num(key, value)?,
            "lambda_b" => self.lambda_b = num(key, value)?,
            "lambda_m" => self.lambda_m = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "stage2_epochs" => self.stage2_epochs = num(key, value)?,
            "stage2_lr" => self.stage2_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "modalities" => {
                self.modalities = split_list(value)
                    .into_iter()
                    .map(Modality::from_name)
                    .collect::<Result<_>>()?;
            }
            other => return Err(Error::Config(format!("unknown setting \"{other}\""))),
        }
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got \"{line}\"",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Alphabetical `key=value` lines; parseable back by [`load_file`].
    fn echo(&self) -> String {
        let sides = self
            .ref_sides
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mods = canonical_modalities(&self.modalities)
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(",");
        let pairs: [(&str, String); 22] = [
            ("alpha", self.alpha.to_string()),
            ("batch", self.batch.to_string()),
            ("blob_kind", self.blob_kind.name().to_string()),
            ("blob_max", self.blob_max.to_string()),
            ("blob_min", self.blob_min.to_string()),
            ("color_offset", self.color_offset.to_string()),
            ("count", self.count.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lambda_b", self.lambda_b.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("lambda_m", self.lambda_m.to_string()),
            ("lr", self.lr.to_string()),
            ("main_side", self.main_side.to_string()),
            ("modalities", mods),
            ("momentum", self.momentum.to_string()),
            ("noise_amp", self.noise_amp.to_string()),
            ("ref_sides", sides),
            ("seed", self.seed.to_string()),
            ("side", self.side.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("stage2_lr", self.stage2_lr.to_string()),
            ("window", self.window.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            count: self.count,
            side: self.side,
            blob_min: self.blob_min,
            blob_max: self.blob_max,
            blob_kind: self.blob_kind,
            color_offset: self.color_offset,
            noise_amp: self.noise_amp,
            modalities: self.modalities.clone(),
            seed: self.seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            main_side: self.main_side,
            ref_sides: self.ref_sides.clone(),
            lr: self.lr,
            momentum: self.momentum,
            alpha: self.alpha,
            weights: LossWeights {
                lambda_c: self.lambda_c,
                lambda_b: self.lambda_b,
                lambda_m: self.lambda_m,
            },
            window: self.window,
            seed: self.seed,
            modalities: self.modalities.clone(),
            stage2_epochs: self.stage2_epochs,
            stage2_lr: self.stage2_lr,
        }
    }
}

/// Defaults, then the config file, then explicit flags.
fn build_settings(flags: &SettingFlags) -> Result<Settings> {
    let mut settings = Settings::default();
    if let Some(path) = &flags.config {
        require_file(path, "settings file")?;
        settings.load_file(path)?;
    }
    for (key, value) in flags.pairs() {
        if let Some(v) = value {
            settings.apply(key, v)?;
        }
    }
    Ok(settings)
}

/// Missing inputs are settings-level mistakes, not I/O failures.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_run_dir(dir: &Path, settings: &Settings) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.txt"), &settings.echo())
}

fn cmd_gendata(args: &GendataArgs) -> Result<()> {
    let settings = build_settings(&args.settings)?;
    let spec = settings.synthetic_spec();
    let manifest = gen_synthetic(&spec, &args.out)?;
    println!(
        "wrote {} samples (side {}, seed {}); manifest {}",
        spec.count,
        spec.side,
        spec.seed,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let settings = build_settings(&args.settings)?;
    let config = settings.train_config();
    config.validate()?;
    prepare_run_dir(&args.run_dir, &settings)?;
    let dataset = load_dataset(&args.manifest, config.main_side, &config.modalities)?;
    let (params, log) = train_stage1(&config, &dataset)?;
    let ckpt = args.run_dir.join("stage1.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let csv = args.run_dir.join("runlog.csv");
    let mut buf = Vec::new();
    write_runlog(&log, &mut buf).map_err(|e| Error::io(&csv, e))?;
    fs::write(&csv, buf).map_err(|e| Error::io(&csv, e))?;
    let final_total = log.steps.last().map_or(f64::NAN, |s| s.report.total);
    println!(
        "stage-1: {} steps over {} samples, final total loss {final_total:.6}; checkpoint {}",
        log.steps.len(),
        dataset.len(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_pseudo(args: &RunArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let ckpt = args.run_dir.join("stage1.ckpt");
    if !ckpt.is_file() {
        return Err(Error::Config(format!(
            "no stage1.ckpt under {}; run train first",
            args.run_dir.display()
        )));
    }
    let settings = build_settings(&args.settings)?;
    prepare_run_dir(&args.run_dir, &settings)?;
    let params = load_checkpoint(&ckpt)?;
    let dataset = load_dataset(&args.manifest, settings.main_side, &settings.modalities)?;
    let labels = generate_pseudo_labels(&params, &dataset)?;
    let dir = args.run_dir.join("labels");
    write_pseudo_labels(&labels, &dir)?;
    println!("wrote {} labels under {}", labels.len(), dir.display());
    Ok(())
}

fn cmd_retrain(args: &RunArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let labels_dir = args.run_dir.join("labels");
    if !labels_dir.join("provenance.txt").is_file() {
        return Err(Error::Config(format!(
            "no labels under {}; run pseudo first",
            args.run_dir.display()
        )));
    }
    let settings = build_settings(&args.settings)?;
    let config = settings.train_config();
    config.validate()?;
    prepare_run_dir(&args.run_dir, &settings)?;
    let dataset = load_dataset(&args.manifest, config.main_side, &config.modalities)?;
    let labels = read_pseudo_labels(&labels_dir)?;
    let (params, losses) = train_stage2(&config, &dataset, &labels)?;
    let ckpt = args.run_dir.join("stage2.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "stage-2: {} epochs, final epoch loss {final_loss:.6}; checkpoint {}",
        losses.len(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let settings = build_settings(&args.settings)?;
    let dataset = load_dataset(&args.manifest, settings.main_side, &settings.modalities)?;
    let items: Vec<(String, Grid, Option<Grid>)> = if let Some(ckpt) = &args.checkpoint {
        require_file(ckpt, "checkpoint")?;
        let params = load_checkpoint(ckpt)?;
        let mut items = Vec::with_capacity(dataset.len());
        for s in &dataset {
            let fp = forward_pass(&params, &s.stack.rgb()).map_err(|e| Error::Sample {
                id: s.id.clone(),
                reason: e.to_string(),
            })?;
            items.push((s.id.clone(), fp.output().clone(), s.gt.clone()));
        }
        items
    } else {
        let dir = args.labels.as_ref().expect("clap enforces one source");
        let labels = read_pseudo_labels(dir)?;
        let by_id: HashMap<&str, &Grid> = labels.iter().map(|l| (l.id.as_str(), &l.grid)).collect();
        let mut items = Vec::with_capacity(dataset.len());
        for s in &dataset {
            let grid = by_id.get(s.id.as_str()).ok_or_else(|| Error::Sample {
                id: s.id.clone(),
                reason: format!("no label under {}", dir.display()),
            })?;
            items.push((s.id.clone(), (*grid).clone(), s.gt.clone()));
        }
        items
    };
    let report = evaluate_dataset(items)?;
    let mut buf = Vec::new();
    write_eval_report(&report, &mut buf).map_err(|e| Error::io(&args.out, e))?;
    fs::write(&args.out, buf).map_err(|e| Error::io(&args.out, e))?;
    println!(
        "evaluated {} samples: mean fbeta {:.4}, mae {:.4}, emeasure {:.4}; report {}",
        report.rows.len(),
        report.mean_fbeta,
        report.mean_mae,
        report.mean_emeasure,
        args.out.display()
    );
    Ok(())
}

/// Prediction samples at 1e-3 spacing strictly inside (0, 1).
fn default_prediction_grid() -> Vec<f64> {
    (1..1000).map(|i| i as f64 / 1000.0).collect()
}

fn cmd_landscape(args: &LandscapeArgs) -> Result<()> {
    let losses: Vec<LandscapeLoss> = split_list(&args.losses)
        .into_iter()
        .map(LandscapeLoss::from_name)
        .collect::<Result<_>>()?;
    if losses.is_empty() {
        return Err(Error::Config("need at least one landscape loss".into()));
    }
    let rhos: Vec<f64> = split_list(&args.rho)
        .into_iter()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("rho: cannot parse \"{v}\"")))
        })
        .collect::<Result<_>>()?;
    let samples = default_prediction_grid();
    let mut rows = Vec::new();
    for loss in losses {
        rows.extend(landscape_export(loss, &rhos, &samples)?);
    }
    let mut buf = Vec::new();
    write_landscape_csv(&rows, &mut buf).map_err(|e| Error::io(&args.out, e))?;
    fs::write(&args.out, buf).map_err(|e| Error::io(&args.out, e))?;
    println!("wrote {} landscape rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 4,
        Error::Io { .. } => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gendata(args) => cmd_gendata(args),
        Command::Train(args) => cmd_train(args),
        Command::Pseudo(args) => cmd_pseudo(args),
        Command::Retrain(args) => cmd_retrain(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Landscape(args) => cmd_landscape(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
