//! `vat` command-line driver.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use vat::eval::plots::roc_chart;
use vat::eval::report::{self, Pipeline};
use vat::eval::{sweeps, visualize};
use vat::experiment::{self, Corpus, ExperimentConfig, PretrainSummary, Stubs};
use vat::nets::translator::TranslatorConfig;
use vat::nets::{FrozenRestorer, VatTranslator};
use vat::oracle;
use vat::synthdata::SplitName;
use vat::{ImageTensor, VatError};

use crate::manifest::{InputFingerprint, RunManifest, MANIFEST_FILE};

/// Largest admissible residual of the decomposition oracle.
const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "vat", version, about = "Variational translator experiments on synthetic degraded images")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML or JSON experiment config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, copied into every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Generated-data directory (defaults to `<out>/data`).
    #[arg(long, global = true, env = "VAT_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Single-threaded kernels for bit-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Write the pseudo-label table during training.
    #[arg(long, global = true)]
    dump_pseudo: bool,
    /// Overrides `train.epochs`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Overrides `train.max_iterations`.
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the frozen classifier and restorer stubs and the reference bank.
    Pretrain,
    /// Train the translator against the pretrained stubs.
    Train,
    /// Evaluate degraded-direct, restored-direct and translated pipelines.
    Eval {
        /// Translator checkpoint (defaults to `<out>/train/vat.safetensors`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of test images rendered as gate panels.
        #[arg(long, default_value_t = 4)]
        panels: usize,
    },
    /// Translate PNG images (files or directories).
    Translate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restorer checkpoint (defaults to `<out>/models/restorer.safetensors`).
        #[arg(long)]
        restorer: Option<PathBuf>,
        /// Also write degraded | restored | translated panels.
        #[arg(long)]
        panel: bool,
    },
    /// Check the variational decomposition on random discrete joints.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        x_size: usize,
        #[arg(long, default_value_t = 8)]
        y_size: usize,
    },
    /// Train one translator per restorer snapshot.
    SweepRestoration,
    /// Train one translator per base width.
    SweepSize {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 12])]
        dims: Vec<usize>,
    },
    /// Train the six ablation rows.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Translate { .. } => "translate",
            Command::OracleCheck { .. } => "oracle-check",
            Command::SweepRestoration => "sweep-restoration",
            Command::SweepSize { .. } => "sweep-size",
            Command::Ablate => "ablate",
        }
    }
}

/// Resolved settings shared by all commands.
struct Ctx {
    command: &'static str,
    config: ExperimentConfig,
    out: PathBuf,
    data_root: PathBuf,
    deterministic: bool,
    started: Instant,
}

impl Ctx {
    fn new(global: &GlobalArgs, command: &'static str) -> Result<Self> {
        // A manifest from an earlier run is accepted as a config: its
        // snapshot is the merged configuration of that run.
        let mut config = match &global.config {
            Some(path) if path.file_name().is_some_and(|n| n == MANIFEST_FILE) => RunManifest::read(path)?.config,
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let seed = global.seed.unwrap_or(config.seed);
        config = config.with_seed(seed);
        if global.dump_pseudo {
            config.train.dump_pseudo = true;
        }
        if let Some(e) = global.epochs {
            config.train.epochs = e;
        }
        if global.max_iterations.is_some() {
            config.train.max_iterations = global.max_iterations;
        }
        config.validate()?;
        Ok(Self {
            command,
            config,
            out: global.out.clone(),
            data_root: global.data_root.clone().unwrap_or_else(|| global.out.join("data")),
            deterministic: global.deterministic,
            started: Instant::now(),
        })
    }

    fn manifest(&self, inputs: Vec<InputFingerprint>, outputs: Vec<PathBuf>, notes: Vec<String>) -> Result<RunManifest> {
        Ok(RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint()?,
            seed: self.config.seed,
            deterministic: self.deterministic,
            data_root: self.data_root.clone(),
            inputs,
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            notes,
        })
    }

    fn finish(&self, dir: &Path, inputs: Vec<InputFingerprint>, outputs: Vec<PathBuf>, notes: Vec<String>) -> Result<()> {
        let path = self.manifest(inputs, outputs, notes)?.write(dir)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.data_root).with_context(|| format!("loading data from {} (run gen-data first)", self.data_root.display()))
    }

    fn split_inputs(&self, splits: &[SplitName]) -> Result<Vec<InputFingerprint>> {
        splits.iter().map(|&s| InputFingerprint::split(&self.data_root, s)).collect()
    }

    fn stub_inputs(&self) -> Result<Vec<InputFingerprint>> {
        Ok(vec![
            InputFingerprint::file("classifier", &experiment::classifier_path(&self.out))?,
            InputFingerprint::file("restorer", &experiment::restorer_path(&self.out))?,
            InputFingerprint::file("bank", &experiment::bank_path(&self.out))?,
        ])
    }

    fn fingerprint(&self) -> Result<String> {
        Ok(self.config.fingerprint()?)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    experiment::ensure_data(&ctx.config.data, &ctx.data_root)?;
    let inputs = ctx.split_inputs(&SplitName::ALL)?;
    let outputs = SplitName::ALL.iter().map(|s| ctx.data_root.join(s.dir_name())).collect();
    ctx.finish(&ctx.data_root, inputs, outputs, vec![])
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let (_, summary) = experiment::pretrain_stubs(&ctx.config, &corpus, &ctx.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    let inputs = ctx.split_inputs(&[
        SplitName::CleanTrain,
        SplitName::CleanTest,
        SplitName::DegradedTest,
        SplitName::RestorationPretrain,
        SplitName::RestorationVal,
    ])?;
    let mut outputs = vec![
        experiment::classifier_path(&ctx.out),
        experiment::restorer_path(&ctx.out),
        experiment::bank_path(&ctx.out),
    ];
    outputs.extend(summary.restorer.snapshots.iter().map(|(p, _)| p.clone()));
    ctx.finish(&experiment::models_dir(&ctx.out), inputs, outputs, vec![])
}

/// Stubs must exist before anything else is loaded, so a missing checkpoint
/// is reported by path.
fn load_all(ctx: &Ctx) -> Result<(Stubs, Corpus)> {
    let stubs = experiment::load_stubs(&ctx.out)?;
    let recorded = experiment::models_dir(&ctx.out).join(manifest::MANIFEST_FILE);
    if recorded.exists() {
        RunManifest::read(&recorded)?
            .verify()
            .with_context(|| format!("stubs in {} were pretrained on different data", ctx.out.display()))?;
    }
    Ok((stubs, ctx.corpus()?))
}

fn train(ctx: &Ctx) -> Result<()> {
    let (stubs, corpus) = load_all(ctx)?;
    let test = experiment::test_set(&stubs, &corpus)?;
    let set = experiment::training_set(&ctx.config.train, &stubs, &corpus)?;
    let dir = ctx.out.join("train");
    let validation = experiment::validation_set(&test);
    let outcome = vat::trainer::train(&ctx.config.train, &set, &stubs.restorer, &stubs.classifier, Some(&validation), &dir)?;
    println!(
        "{}",
        serde_json::json!({
            "iterations": outcome.record.iterations,
            "kept_fraction": outcome.record.kept_fraction,
            "checkpoint": outcome.record.checkpoint,
        })
    );
    let mut inputs = ctx.stub_inputs()?;
    inputs.extend(ctx.split_inputs(&[SplitName::CleanTrain, SplitName::DegradedTrain, SplitName::DegradedTest])?);
    let outputs = vec![dir.join("history.csv"), dir.join("run.json"), outcome.record.checkpoint.clone()];
    ctx.finish(&dir, inputs, outputs, vec![])
}

fn default_checkpoint(ctx: &Ctx, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| ctx.out.join("train").join("vat.safetensors"))
}

fn eval(ctx: &Ctx, checkpoint: &Option<PathBuf>, panels: usize) -> Result<()> {
    let (stubs, corpus) = load_all(ctx)?;
    let ckpt = default_checkpoint(ctx, checkpoint);
    let (_, vat) = VatTranslator::load(&ckpt, DType::F32)?;
    let test = experiment::test_set(&stubs, &corpus)?;
    let fp = ctx.fingerprint()?;
    let (report, scores) = report::evaluate(&stubs.classifier, Some(&vat), &test, ctx.config.seed, &fp)?;
    let dir = ctx.out.join("eval");
    report.write(&dir, "eval")?;
    let mut outputs = vec![dir.join("eval.csv"), dir.join("eval.json")];
    for class in 0..stubs.classifier.net.config().classes {
        let path = dir.join(format!("roc_class{class}.svg"));
        roc_chart(&scores, &test.labels, class)?.write(&path)?;
        outputs.push(path);
    }
    for i in 0..panels.min(test.degraded.len()) {
        let path = dir.join(format!("gate_panel{i}.png"));
        visualize::gate_heatmap(&vat, &test.degraded[i], &test.restored[i], 4, &path)?;
        outputs.push(path);
    }
    for p in &report.pipelines {
        println!("{} accuracy {:.4} auc {:.4} psnr {:.2}", p.pipeline, p.accuracy, p.auc, p.psnr);
    }
    let mut inputs = ctx.stub_inputs()?;
    inputs.push(InputFingerprint::file("translator", &ckpt)?);
    inputs.extend(ctx.split_inputs(&[SplitName::DegradedTest])?);
    ctx.finish(&dir, inputs, outputs, vec![])
}

fn png_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no PNG inputs found");
    }
    Ok(files)
}

fn translate(ctx: &Ctx, inputs: &[PathBuf], checkpoint: &Option<PathBuf>, restorer: &Option<PathBuf>, panel: bool) -> Result<()> {
    let ckpt = default_checkpoint(ctx, checkpoint);
    let rpath = restorer.clone().unwrap_or_else(|| experiment::restorer_path(&ctx.out));
    let restorer = FrozenRestorer::load(&rpath, DType::F32)?;
    let (_, vat) = VatTranslator::load(&ckpt, DType::F32)?;
    let files = png_inputs(inputs)?;
    let dir = ctx.out.join("translated");
    fs::create_dir_all(&dir)?;
    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    let mut fingerprints = vec![
        InputFingerprint::file("translator", &ckpt)?,
        InputFingerprint::file("restorer", &rpath)?,
    ];
    for (k, file) in files.iter().enumerate() {
        let img = ImageTensor::load_png(file).with_context(|| format!("reading {}", file.display()))?;
        let (h, w, _) = img.dims();
        let padded = img.pad_edge(TranslatorConfig::DOWNSAMPLE);
        if padded.dims() != img.dims() {
            notes.push(format!(
                "{}: padded {h}x{w} to {}x{} and cropped back",
                file.display(),
                padded.height(),
                padded.width()
            ));
        }
        let restored = restorer.restore(std::slice::from_ref(&padded))?.remove(0);
        let translated = vat.translate(std::slice::from_ref(&padded), std::slice::from_ref(&restored), DType::F32)?.remove(0);
        let translated = translated.crop(h, w)?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{k}"));
        let out = dir.join(format!("{stem}_translated.png"));
        translated.save_png(&out)?;
        outputs.push(out);
        if panel {
            let restored = restored.crop(h, w)?;
            let path = dir.join(format!("{stem}_panel.png"));
            visualize::hconcat(&[img, restored, translated], 2)?.save_png(&path)?;
            outputs.push(path);
        }
        fingerprints.push(InputFingerprint::file(format!("input{k}"), file)?);
    }
    println!("translated {} image(s) into {}", files.len(), dir.display());
    ctx.finish(&dir, fingerprints, outputs, notes)
}

fn oracle_check(ctx: &Ctx, trials: usize, x_size: usize, y_size: usize) -> Result<()> {
    let report = oracle::verify_decomposition(trials, (x_size, y_size), ctx.config.seed)?;
    let dir = ctx.out.join("oracle");
    let path = dir.join("oracle.json");
    write_json(&report, &path)?;
    println!("{}", serde_json::to_string(&report)?);
    ctx.finish(&dir, vec![], vec![path], vec![])?;
    if !(report.max_residual < ORACLE_TOLERANCE) || !report.stable || report.resolved_sign.is_none() {
        bail!(VatError::Precondition(format!(
            "decomposition check failed: max_residual {:e}, stable {}",
            report.max_residual, report.stable
        )));
    }
    Ok(())
}

fn sweep_restoration(ctx: &Ctx) -> Result<()> {
    let (stubs, corpus) = load_all(ctx)?;
    let summary_path = experiment::models_dir(&ctx.out).join("pretrain.json");
    let summary: PretrainSummary = serde_json::from_str(
        &fs::read_to_string(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?,
    )?;
    let mut checkpoints: Vec<PathBuf> = summary.restorer.snapshots.iter().map(|(p, _)| p.clone()).collect();
    checkpoints.push(experiment::restorer_path(&ctx.out));
    let dir = ctx.out.join("sweep-restoration");
    let sweep = sweeps::sweep_restoration_quality(&checkpoints, &ctx.config.train, &stubs, &corpus, &ctx.fingerprint()?, &dir)?;
    for p in &sweep.points {
        println!(
            "psnr {:.2} restored-direct {:.4} vat {:.4}",
            p.restorer_psnr, p.restored_direct_accuracy, p.vat_accuracy
        );
    }
    println!("spearman vat {:.3} restored-direct {:.3}", sweep.spearman_vat, sweep.spearman_restored);
    let mut inputs = ctx.stub_inputs()?;
    for (k, c) in checkpoints.iter().enumerate() {
        inputs.push(InputFingerprint::file(format!("restorer{k}"), c)?);
    }
    let outputs = ["restoration_sweep.csv", "restoration_sweep.json", "restoration_sweep.svg"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    ctx.finish(&dir, inputs, outputs, vec![])
}

fn sweep_size(ctx: &Ctx, dims: &[usize]) -> Result<()> {
    let (stubs, corpus) = load_all(ctx)?;
    let test = experiment::test_set(&stubs, &corpus)?;
    let set = experiment::training_set(&ctx.config.train, &stubs, &corpus)?;
    let dir = ctx.out.join("sweep-size");
    let sweep = sweeps::sweep_translator_size(dims, &ctx.config.train, &stubs, &set, &test, &ctx.fingerprint()?, &dir)?;
    for p in &sweep.points {
        println!("base_dim {} parameters {} accuracy {:.4}", p.base_dim, p.parameters, p.accuracy);
    }
    let outputs = ["size_sweep.csv", "size_sweep.json", "size_sweep.svg"].iter().map(|f| dir.join(f)).collect();
    ctx.finish(&dir, ctx.stub_inputs()?, outputs, vec![])
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let (stubs, corpus) = load_all(ctx)?;
    let test = experiment::test_set(&stubs, &corpus)?;
    let set = experiment::training_set(&ctx.config.train, &stubs, &corpus)?;
    let dir = ctx.out.join("ablation");
    let rows = sweeps::ablation_rows();
    let table = sweeps::ablation_grid(&ctx.config.train, &rows, &stubs, &set, &test, &ctx.fingerprint()?, &dir)?;
    println!(
        "degraded-direct {:.4} restored-direct {:.4}",
        table.degraded_direct_accuracy, table.restored_direct_accuracy
    );
    for r in &table.rows {
        println!("{:<24} accuracy {:.4} auc {:.4}", r.name, r.accuracy, r.auc);
    }
    ctx.finish(
        &dir,
        ctx.stub_inputs()?,
        vec![dir.join("ablation.csv"), dir.join("ablation.json")],
        vec![format!("pipeline {} per row", Pipeline::VatTranslated)],
    )
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.global.deterministic {
        // Read by the tensor backend when its thread pool first starts.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let ctx = Ctx::new(&cli.global, cli.command.name())?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pretrain => pretrain(&ctx),
        Command::Train => train(&ctx),
        Command::Eval { checkpoint, panels } => eval(&ctx, checkpoint, *panels),
        Command::Translate {
            inputs,
            checkpoint,
            restorer,
            panel,
        } => translate(&ctx, inputs, checkpoint, restorer, *panel),
        Command::OracleCheck { trials, x_size, y_size } => oracle_check(&ctx, *trials, *x_size, *y_size),
        Command::SweepRestoration => sweep_restoration(&ctx),
        Command::SweepSize { dims } => sweep_size(&ctx, dims),
        Command::Ablate => ablate(&ctx),
    }
}

/// Stable machine-readable name of the failure.
fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.chain().find_map(|e| e.downcast_ref::<VatError>()) {
        Some(VatError::MissingCheckpoint(_)) => "missing_checkpoint",
        Some(VatError::DatasetMissing(_)) => "dataset_missing",
        Some(VatError::FingerprintMismatch { .. }) => "fingerprint_mismatch",
        Some(VatError::Config(_)) => "config",
        Some(VatError::Precondition(_)) => "precondition",
        Some(VatError::NonFiniteLoss { .. }) => "non_finite_loss",
        Some(VatError::Io { .. }) => "io",
        Some(_) => "invalid_input",
        None => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": error_kind(&err),
                "command": cli.command.name(),
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
