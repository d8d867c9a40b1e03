//! The `fpdm` command line.
//!
//! Exit codes: 0 on success (including `--help`), 1 for usage errors and
//! invalid settings, 2 for runtime failures such as unreadable files or a
//! failed gradient check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_image, make_dataset, save_image, DatasetManifest, DistortionRanges, ImageFormat};
use crate::error::{Error, Result};
use crate::gradcheck::{run_named, GradCheckConfig, GradReport, SUITE};
use crate::metrics::{LossConfig, MetricsReport, SsimConfig};
use crate::model::{ModelConfig, ModelGraph};
use crate::training::{
    default_phase_boundary, evaluate, evaluate_dirs, predict_image, train, Checkpoint, LogRow,
    TrainConfig,
};

/// Name of the checkpoint `train` writes after the last epoch.
pub const FINAL_CHECKPOINT: &str = "final.fpdm";
pub const THREADS_ENV: &str = "FPDM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fpdm", version, about = "Fingerprint denoising and inpainting")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic clean/distorted fingerprint pairs.
    GenerateData(GenerateArgs),
    /// Train a network on a generated or loaded dataset.
    Train(TrainArgs),
    /// Clean one image or every image in a directory.
    Infer(InferArgs),
    /// MSE, PSNR and SSIM of predictions against references.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print the layer table and parameter count of a network.
    Summary(SummaryArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Flat `key = value` file; keys are long flag names. Explicit flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Png,
    Pgm,
}

impl From<FormatArg> for ImageFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Png => ImageFormat::Png,
            FormatArg::Pgm => ImageFormat::Pgm,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    #[value(name = "mnet-b")]
    MnetB,
    #[value(name = "mnet-a")]
    MnetA,
    Unet,
    #[value(name = "unet-a")]
    UnetA,
}

impl ArchArg {
    fn name(self) -> &'static str {
        match self {
            ArchArg::MnetB => "mnet-b",
            ArchArg::MnetA => "mnet-a",
            ArchArg::Unet => "unet",
            ArchArg::UnetA => "unet-a",
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Png)]
    format: FormatArg,
    /// Override a distortion range, e.g. `blur_sigma=0..2`. Repeatable.
    #[arg(long = "range", value_name = "NAME=LO..HI")]
    ranges: Vec<String>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ArchArg::MnetB)]
    arch: ArchArg,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Feature maps at the first level.
    #[arg(long, default_value_t = 64)]
    base: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let (arch, bn_order) = ModelConfig::parse_variant(self.arch.name())?;
        Ok(ModelConfig {
            arch,
            bn_order,
            depth: self.depth,
            base_features: self.base,
            dropout_p: self.dropout,
            ..ModelConfig::default()
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 75)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr1: f64,
    #[arg(long, default_value_t = 0.01)]
    lr2: f64,
    #[arg(long, default_value_t = 0.75)]
    momentum1: f64,
    #[arg(long, default_value_t = 0.95)]
    momentum2: f64,
    /// First epoch of the second phase [default: min(50, 2·epochs/3)].
    #[arg(long)]
    phase_boundary: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    decay: f64,
    /// Weight of the MS-SSIM term in the loss.
    #[arg(long, default_value_t = 0.85)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only print the summary line of each epoch.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted images.
    #[arg(long, requires = "reference", conflicts_with_all = ["model", "data"])]
    pred: Option<PathBuf>,
    /// Directory of reference images, matched by file stem.
    #[arg(long = "ref", id = "reference")]
    reference: Option<PathBuf>,
    /// Checkpoint to run over `--data`.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    /// Dataset directory or manifest CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the per-image report here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check name or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct SummaryArgs {
    /// Summarise a checkpoint instead of a fresh network.
    #[arg(long, conflicts_with_all = ["arch", "depth", "base", "dropout"])]
    model: Option<PathBuf>,
    #[command(flatten)]
    net: ModelArgs,
    #[arg(long, default_value_t = 368)]
    height: usize,
    #[arg(long, default_value_t = 496)]
    width: usize,
    #[command(flatten)]
    config: ConfigArg,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {}", msg);
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {}", msg);
        return 1;
    }
    let outcome = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Summary(a) => summary(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg);
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            2
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{} must be a positive integer, got {:?}", THREADS_ENV, value))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Splices `--key value` pairs read from `--config FILE` in front of the
/// explicit flags, so later (explicit) occurrences override them.
fn expand_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let pos = argv.iter().position(|a| a == "--config");
    let inline = argv.iter().position(|a| a.to_string_lossy().starts_with("--config="));
    let (idx, path, consumed) = match (pos, inline) {
        (Some(i), _) => match argv.get(i + 1) {
            Some(p) => (i, PathBuf::from(p), 2),
            None => return Ok(argv),
        },
        (None, Some(i)) => {
            let s = argv[i].to_string_lossy().into_owned();
            (i, PathBuf::from(&s["--config=".len()..]), 1)
        }
        (None, None) => return Ok(argv),
    };
    // Subcommand sits right after the program name.
    if argv.len() < 2 || idx < 2 {
        return Ok(argv);
    }
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config file {}: {}", path.display(), e))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format!("{}:{}: expected `key = value`", path.display(), n + 1)
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(format!("{}:{}: config files cannot nest", path.display(), n + 1));
        }
        match value {
            "true" => injected.push(OsString::from(format!("--{}", key))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{}", key)));
                injected.push(OsString::from(value));
            }
        }
    }
    let mut out: Vec<OsString> = argv[..2].to_vec();
    out.extend(injected);
    out.extend(argv[2..idx].iter().cloned());
    out.extend(argv[idx + consumed..].iter().cloned());
    Ok(out)
}

fn generate(a: GenerateArgs) -> CmdResult {
    let mut ranges = DistortionRanges::default();
    for item in &a.ranges {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--range expects NAME=LO..HI, got {:?}", item)))?;
        ranges.set(name.trim(), value)?;
    }
    ranges.validate()?;
    let manifest = make_dataset(a.count, a.seed, &a.out, &ranges, a.format.into())?;
    println!(
        "wrote {} pairs to {} (seed {})",
        manifest.len(),
        a.out.display(),
        a.seed
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let model = a.model.config()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr_phase1: a.lr1,
        lr_phase2: a.lr2,
        momentum_phase1: a.momentum1,
        momentum_phase2: a.momentum2,
        phase_boundary: a.phase_boundary.unwrap_or_else(|| default_phase_boundary(a.epochs)),
        decay: a.decay,
        seed: a.seed,
        loss: LossConfig {
            delta: a.delta,
            ..LossConfig::default()
        },
        model,
    };
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.data)?;
    if !manifest.has_clean() {
        return Err(Failure::Runtime(format!(
            "{}: training needs clean images for every pair",
            a.data.display()
        )));
    }
    println!(
        "training {} on {} pairs: {} epochs, batch {}, phase boundary {}",
        cfg.model.variant_name(),
        manifest.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.phase_boundary
    );
    let quiet = a.quiet;
    let mut epoch_sum = (0usize, 0.0f64, 0usize);
    let mut progress = |row: &LogRow| {
        if !quiet {
            println!(
                "epoch {:>4} step {:>6} lr {:.6e} loss {:.6}",
                row.epoch, row.step, row.lr, row.loss
            );
        }
        if row.epoch != epoch_sum.0 && epoch_sum.2 > 0 {
            println!("epoch {} mean loss {:.6}", epoch_sum.0, epoch_sum.1 / epoch_sum.2 as f64);
            epoch_sum = (row.epoch, 0.0, 0);
        }
        epoch_sum.0 = row.epoch;
        epoch_sum.1 += row.loss;
        epoch_sum.2 += 1;
    };
    let outcome = train::<f32>(&cfg, &manifest, Some(&a.out), &mut progress)?;
    if epoch_sum.2 > 0 {
        println!("epoch {} mean loss {:.6}", epoch_sum.0, epoch_sum.1 / epoch_sum.2 as f64);
    }
    let final_path = a.out.join(FINAL_CHECKPOINT);
    outcome.checkpoint.save(&final_path)?;
    println!("saved {}", final_path.display());
    Ok(())
}

fn load_model(path: &Path) -> std::result::Result<ModelGraph<f32>, Failure> {
    let ckpt = Checkpoint::<f32>::load(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    ckpt.build_model().map_err(|e| Failure::Runtime(e.to_string()))
}

fn infer(a: InferArgs) -> CmdResult {
    let mut model = load_model(&a.model)?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
            .map_err(|e| Error::io(&a.input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && ImageFormat::from_path(p).is_ok())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Failure::Runtime(format!("{} holds no images", a.input.display())));
        }
        files
    } else {
        vec![a.input.clone()]
    };
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    for path in &inputs {
        let image = load_image(path)?;
        let cleaned = predict_image(&mut model, &image)?;
        let name = path
            .file_name()
            .ok_or_else(|| Failure::Runtime(format!("{} has no file name", path.display())))?;
        let out = a.output.join(name);
        save_image(&cleaned, &out)?;
        println!("{} -> {}", path.display(), out.display());
    }
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!("{:<24} {:>12} {:>10} {:>8}", "id", "mse", "psnr_db", "ssim");
    for row in report.rows.iter().chain(std::iter::once(&report.mean)) {
        println!(
            "{:<24} {:>12.6} {:>10.4} {:>8.4}",
            row.id, row.mse, row.psnr_db, row.ssim
        );
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    let ssim = SsimConfig::default();
    let report = match (&a.pred, &a.reference, &a.model, &a.data) {
        (Some(pred), Some(reference), None, None) => evaluate_dirs(pred, reference, &ssim)?,
        (None, None, Some(model), Some(data)) => {
            let mut net = load_model(model)?;
            let manifest = DatasetManifest::load(data)?;
            evaluate(&mut net, &manifest, &ssim)?
        }
        _ => {
            return Err(Failure::Usage(
                "evaluate needs either --pred and --ref, or --model and --data".into(),
            ))
        }
    };
    print_report(&report);
    if let Some(out) = &a.out {
        report.save_csv(out)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let names: Vec<&str> = if a.op == "all" {
        SUITE.to_vec()
    } else if SUITE.contains(&a.op.as_str()) {
        vec![a.op.as_str()]
    } else {
        return Err(Failure::Usage(format!(
            "unknown op {:?}\nusage: fpdm gradcheck --op <all|{}>",
            a.op,
            SUITE.join("|")
        )));
    };
    println!("{}", GradReport::table_header());
    let mut failed = Vec::new();
    for name in names {
        let report = run_named(name, &cfg)?;
        println!("{}", report);
        let _ = std::io::stdout().flush();
        if !report.passed {
            failed.push(report.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn summary(a: SummaryArgs) -> CmdResult {
    let model = match &a.model {
        Some(path) => load_model(path)?,
        None => {
            let cfg = ModelConfig {
                input_height: a.height,
                input_width: a.width,
                ..a.net.config()?
            };
            ModelGraph::<f32>::build(&cfg, 0)?
        }
    };
    println!("{}", model.summary());
    Ok(())
}
