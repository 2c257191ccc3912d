mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdc_core::losses::Mode;
use sdc_core::metrics::write_bin_csv;
use sdc_core::synthcells::{gen_dataset, Manifest, Split, MANIFEST_FILE};
use sdc_core::theory::{bound_sweep, mc_verify_prop2, ErrorProfile, McConfig, SplitInstance};
use sdc_core::toymodel::{evaluate, evaluate_oracle, fit, load_samples, write_loss_curve, SdcModel, TrainConfig};
use sdc_core::SdcError;
use serde_json::json;

use config::{AllDefaults, DataConfig, TheoryConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;
const EXIT_BOUND_VIOLATION: u8 = 5;

/// Closed-set noise multiplier used by `--inject-fault`.
const FAULT_NOISE_SCALE: f64 = 3.0;

#[derive(Parser)]
#[command(name = "sdc", version, about = "Spatial divide-and-conquer counting experiments")]
struct Cli {
    /// Print every subcommand's default configuration as JSON and exit.
    #[arg(long)]
    print_default_config: bool,

    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cell dataset.
    GenData(GenDataArgs),
    /// Train the toy counting model on the training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground-truth oracle) on one split.
    Eval(EvalArgs),
    /// Check the division bounds and the closed-set error bound.
    VerifyTheory(TheoryArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Seeds the training split; the test split uses seed + 1.
    #[arg(long, env = "SDC_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest, or the directory holding it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    cmax: Option<f64>,
    #[arg(long, env = "SDC_SEED")]
    seed: Option<u64>,
    /// Directory receiving the checkpoint and loss curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Divisions to run (default: the checkpoint's training depth, or 1 for the oracle).
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Replace the model with ground-truth counts and redistribution maps.
    #[arg(long, conflicts_with = "ckpt")]
    oracle: bool,
    /// Width of the ground-truth count bins in the per-bin curves.
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Gaussian σ of the ground-truth density.
    #[arg(long, default_value_t = 1.0)]
    gt_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulated draws for the closed-set error bound.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, env = "SDC_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Inflate the closed-set noise so the error bound must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// A failed run: exit status plus the message printed to stderr.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<SdcError> for Failure {
    fn from(e: SdcError) -> Self {
        let code = match e {
            SdcError::NonFinite(_) => EXIT_NON_FINITE,
            SdcError::Io(_) | SdcError::Json(_) | SdcError::Csv(_) | SdcError::Format(_) => EXIT_IO,
            SdcError::DimensionMismatch { .. }
            | SdcError::Indivisible { .. }
            | SdcError::InvalidValue(_)
            | SdcError::Precondition(_) => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::io(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn open_manifest(data: &Path) -> Result<Manifest, Failure> {
    let path = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    Manifest::load(&path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> Outcome {
    let mut cfg: DataConfig = config::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    cfg.train.validate()?;
    cfg.test.validate()?;
    fs::create_dir_all(&args.out)?;
    gen_dataset(&cfg.train, &cfg.test, &args.out)?;
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let mut cfg: TrainConfig = config::load(args.config.as_deref())?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(stages) = args.stages {
        cfg.stages = stages;
    }
    if let Some(c_max) = args.cmax {
        cfg.c_max = c_max;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = open_manifest(&args.data)?;
    if f64::from(manifest.train.count_law.hi) > cfg.c_max {
        eprintln!(
            "warning: training counts reach {} per sub-region, above c_max {}",
            manifest.train.count_law.hi, cfg.c_max
        );
    }
    let samples = load_samples(&manifest, Split::Train, cfg.stages, cfg.gt_sigma)?;
    let (model, curve) = fit(&samples, &cfg)?;

    fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("checkpoint.sdc");
    model.save(&ckpt)?;
    let mut loss = create(&args.out.join("loss_curve.csv"))?;
    write_loss_curve(&mut loss, &curve)?;
    loss.flush()?;
    write_json(&args.out.join("train_config.json"), &cfg)?;
    if let Some(last) = curve.last() {
        println!("epochs {} final loss {:.6}", curve.len(), last.total);
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    if !(args.bin_width > 0.0 && args.bin_width.is_finite()) {
        return Err(Failure::config(format!("bin width must be positive, got {}", args.bin_width)));
    }
    let manifest = open_manifest(&args.data)?;
    let model = match &args.ckpt {
        Some(path) => {
            Some(SdcModel::load(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let stages = match (&model, args.stages) {
        (_, Some(n)) => n,
        (Some(m), None) => m.stages(),
        (None, None) => 1,
    };
    if let Some(m) = &model {
        if m.stages() != stages {
            eprintln!(
                "warning: checkpoint was trained with {} stage(s); running {stages}",
                m.stages()
            );
        }
    }
    let samples = load_samples(&manifest, args.split, stages, args.gt_sigma)?;
    let evaluation = match &model {
        Some(m) => evaluate(m, &samples, stages, args.bin_width)?,
        None => evaluate_oracle(&samples, stages, args.bin_width)?,
    };

    fs::create_dir_all(&args.out)?;
    let mut report = create(&args.out.join("report.csv"))?;
    evaluation.report.write_csv(&mut report)?;
    report.flush()?;
    let mut bins = create(&args.out.join("bins.csv"))?;
    write_bin_csv(&mut bins, &evaluation.report.bins)?;
    bins.flush()?;
    println!(
        "{} images, count MAE {:.6}, MSE {:.6}",
        evaluation.report.images, evaluation.report.mae, evaluation.report.mse
    );
    Ok(())
}

fn verify_theory(args: TheoryArgs) -> Outcome {
    let mut cfg: TheoryConfig = config::load(args.config.as_deref())?;
    if let Some(trials) = args.trials {
        cfg.split.trials = trials;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let checks = bound_sweep(cfg.instances, cfg.grid_side, cfg.seed)?;
    let violations = checks.iter().filter(|c| !c.holds()).count();

    let split = SplitInstance::new(cfg.split.c_star, cfg.split.parts.clone(), cfg.split.c_max)?;
    let profile = ErrorProfile::linear(cfg.split.slope, cfg.split.c_star)?;
    let mc = McConfig {
        trials: cfg.split.trials,
        seed: cfg.seed,
        closed_noise_scale: if args.inject_fault { FAULT_NOISE_SCALE } else { 1.0 },
    };
    let report = mc_verify_prop2(&profile, &split, &mc)?;

    fs::create_dir_all(&args.out)?;
    let path = args.out.join("division_bounds.csv");
    let mut csv_out = create(&path)?;
    writeln!(csv_out, "id,n_min,oracle,n_max")?;
    for c in &checks {
        writeln!(csv_out, "{},{},{},{}", c.id, c.n_min, c.oracle, c.n_max)?;
    }
    csv_out.flush()?;
    let summary = json!({
        "config": cfg,
        "division_bounds": { "instances": checks.len(), "violations": violations },
        "split_error": { "report": report, "rel_sigma": report.rel_sigma(), "holds": report.holds() },
    });
    write_json(&args.out.join("theory.json"), &summary)?;

    println!("division bounds: {violations} violation(s) over {} grids", checks.len());
    println!(
        "split error: closed {:.5} bound {:.5} open {:.5} ({})",
        report.emp_closed,
        report.bound,
        report.emp_open,
        if report.holds() { "holds" } else { "violated" }
    );
    if violations > 0 || !report.holds() {
        return Err(Failure {
            code: EXIT_BOUND_VIOLATION,
            message: "a theoretical bound was violated".into(),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if cli.print_default_config {
        let text = serde_json::to_string_pretty(&AllDefaults::default()).map_err(|e| Failure::io(e.to_string()))?;
        return match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        };
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    match cli.command {
        Some(Command::GenData(a)) => gen_data(a),
        Some(Command::Train(a)) => train(a),
        Some(Command::Eval(a)) => eval(a),
        Some(Command::VerifyTheory(a)) => verify_theory(a),
        None => Err(Failure::config("no subcommand given; see --help")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
