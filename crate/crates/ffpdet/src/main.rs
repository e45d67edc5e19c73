use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffpdet::acceptance::{run_all, AcceptanceOptions};
use ffpdet::analyze::analyze;
use ffpdet::bench::{bench_inference, BenchOptions};
use ffpdet::checkpoint::load_detector;
use ffpdet::config::GlobalConfig;
use ffpdet::dataset::{batch_tensor, generate_dataset, Dataset};
use ffpdet::eval::{evaluate, EvalOptions};
use ffpdet::synth::{SceneSpec, Split};
use ffpdet::train::{train, TrainConfig, CHECKPOINT_FILE};
use ffpdet::viz::{dump_average_feature_map, tap_map, Tap};
use ffpdet::{CliError, Result};
use ffpdet_core::Precision;

/// Synthetic fault data, training, evaluation and analysis for the
/// lightweight NMS-free fault detector.
#[derive(Debug, Parser)]
#[command(name = "ffpdet", version)]
struct Cli {
    /// Every relative path is resolved against this directory.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// TOML file with `[detector]`, `[train]` and `[scene]` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print `key=value` lines instead of tables.
    #[arg(long, global = true)]
    machine: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Image-level CDR/FDR/MDR on the test split.
    Eval(EvalArgs),
    /// Inference latency, memory and model size.
    Bench(BenchArgs),
    /// Parameter counts and dilation-rate analysis.
    Analyze(AnalyzeArgs),
    /// Write a channel-averaged feature map as a grayscale image.
    Viz(VizArgs),
    /// Run the acceptance suite.
    Check(CheckArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene preset; the config file's `[scene]` is used when omitted.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    /// Output directory; defaults to the configured dataset path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Schedule {
    /// The configured `[train]` section.
    Config,
    /// Batch 8, learning rate 1e-3, 3000 iterations.
    Desk,
    /// 80K iterations, decay at 60K.
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "config")]
    schedule: Schedule,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Single-threaded, in-order pipeline; reproducible bit for bit.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the loss every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value = "run/checkpoint.bin")]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the dataset the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Image-level threshold; defaults to the decode threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Apply baseline NMS after decoding.
    #[arg(long)]
    with_nms: bool,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Write one record per detection to this file.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Exit 1 unless CDR >= 0.90 and FDR + MDR <= 0.10.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    with_nms: bool,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Feed NMS this many synthetic candidates per image.
    #[arg(long)]
    stress_boxes: Option<usize>,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value_t = 50)]
    images: usize,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Dilation rates, e.g. `1,2,5`.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = |s: &str| s.parse::<Tap>().map_err(|e| e.to_string()))]
    tap: Tap,
    /// Pyramid level (3, 4 or 5) for the attention taps.
    #[arg(long, default_value_t = 5)]
    level: usize,
    /// Test image index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "feature.pgm")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Scratch directory for the suite's datasets and runs.
    #[arg(long, default_value = "acceptance")]
    out: PathBuf,
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn load_config(cli: &Cli) -> Result<GlobalConfig> {
    let mut cfg = match &cli.config {
        Some(p) => GlobalConfig::load(&resolve(&cli.workdir, p))?,
        None => GlobalConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.scene.seed = seed;
    }
    Ok(cfg)
}

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("FFPDET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("FFPDET_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn emit(cli: &Cli, table: String, machine: String) {
    print!("{}", if cli.machine { machine } else { table });
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut spec = match &args.preset {
        Some(name) => SceneSpec::preset(name).ok_or_else(|| {
            CliError::Config(format!("unknown preset `{name}` ({})", SceneSpec::PRESETS.join(", ")))
        })?,
        None => cfg.scene.clone(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let (w, h) = (args.width.unwrap_or(spec.width), args.height.unwrap_or(spec.height));
    spec = spec.with_size(w, h);
    let out = resolve(&cli.workdir, args.out.as_deref().unwrap_or(&cfg.train.dataset));
    let (train, test) = generate_dataset(&spec, &out, args.train, args.test)?;
    let mut table = format!("dataset {}\n", out.display());
    let mut machine = String::new();
    for (name, b) in [("train", &train), ("test", &test)] {
        table.push_str(&format!(
            "{name:<6} images {:>6}  fault {:>6}  boxes missing {:>6}  broken {:>6}\n",
            b.images, b.fault_images, b.boxes_per_class[0], b.boxes_per_class[1]
        ));
        machine.push_str(&format!(
            "{name}.images={}\n{name}.fault={}\n{name}.missing={}\n{name}.broken={}\n",
            b.images, b.fault_images, b.boxes_per_class[0], b.boxes_per_class[1]
        ));
    }
    emit(cli, table, machine);
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let keep = cfg.train.clone();
    match args.schedule {
        Schedule::Config => {}
        Schedule::Desk => cfg.train = TrainConfig::desk(),
        Schedule::Full => cfg.train = TrainConfig::full(),
    }
    cfg.train.seed = keep.seed;
    cfg.train.dataset = keep.dataset;
    if let Some(v) = args.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = &args.dataset {
        cfg.train.dataset = v.clone();
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(p) = args.precision {
        cfg.train.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    let out = resolve(&cli.workdir, &args.out);
    let resume = args.resume.as_ref().map(|p| resolve(&cli.workdir, p));
    let every = args.log_every;
    let quiet = cli.machine;
    let outcome = train(&cfg, &cli.workdir, &out, resume.as_deref(), &mut |it, l| {
        if !quiet && every > 0 && (it + 1) % every == 0 {
            eprintln!(
                "iteration {:>6}  total {:.4}  cls {:.4}  l1 {:.4}  giou {:.4}",
                it + 1,
                l.total,
                l.cls,
                l.l1,
                l.giou
            );
        }
    })?;
    let table = format!(
        "iterations {}\ncheckpoint {}\nloss curve {}\nseconds    {:.1}\n",
        outcome.iterations,
        outcome.checkpoint.display(),
        outcome.loss_curve.display(),
        outcome.seconds
    );
    let mut machine = format!(
        "iterations={}\ncheckpoint={}\nloss_curve={}\n",
        outcome.iterations,
        outcome.checkpoint.display(),
        outcome.loss_curve.display()
    );
    if let Some(l) = outcome.last {
        machine.push_str(&format!("final_total={}\n", l.total));
    }
    emit(cli, table, machine);
    Ok(())
}

fn open_model(cli: &Cli, m: &ModelArgs) -> Result<(GlobalConfig, ffpdet_core::detector::Detector<f32>, PathBuf, PathBuf)> {
    let mut ckpt = resolve(&cli.workdir, &m.checkpoint);
    if ckpt.is_dir() {
        ckpt = ckpt.join(CHECKPOINT_FILE);
    }
    let (cfg, det) = load_detector::<f32>(&ckpt)?;
    let data = resolve(&cli.workdir, m.data.as_deref().unwrap_or(&cfg.train.dataset));
    Ok((cfg, det, ckpt, data))
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<bool> {
    let (_, det, _, data) = open_model(cli, &args.model)?;
    let test = Dataset::load(&data, Split::Test)?;
    let opts = EvalOptions {
        image_threshold: args.threshold,
        nms_iou: args.with_nms.then_some(args.nms_iou),
        ..EvalOptions::default()
    };
    let report = evaluate(&det, &test, &opts)?;
    if let Some(p) = &args.detections {
        let p = resolve(&cli.workdir, p);
        fs::write(&p, report.detections()).map_err(|e| CliError::io(&p, e))?;
    }
    emit(cli, report.table(), report.machine());
    let m = report.metrics;
    Ok(!args.check || (m.cdr >= 0.90 && m.fdr + m.mdr <= 0.10))
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let (_, det, ckpt, data) = open_model(cli, &args.model)?;
    let test = Dataset::load(&data, Split::Test)?;
    let opts = BenchOptions {
        with_nms: args.with_nms,
        nms_iou: args.nms_iou,
        stress_boxes: args.stress_boxes,
        warmup: args.warmup,
        repetitions: args.repetitions,
        images: args.images,
        seed: cli.seed.unwrap_or(0),
    };
    let report = if std::env::var_os("FFPDET_THREADS").is_some() {
        bench_inference(&det, &test, &ckpt, &opts)?
    } else {
        // timed runs are single-threaded unless asked otherwise
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(|| bench_inference(&det, &test, &ckpt, &opts))?
    };
    emit(cli, report.table(), report.machine());
    Ok(())
}

fn run_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let a = analyze(&cfg.detector, args.rates.as_deref())?;
    emit(cli, a.table(), a.machine());
    Ok(())
}

fn viz(cli: &Cli, args: &VizArgs) -> Result<()> {
    let (_, det, _, data) = open_model(cli, &args.model)?;
    let test = Dataset::load(&data, Split::Test)?;
    let sample = test.sample(args.index)?;
    let map = tap_map(&det, batch_tensor(&[&sample])?, args.tap, args.level)?;
    let out = resolve(&cli.workdir, &args.out);
    dump_average_feature_map(&map, &out)?;
    let s = map.shape();
    emit(
        cli,
        format!("wrote {} ({}x{} from {} channels)\n", out.display(), s[3], s[2], s[1]),
        format!("path={}\nwidth={}\nheight={}\nchannels={}\n", out.display(), s[3], s[2], s[1]),
    );
    Ok(())
}

fn check(cli: &Cli, args: &CheckArgs) -> Result<bool> {
    let mut opts = AcceptanceOptions::new(resolve(&cli.workdir, &args.out));
    if let Some(seed) = cli.seed {
        opts.seed = seed;
    }
    let outcomes = run_all(&opts, &mut |o| println!("{}", o.line()));
    Ok(outcomes.iter().all(|o| o.passed))
}

fn run(cli: &Cli) -> Result<bool> {
    threads_from_env()?;
    match &cli.command {
        Command::Synth(a) => synth(cli, a).map(|_| true),
        Command::Train(a) => run_train(cli, a).map(|_| true),
        Command::Eval(a) => eval(cli, a),
        Command::Bench(a) => bench(cli, a).map(|_| true),
        Command::Analyze(a) => run_analyze(cli, a).map(|_| true),
        Command::Viz(a) => viz(cli, a).map(|_| true),
        Command::Check(a) => check(cli, a),
        Command::Config => {
            print!("{}", load_config(cli)?.render());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
