//! Command-line surface: configuration, file formats and the subcommands.

pub mod config;
pub mod formats;
pub mod selftest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::harness::{
    bench_sizes, curve_csv, generate_sequence, latency_csv, measure_latency, noise_span_scenario, track_sequence, Checkpoint,
    LatencyReport, Model, Trainer,
};
use crate::heads::BoundingBox;
use crate::metrics::{evaluate, EvalReport, DEFAULT_TAU};
use crate::{Error, Result};
pub use config::{BenchConfig, DataConfig, RunConfig, SEED_ENV};
pub use formats::{annotation_rows, join_annotations, parse_annotations, write_annotations, ResultFile, ResultRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fusetrack", about = "Unified RGB-thermal tracker: train, track, evaluate, benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and print a per-check table.
    Selftest,
    /// Train on the synthetic curriculum; writes checkpoint, curves and resolved config.
    Train(TrainArgs),
    /// Track a synthetic sequence with a checkpoint; writes a result file and ground truth.
    Track(TrackArgs),
    /// Score a result file against annotation files.
    Eval(EvalArgs),
    /// Median forward latency of the unified and three-stage topologies.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config of `section.key=value` lines.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config for data, crop and inference settings; defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `data.sequence_seed`.
    #[arg(long)]
    pub sequence_seed: Option<u64>,
    /// Initial box `x,y,w,h`; defaults to the frame-0 ground truth.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, default_value = "track")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub rgb_gt: PathBuf,
    #[arg(long)]
    pub thermal_gt: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Directory for precision/success curve CSVs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p)?.with_env_seed(),
        None => RunConfig::default().with_env_seed(),
    }
}

/// Runs the suite; `Ok(false)` when any check fails.
pub fn cmd_selftest(opts: selftest::SelftestOptions, out: &mut dyn std::io::Write) -> Result<bool> {
    let results = selftest::run(opts);
    let _ = write!(out, "{}", selftest::table(&results));
    match results.iter().find(|r| !r.passed) {
        Some(r) => {
            let _ = writeln!(out, "first failing check: {} ({})", r.name, r.detail);
            Ok(false)
        }
        None => Ok(true),
    }
}

/// Artifacts written by [`cmd_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub curves: PathBuf,
    pub config: PathBuf,
    pub digest: String,
}

pub fn cmd_train(config_path: &Path, out: &Path, progress: &mut dyn FnMut(usize, f64)) -> Result<TrainOutputs> {
    let cfg = load_config(Some(config_path))?;
    create_dir(out)?;
    let mut trainer = Trainer::new(Model::new(cfg.model.clone(), cfg.model_seed)?, cfg.train_config());
    trainer.train(cfg.training.steps, |step, b| progress(step, b.total))?;
    let outputs = TrainOutputs {
        checkpoint: out.join("checkpoint.bin"),
        curves: out.join("curves.csv"),
        config: out.join("config.txt"),
        digest: Checkpoint::of_trainer(&trainer).digest(),
    };
    Checkpoint::of_trainer(&trainer).save(&outputs.checkpoint)?;
    write(&outputs.curves, &(cfg.provenance() + &curve_csv(&trainer.curve)))?;
    write(&outputs.config, &cfg.to_text())?;
    Ok(outputs)
}

fn parse_box(s: &str) -> Result<BoundingBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|f| f.trim().parse().map_err(|_| Error::Config { field: "init".into(), msg: format!("bad number `{f}`") }))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [x, y, w, h] if *w > 0.0 && *h > 0.0 => Ok(BoundingBox::from_xywh(*x, *y, *w, *h)),
        _ => Err(Error::Config { field: "init".into(), msg: format!("expected x,y,w,h with positive size, got `{s}`") }),
    }
}

/// Tracks the configured synthetic sequence and writes `result.txt`,
/// `rgb_gt.txt` and `thermal_gt.txt` into `out`.
pub fn cmd_track(args: &TrackArgs) -> Result<ResultFile> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.sequence_seed {
        cfg.data.sequence_seed = s;
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if args.config.is_some() && ckpt.model != cfg.model {
        return Err(Error::Version(format!(
            "checkpoint model ({}) differs from config model ({})",
            crate::harness::describe(&ckpt.model),
            crate::harness::describe(&cfg.model)
        )));
    }
    cfg.model = ckpt.model.clone();
    let model = ckpt.to_model()?;
    let scenario = noise_span_scenario(cfg.data.sequence_seed, cfg.data.frames, cfg.data.frame_size);
    let (frames, ann) = generate_sequence(&scenario)?;
    let init = match &args.init {
        Some(s) => parse_box(s)?,
        None => ann[0].reference().ok_or(Error::Empty("frame-0 ground truth"))?,
    };
    let outputs = track_sequence(&model, &frames, init, &cfg.track_options())?;
    let result = ResultFile::new(&cfg.provenance(), &outputs);
    create_dir(&args.out)?;
    write(&args.out.join("result.txt"), &result.to_text())?;
    write(&args.out.join("rgb_gt.txt"), &write_annotations(&annotation_rows(&ann.iter().map(|a| a.rgb).collect::<Vec<_>>())))?;
    write(
        &args.out.join("thermal_gt.txt"),
        &write_annotations(&annotation_rows(&ann.iter().map(|a| a.thermal).collect::<Vec<_>>())),
    )?;
    Ok(result)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let result = ResultFile::parse(&read(&args.result)?, &args.result.display().to_string())?;
    let rgb = parse_annotations(&read(&args.rgb_gt)?, &args.rgb_gt.display().to_string())?;
    let thermal = match &args.thermal_gt {
        Some(p) => Some(parse_annotations(&read(p)?, &p.display().to_string())?),
        None => None,
    };
    let ann = join_annotations(&rgb, thermal.as_deref())?;
    if ann.len() != result.rows.len() {
        return Err(Error::Contract(format!("result has {} frames, annotations {}", result.rows.len(), ann.len())));
    }
    let report = evaluate(&result.boxes(), &ann, args.tau)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(&out.join("precision.csv"), &report.precision_csv())?;
        write(&out.join("success.csv"), &report.success_csv())?;
    }
    Ok(report)
}

pub fn cmd_bench(config: Option<&Path>) -> Result<(Vec<LatencyReport>, String)> {
    let cfg = load_config(config)?;
    let BenchConfig { warmup, samples } = cfg.bench;
    let reports = bench_sizes().iter().map(|c| measure_latency(c, warmup, samples)).collect::<Result<Vec<_>>>()?;
    let csv = cfg.provenance() + &latency_csv(&reports);
    Ok((reports, csv))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Io { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Selftest => {
            cmd_selftest(selftest::SelftestOptions::default(), &mut std::io::stdout()).map(|ok| if ok { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Train(a) => cmd_train(&a.config, &a.out, &mut |step, loss| {
            if step % 50 == 0 {
                eprintln!("step {step} loss {loss:.4}");
            }
        })
        .map(|o| {
            println!("checkpoint {} sha256 {}", o.checkpoint.display(), o.digest);
            println!("curves {}", o.curves.display());
            println!("config {}", o.config.display());
            EXIT_OK
        }),
        Command::Track(a) => cmd_track(&a).map(|r| {
            println!("tracked {} frames into {}", r.rows.len(), a.out.display());
            EXIT_OK
        }),
        Command::Eval(a) => cmd_eval(&a).map(|r| {
            println!("{}", r.summary());
            EXIT_OK
        }),
        Command::Bench(a) => cmd_bench(a.config.as_deref()).and_then(|(_, csv)| {
            match &a.out {
                Some(p) => write(p, &csv)?,
                None => print!("{csv}"),
            }
            Ok(EXIT_OK)
        }),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}
