//! Command-line workbench for watermarking sequential recommenders.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};

use aow::harness::{
    self, emit_report, load_manifest, parse_config, run_pipeline, run_stage, sweep,
    verify_manifest, DatasetSource, ExperimentConfig, ReportFormat, StageCommand, SweepAxis,
    KNOWN_KEYS,
};
use aow::rng::derive_seed;
use aow::watermark::InitialPolicy;
use aow::Error;

fn config_key_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let mut out = String::from("Config file keys (flat `key = value` lines):\n");
        for (key, doc) in KNOWN_KEYS {
            out.push_str(&format!("  {key:<34} {doc}\n"));
        }
        out
    })
}

#[derive(Parser)]
#[command(
    name = "aow",
    version,
    about = "Embed, verify, and attack autoregressive out-of-distribution watermarks in sequential recommenders",
    after_long_help = config_key_help()
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; per-stage sub-seeds are derived from it by labeled
    /// hashing (overrides the config file, including explicit stage seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Bitwise-reproducible training (single-threaded batch accumulation).
    /// `--deterministic=false` shards batch gradients across threads and
    /// forfeits bitwise reproducibility.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write dataset.txt.
    Synth,
    /// Train the oracle model on the leave-one-out training split.
    TrainOracle,
    /// Generate the watermark sequence from the trained oracle.
    GenWatermark,
    /// Train the watermarked model on the injected training set.
    TrainWm,
    /// Evaluate utility and watermark validity for the trained models.
    Eval,
    /// Run the distillation (model-extraction) attack on the watermarked model.
    AttackDistill,
    /// Run the fine-tuning attack on the watermarked model.
    AttackFinetune,
    /// Run one pipeline per axis value, sharing the oracle; emits sweep.csv.
    Sweep {
        /// Axis to sweep: n | wdr | m | initial.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (defaults per axis; see --help).
        #[arg(long)]
        values: Option<String>,
    },
    /// Re-emit reports from a run manifest.
    Report {
        /// Manifest path (default <out>/manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output format: csv | text.
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Run the full pipeline: dataset, split, oracle, watermark, watermarked
    /// model, evaluation, configured attacks, reports, manifest.
    Pipeline,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.watermark.seed = derive_seed(seed, "watermark");
        if let DatasetSource::Synthetic(s) = &mut cfg.dataset {
            s.seed = derive_seed(seed, "synth");
        }
        if let Some(a) = &mut cfg.distill {
            a.seed = derive_seed(seed, "attack-distill");
        }
        if let Some(a) = &mut cfg.finetune {
            a.seed = derive_seed(seed, "attack-finetune");
        }
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if !common.deterministic {
        cfg.train.parallel_batches = true;
        if let Some(a) = &mut cfg.distill {
            a.train.parallel_batches = true;
        }
        if let Some(a) = &mut cfg.finetune {
            a.train.parallel_batches = true;
        }
    }
    Ok(cfg)
}

fn parse_axis(axis: &str, values: Option<&str>) -> Result<SweepAxis, Error> {
    match values {
        None => SweepAxis::default_for(axis),
        Some(text) => {
            let items: Vec<&str> = text.split(',').map(str::trim).collect();
            let bad = |v: &str| Error::InvalidArgument(format!("invalid sweep value `{v}`"));
            match axis {
                "n" => Ok(SweepAxis::N(
                    items
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_, _>>()?,
                )),
                "wdr" => Ok(SweepAxis::Wdr(
                    items
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_, _>>()?,
                )),
                "m" => Ok(SweepAxis::M(
                    items
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(v)))
                        .collect::<Result<_, _>>()?,
                )),
                "initial" => Ok(SweepAxis::Initial(
                    items
                        .iter()
                        .map(|v| match *v {
                            "cold" => Ok(InitialPolicy::Cold),
                            "pop" => Ok(InitialPolicy::Pop),
                            other => match other.strip_prefix("explicit:") {
                                Some(id) => {
                                    Ok(InitialPolicy::Explicit(id.parse().map_err(|_| bad(v))?))
                                }
                                None => Err(bad(v)),
                            },
                        })
                        .collect::<Result<_, _>>()?,
                )),
                other => Err(Error::InvalidArgument(format!(
                    "unknown sweep axis `{other}` (expected n | wdr | m | initial)"
                ))),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.common.threads > 0 {
        // ignore failure if a pool already exists (e.g. repeated init in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global();
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth => run_stage(&cfg, StageCommand::Synth),
        Command::TrainOracle => run_stage(&cfg, StageCommand::TrainOracle),
        Command::GenWatermark => run_stage(&cfg, StageCommand::GenWatermark),
        Command::TrainWm => run_stage(&cfg, StageCommand::TrainWm),
        Command::Eval => run_stage(&cfg, StageCommand::Eval),
        Command::AttackDistill => run_stage(&cfg, StageCommand::AttackDistill),
        Command::AttackFinetune => run_stage(&cfg, StageCommand::AttackFinetune),
        Command::Sweep { axis, values } => {
            let axis = parse_axis(&axis, values.as_deref())?;
            let path = sweep(&cfg, &axis)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Report { manifest, format } => {
            let manifest_path = manifest.unwrap_or_else(|| cfg.out_dir.join("manifest.json"));
            let manifest = load_manifest(&manifest_path)?;
            verify_manifest(&manifest, manifest_path.parent().unwrap_or(&cfg.out_dir))?;
            let format = match format.as_str() {
                "csv" => ReportFormat::Csv,
                "text" => ReportFormat::Text,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown report format `{other}` (expected csv | text)"
                    )))
                }
            };
            let written = emit_report(&manifest, &cfg.out_dir, format)?;
            for path in written {
                eprintln!("wrote {}", path.display());
            }
            if format == ReportFormat::Text {
                println!("{}", harness::render_summary_text(&manifest));
            }
            Ok(())
        }
        Command::Pipeline => {
            let manifest = run_pipeline(&cfg)?;
            println!("{}", harness::render_summary_text(&manifest));
            Ok(())
        }
    }
}

fn is_config_error(err: &Error) -> bool {
    match err {
        Error::Config { .. } => true,
        Error::Stage { source, .. } => is_config_error(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
