mod backend;
mod commands;
mod config;
mod meta;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use insta_core::mixture::Rendering;
use insta_core::select::{Aggregation, Method};

use crate::config::Preset;

#[derive(Debug, Parser)]
#[command(name = "insta", version, about = "Instruction-based task selection for instruction tuning")]
pub struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Only log errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Log one JSON object per line.
    #[arg(long, global = true)]
    pub json_logs: bool,
    /// Cap on worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Ignore the embedding cache even when one is configured.
    #[arg(long, global = true)]
    pub no_cache: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a corpus manifest; write corpus statistics.
    Ingest(IngestArgs),
    /// Normalize template placeholders; write a refined manifest.
    Refine(RefineArgs),
    /// Train the selector projection head on instruction pairs.
    Align(AlignArgs),
    /// Rank training tasks for a target task.
    Select(SelectArgs),
    /// Sample instances from selected tasks into a training mixture.
    Mixture(MixtureArgs),
    /// Rank correlation of selections against a transfer matrix.
    Compare(CompareArgs),
    /// Closed-form selection cost counts.
    Report(ReportArgs),
    /// One selection per k over a range.
    SweepK(SweepArgs),
    /// Re-hash artifacts against their run metadata.
    Verify(VerifyArgs),
    /// Write a synthetic corpus with realistic shape.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Report clusters that mix splits instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Refined manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-instruction replacement report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Copy the corpus without refining (ablation).
    #[arg(long)]
    pub disable: bool,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `ref`, `ref:DIM` or `remote:URL`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Projection head to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Auxiliary labelled pairs (JSONL: text_a, text_b, label, source).
    #[arg(long)]
    pub aux: Option<PathBuf>,
    /// Also write the sampled corpus pairs in the auxiliary pair format.
    #[arg(long)]
    pub export_pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectionOpts {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Required for insta_aligned.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub backend: Option<String>,
    /// Score refined instruction text where present (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_refined: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Instances per instruction for dsta.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub opts: SelectionOpts,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: SelectionOpts,
    #[arg(long, default_value_t = 1)]
    pub kmin: usize,
    #[arg(long)]
    pub kmax: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MixtureArgs {
    /// Selection JSON from `select`.
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Instances per task.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub render: Option<Rendering>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub selections: Vec<PathBuf>,
    /// CSV with a `source` column and one column per target.
    #[arg(long)]
    pub transfer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Cost model counts; the only report kind.
    #[arg(long)]
    pub cost: bool,
    #[arg(long = "Tt")]
    pub t_t: u64,
    #[arg(long = "Te")]
    pub t_e: u64,
    #[arg(long)]
    pub k: u64,
    #[arg(long, default_value_t = 32)]
    pub n: u64,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub shape: Preset,
    /// Instances per task.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        log::LevelFilter::Info
    };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(level).parse_default_env().target(env_logger::Target::Stderr);
    if cli.json_logs {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    builder.init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(code) => code,
        Err(err) => {
            if cli.json_logs {
                log::error!("{err:#}");
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
