use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mivpg::harness::bench::{bench_complexity, BenchOptions, Mechanism};
use mivpg::harness::export::export_attention;
use mivpg::harness::params::{load_params, save_params};
use mivpg::harness::suite::{default_grid, parse_grid, run_invariant_suite};
use mivpg::harness::task::{generate_task, SyntheticTaskSpec};
use mivpg::harness::train::{train, witness_model_config, Classifier, ModelKind, TrainOptions};
use mivpg::mivpg::{Bag, MivpgConfig, MivpgParams, Scenario};
use mivpg::{Error, Result, Rng};

const EXIT_INVARIANT: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "mivpg", version, about = "Multi-instance visual prompt generator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the permutation-invariance suite over a config grid.
    Check(CheckArgs),
    /// Time and count MACs of a bag-correlation mechanism over bag sizes.
    Bench(BenchArgs),
    /// Train a bag classifier on the synthetic witness task.
    Train(TrainArgs),
    /// Write cross-attention maps and patch weights for one bag.
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct CheckArgs {
    /// `default` (CSA x PPEG x scenarios) or a JSON file of grid cells.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Mechanism,
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    m_list: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    r: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Count MACs without timing; output is deterministic.
    #[arg(long)]
    macs_only: bool,
    /// Rows whose estimated working set exceeds this are reported as capped.
    #[arg(long, default_value_t = 3072)]
    memory_cap_mib: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: u8,
    /// Model config JSON; a small built-in model when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    bags: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Train the mean-pool MLP baseline instead of MIVPG.
    #[arg(long)]
    baseline: bool,
    /// Per-epoch CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the trained MIVPG parameters (ignored for the baseline).
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parameter JSON; random parameters from --seed when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    bag: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn emit(out: Option<&Path>, csv: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn check(args: CheckArgs) -> Result<u8> {
    let grid = if args.grid == "default" {
        default_grid()
    } else {
        let path = PathBuf::from(&args.grid);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
        parse_grid(&text)?
    };
    let report = run_invariant_suite(&grid, args.seed)?;
    emit(args.out.as_deref(), &report.to_csv())?;
    eprintln!(
        "{} rows, {} failed",
        report.rows.len(),
        report.failures()
    );
    Ok(if report.passed() { 0 } else { EXIT_INVARIANT })
}

fn bench(args: BenchArgs) -> Result<u8> {
    let options = BenchOptions {
        dim: args.dim,
        heads: args.heads,
        repeats: args.repeats,
        seed: args.seed,
        memory_cap_bytes: args.memory_cap_mib << 20,
        macs_only: args.macs_only,
    };
    let result = bench_complexity(args.mechanism, &args.m_list, args.r, &options)?;
    emit(args.out.as_deref(), &result.to_csv())?;
    if let Some(slope) = result.slope {
        eprintln!("{}: log-log slope {slope:.3}", result.mechanism);
    }
    Ok(0)
}

fn run_train(args: TrainArgs) -> Result<u8> {
    let config = match &args.config {
        Some(path) => MivpgConfig::load(path)?,
        None => witness_model_config(32),
    };
    let scenario = Scenario::from_number(args.scenario)?;
    let spec = SyntheticTaskSpec {
        instance_dim: config.instance_dim(),
        num_bags: args.bags,
        ..SyntheticTaskSpec::standard(scenario, args.seed)
    };
    let dataset = generate_task(&spec)?;
    let kind = if args.baseline { ModelKind::MeanPool } else { ModelKind::Mivpg };
    let options = TrainOptions {
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        batch_size: args.batch_size,
    };
    let trained = train(&dataset, &config, kind, &options)?;
    let m = &trained.metrics;
    emit(args.out.as_deref(), &m.to_csv())?;
    eprintln!(
        "model {:?}, {} parameters, config {}, best epoch {}, test accuracy {:.4}",
        m.model, m.num_parameters, m.config_digest, m.best_epoch, m.test_accuracy
    );
    if let (Some(path), Classifier::Mivpg { body, .. }) = (&args.save_params, &trained.classifier) {
        save_params(body, path)?;
    }
    Ok(0)
}

fn export(args: ExportArgs) -> Result<u8> {
    let config = MivpgConfig::load(&args.config)?;
    let params = match &args.params {
        Some(path) => load_params(&config, path)?,
        None => MivpgParams::new(&config, &mut Rng::new(args.seed))?,
    };
    let bag = Bag::read(&args.bag)?;
    let files = export_attention(&bag, &config, &params, &args.out_dir)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Check(a) => check(a),
        Command::Bench(a) => bench(a),
        Command::Train(a) => run_train(a),
        Command::ExportAttn(a) => export(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            })
        }
    }
}
