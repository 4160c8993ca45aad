//! Command-line front end: `synthesize` runs the full pipeline once,
//! `evaluate` scores an existing synthetic table, `sweep` repeats runs
//! over epsilon/party grids and emits plot-ready TSV.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vertimrf::config::{Assignment, BinsChoice, EncoderChoice, PlanKind, RunConfig};
use vertimrf::io::{load_csv, DomainFile};
use vertimrf::{eval_lway_tvd, run_experiment, run_sweep, HarnessError};

#[derive(Parser)]
#[command(name = "vertimrf", version, about = "DP synthesis over vertically partitioned tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write synthetic data plus reports.
    Synthesize(SynthesizeArgs),
    /// Compare a synthetic CSV against the real one with l-way TVD.
    Evaluate(EvaluateArgs),
    /// Repeat runs over epsilon and party grids; writes sweep.tsv.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV (defaults to the built-in planted generator).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Domain JSON (required with --input).
    #[arg(long)]
    domain: Option<PathBuf>,
    #[arg(long)]
    parties: Option<usize>,
    /// Semicolon-separated attribute lists, e.g. "0,2,4;1,3,5".
    #[arg(long)]
    assign: Option<String>,
    /// fm | fo
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// experiment_default | halved
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    t: Option<u32>,
    #[arg(long)]
    gamma: Option<f64>,
    /// auto | off | <bin count>
    #[arg(long)]
    bins: Option<String>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    dc: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the party phase (default: VERTIMRF_THREADS or 1).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    domain: PathBuf,
    /// Comma-separated marginal widths.
    #[arg(long, default_value = "3,4,5")]
    l: String,
    #[arg(long, default_value_t = 300)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated epsilon grid.
    #[arg(long, default_value = "0.4,0.8,1.6,3.2")]
    epsilons: String,
    /// Comma-separated party-count grid (defaults to the config's value).
    #[arg(long)]
    parties_list: Option<String>,
    /// Seeds per grid cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig, HarnessError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.input {
        config.input = Some(v.clone());
    }
    if let Some(v) = &args.domain {
        config.domain = Some(v.clone());
    }
    if let Some(v) = args.parties {
        config.parties = v;
    }
    if let Some(v) = &args.assign {
        let lists = v
            .split(';')
            .map(|part| {
                part.split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Config(format!("bad --assign: {e}")))?;
        config.parties = lists.len();
        config.assignment = Assignment::Explicit(lists);
    }
    if let Some(v) = &args.encoder {
        config.encoder = match v.as_str() {
            "fm" => EncoderChoice::Fm,
            "fo" => EncoderChoice::Fo,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown encoder `{other}` (use fm or fo)"
                )))
            }
        };
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = args.delta {
        config.delta = Some(v);
    }
    if let Some(v) = &args.plan {
        config.plan = match v.as_str() {
            "experiment_default" => PlanKind::ExperimentDefault,
            "halved" => PlanKind::Halved,
            other => {
                return Err(HarnessError::Config(format!("unknown plan `{other}`")))
            }
        };
    }
    if let Some(v) = args.t {
        config.t = v;
    }
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = &args.bins {
        config.bins = match v.as_str() {
            "auto" => BinsChoice::Auto,
            "off" | "none" => BinsChoice::Off,
            other => BinsChoice::Fixed(other.parse().map_err(|_| {
                HarnessError::Config(format!("bad --bins `{other}` (auto|off|<count>)"))
            })?),
        };
    }
    if let Some(v) = args.tau {
        config.tau = v;
    }
    if let Some(v) = args.dc {
        config.d_c = v;
    }
    if let Some(v) = args.theta {
        config.theta = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.threads {
        config.threads = Some(v);
    }
    if let Some(v) = &args.out_dir {
        config.out_dir = Some(v.clone());
    }
    Ok(config)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, HarnessError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| HarnessError::Config(format!("bad {what} entry `{s}`")))
        })
        .collect()
}

fn run() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::Synthesize(args) => {
            let config = build_config(&args.config)?;
            let outcome = run_experiment(&config)?;
            println!(
                "synthesized {} rows; epsilon spent {:.6}, delta spent {:.3e}",
                outcome.synthetic.row_count(),
                outcome.metrics.total_epsilon,
                outcome.metrics.total_delta
            );
            for summary in &outcome.metrics.per_l {
                println!(
                    "l={} tvd mean {:.4} (std {:.4}, {} marginals)",
                    summary.l, summary.mean, summary.std, summary.samples
                );
            }
            if let Some(dir) = &config.out_dir {
                println!("outputs written to {}", dir.display());
            }
            Ok(())
        }
        Command::Evaluate(args) => {
            let domain = DomainFile::load(&args.domain)?;
            let real = load_csv(&args.real, &domain)?;
            let synthetic = load_csv(&args.synthetic, &domain)?;
            let l_values: Vec<usize> = parse_list(&args.l, "--l")?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let mut summaries = Vec::new();
            for l in l_values {
                summaries.push(eval_lway_tvd(&real, &synthetic, l, args.samples, &mut rng)?);
            }
            let json = serde_json::to_string_pretty(&summaries)?;
            match &args.out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let config = build_config(&args.config)?;
            let epsilons: Vec<f64> = parse_list(&args.epsilons, "--epsilons")?;
            let parties: Vec<usize> = match &args.parties_list {
                Some(text) => parse_list(text, "--parties-list")?,
                None => vec![config.parties],
            };
            let rows = run_sweep(&config, &epsilons, &parties, args.seeds)?;
            let tsv = vertimrf::experiment::sweep_tsv(&rows);
            match &config.out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join("sweep.tsv");
                    std::fs::write(&path, &tsv)?;
                    println!("sweep written to {}", path.display());
                }
                None => print!("{tsv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(HarnessError::Overspend(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
