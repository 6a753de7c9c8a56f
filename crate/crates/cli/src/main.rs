use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otk_nas::bench::{synth_space, BenchError};
use otk_nas::fixtures;
use otk_nas::pool::SpaceSpec;
use otk_nas::runner::{
    load_records, parse_seeds, run_experiment, summarize, write_records, write_summary, ConfigError, ExperimentConfig,
    RunError,
};
use otk_nas::{ArchMetric, Architecture, DistanceWeights, TaxonomySpec, Vocabulary};

#[derive(Parser)]
#[command(name = "otk-nas", version, about = "Architecture search with tree-Wasserstein GP surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search experiment and write per-evaluation records as CSV.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        optimizer: Option<String>,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        quality_sign: Option<String>,
        /// Tabular benchmark CSV to search instead of the synthetic space.
        #[arg(long)]
        tabular: Option<PathBuf>,
        /// Record wall-clock time in the `wall_ms` column.
        #[arg(long)]
        timing: bool,
    },
    /// Tree-Wasserstein components and d_NN between two architecture JSON files.
    /// Without --a/--b the bundled golden pair is used.
    Distance {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        ngram: usize,
        /// alpha1,alpha2 (alpha3 = 1 - alpha1 - alpha2).
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Enumerate a synthetic space and write its table as CSV.
    GenSpace {
        #[arg(long)]
        nodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "cv1,cv3,mp3")]
        ops: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        min_nodes: Option<usize>,
        #[arg(long)]
        max_edges: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-iteration median and quartiles of best_val across seeds.
    Summarize {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Config(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => Ok(Box::new(File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?)),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn read_arch(path: &Path) -> Result<Architecture, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, mode, optimizer, seeds, out, budget, batch_size, quality_sign, tabular, timing } => {
            let mut cfg = match config {
                Some(p) => {
                    ExperimentConfig::from_file(&p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                }
                None => ExperimentConfig::default(),
            };
            let overrides = [
                ("mode", mode),
                ("optimizer", optimizer),
                ("budget", budget.map(|v| v.to_string())),
                ("batch_size", batch_size.map(|v| v.to_string())),
                ("quality_sign", quality_sign),
            ];
            for (k, v) in overrides {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s).map_err(Failure::Config)?;
            }
            if let Some(t) = tabular {
                cfg.set("tabular", &t.to_string_lossy())?;
            }
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            cfg.timing |= timing;
            cfg.validate()?;
            let oracle = cfg.build_oracle()?;
            let records = run_experiment(&cfg, &oracle)?;
            write_records(&records, output(cfg.output.as_deref())?)?;
            Ok(())
        }
        Command::Distance { a, b, ngram, weights, taxonomy } => {
            let spec = match taxonomy {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| data(format!("{}: {e}", p.display())))?;
                    TaxonomySpec::parse(&text).map_err(data)?
                }
                None => TaxonomySpec::default_nb(),
            };
            let w = match weights {
                Some(s) => {
                    let parts: Vec<f64> = s
                        .split(',')
                        .map(|t| t.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| Failure::Config(format!("bad --weights `{s}`")))?;
                    let [a1, a2] = parts[..] else {
                        return Err(Failure::Config(format!("--weights needs two values, got `{s}`")));
                    };
                    DistanceWeights::new(a1, a2).map_err(|e| Failure::Config(e.to_string()))?
                }
                None => DistanceWeights::uniform(),
            };
            let x = a.as_deref().map(read_arch).transpose()?.unwrap_or_else(fixtures::golden_x);
            let z = b.as_deref().map(read_arch).transpose()?.unwrap_or_else(fixtures::golden_z);
            let metric = ArchMetric::new(spec, ngram).map_err(|e| Failure::Config(e.to_string()))?;
            let c = metric.components(&x, &z).map_err(data)?;
            let mut out = io::stdout().lock();
            writeln!(out, "ops = {}", c.ops).map_err(data)?;
            writeln!(out, "indegree = {}", c.indegree).map_err(data)?;
            writeln!(out, "outdegree = {}", c.outdegree).map_err(data)?;
            writeln!(out, "d_nn = {}", c.d_nn(&w)).map_err(data)?;
            Ok(())
        }
        Command::GenSpace { nodes, ops, seed, min_nodes, max_edges, out } => {
            let max_edges = max_edges.unwrap_or(nodes * nodes.saturating_sub(1) / 2);
            let space = SpaceSpec::new(Vocabulary::new(ops), min_nodes.unwrap_or(2), nodes, max_edges)
                .map_err(|e| Failure::Config(e.to_string()))?;
            let oracle = synth_space(&space, seed).map_err(|e| match e {
                BenchError::SpaceTooLarge(_) => Failure::Config(e.to_string()),
                other => data(other),
            })?;
            oracle.write_csv(output(out.as_deref())?).map_err(data)
        }
        Command::Summarize { results, out } => {
            let records = load_records(&results)?;
            if records.is_empty() {
                return Err(data(format!("{}: no records", results.display())));
            }
            write_summary(&summarize(&records), output(out.as_deref())?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
