use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cgperf::dataset::{self, Header, LabeledRecord, Provenance};
use cgperf::eval::{format_table, EvalMode};
use cgperf::graph::{flops, param_count, ComputeGraph};
use cgperf::pipeline::{self, ExperimentConfig, PipelineError};
use cgperf::predictor::Predictor;
use cgperf::search::{search, SearchConfig};

#[derive(Parser)]
#[command(name = "cgperf", version, about = "Performance prediction on computational graphs")]
struct Cli {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ZeroShot,
    FineTune,
}

#[derive(Subcommand)]
enum Command {
    /// Samples graphs from a space.
    GenData {
        #[arg(long)]
        space: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Labels a graphs file for a task with pseudo-labels or oracle labels.
    PseudoLabel {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        ground_truth: bool,
    },
    /// Trains a fresh predictor on a labeled file.
    TrainBackbone {
        #[arg(long)]
        data: PathBuf,
    },
    /// Adds an adapter for the task of a labeled file.
    TrainAdapter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Runs the 20-sample protocol over several seeds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "zero-shot")]
        mode: ModeArg,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// `eval --mode fine-tune`.
    FinetuneEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Searches for a cheaper graph with similar predicted performance.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        task: String,
        #[arg(long)]
        target: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Prints node and edge counts, block count, FLOPs and parameters.
    Inspect {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        index: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Predictor(#[from] cgperf::predictor::PredictorError),
    #[error(transparent)]
    Search(#[from] cgperf::search::SearchError),
    #[error(transparent)]
    Graph(#[from] cgperf::error::GraphError),
    #[error("{0}")]
    Usage(String),
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.into(), source })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Parse { path: path.into(), message: e.to_string() }
}

fn read_graphs(path: &Path) -> Result<Vec<ComputeGraph>, CliError> {
    Ok(dataset::read_graphs(&read(path)?).map_err(|e| parse_err(path, e))?.1)
}

fn read_labeled(path: &Path) -> Result<Vec<LabeledRecord>, CliError> {
    Ok(dataset::read_labeled(&read(path)?).map_err(|e| parse_err(path, e))?.1)
}

fn read_predictor(path: &Path) -> Result<Predictor, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    Ok(Predictor::from_bytes(&bytes).map_err(|e| parse_err(path, e))?.0)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_toml(&read(p)?).map_err(|e| parse_err(p, e))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    let out = cfg.paths.out.clone();
    let seed = cfg.seed;
    match cli.command {
        Command::GenData { space, n } => {
            let spec = cfg.space(&space).map_err(PipelineError::from)?;
            let graphs = pipeline::gen_data(&spec, n, seed)?;
            let text = dataset::write_graphs(&Header::new(dataset::GRAPHS, &hash), &graphs);
            write(&out.join(format!("graphs-{space}.jsonl")), text)?;
        }
        Command::PseudoLabel { graphs, task, ground_truth } => {
            let gs = read_graphs(&graphs)?;
            let t = cfg.task(&task)?;
            let provenance = if ground_truth { Provenance::GroundTruth } else { Provenance::Pseudo };
            let records = pipeline::label(&cfg, &t, &gs, provenance, seed)?;
            let kind = if ground_truth { "ground-truth" } else { "pseudo" };
            let text = dataset::write_labeled(&Header::new(dataset::LABELED, &hash), &records);
            write(&out.join(format!("labeled-{task}-{kind}.jsonl")), text)?;
        }
        Command::TrainBackbone { data } => {
            let records = read_labeled(&data)?;
            let p = pipeline::train_backbone(&cfg, &records, seed)?;
            write(&out.join("predictor.ckpt"), p.to_bytes(&hash))?;
        }
        Command::TrainAdapter { checkpoint, data } => {
            let mut p = read_predictor(&checkpoint)?;
            let records = read_labeled(&data)?;
            pipeline::train_adapter(&cfg, &mut p, &records, seed)?;
            write(&out.join("predictor.ckpt"), p.to_bytes(&hash))?;
        }
        Command::Eval { checkpoint, data, mode, seeds } => {
            let mode = match mode {
                ModeArg::ZeroShot => EvalMode::ZeroShot,
                ModeArg::FineTune => EvalMode::FineTune,
            };
            eval(&cfg, &hash, &checkpoint, &data, mode, seeds)?;
        }
        Command::FinetuneEval { checkpoint, data, seeds } => {
            eval(&cfg, &hash, &checkpoint, &data, EvalMode::FineTune, seeds)?;
        }
        Command::Search { checkpoint, graphs, index, task, target, budget } => {
            let p = read_predictor(&checkpoint)?;
            let gs = read_graphs(&graphs)?;
            let g0 = gs.get(index).ok_or_else(|| CliError::Usage(format!("no graph at index {index}")))?;
            let sc = SearchConfig {
                target_reduction: target.unwrap_or(cfg.search.target_reduction),
                budget: budget.unwrap_or(cfg.search.budget),
                seed,
                ..cfg.search.clone()
            };
            let (best, report) = search(&p, &task, g0, &sc)?;
            let header = Header::new(dataset::SEARCH_STEPS, &hash);
            write(&out.join("search-steps.jsonl"), dataset::write_records(&header, report.steps.iter()))?;
            let header = Header::new(dataset::SEARCH_HISTORY, &hash);
            write(&out.join("search-history.jsonl"), dataset::write_records(&header, report.history.iter()))?;
            let best_text = dataset::write_graphs(&Header::new(dataset::GRAPHS, &hash), std::slice::from_ref(&best));
            write(&out.join("search-best.jsonl"), best_text)?;
            println!(
                "flops {:.4} -> {:.4} G ({:.1}% reduction, target {:.1}% {}), predicted {:.3} -> {:.3}, {} evaluations",
                report.initial_flops,
                report.final_flops,
                100.0 * report.flops_reduction,
                100.0 * report.target_reduction,
                if report.target_met { "met" } else { "unmet" },
                report.initial_predicted,
                report.final_predicted,
                report.evaluations,
            );
        }
        Command::Inspect { graphs, index } => {
            let gs = read_graphs(&graphs)?;
            let picked: Vec<&ComputeGraph> = match index {
                Some(i) => vec![gs.get(i).ok_or_else(|| CliError::Usage(format!("no graph at index {i}")))?],
                None => gs.iter().collect(),
            };
            println!("name\tnodes\tedges\tblocks\tgflops\tparams");
            for g in picked {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    g.meta.name,
                    g.node_count(),
                    g.edge_count(),
                    g.meta.block_count,
                    flops(g)?,
                    param_count(g)
                );
            }
        }
    }
    Ok(())
}

fn eval(
    cfg: &ExperimentConfig,
    hash: &str,
    checkpoint: &Path,
    data: &Path,
    mode: EvalMode,
    seeds: Option<usize>,
) -> Result<(), CliError> {
    let p = read_predictor(checkpoint)?;
    let records = read_labeled(data)?;
    let reports = pipeline::evaluate(cfg, &p, &records, mode, cfg.seed, seeds.unwrap_or(cfg.eval.seeds))?;
    let name = format!("eval-{}-{}.jsonl", records[0].task, mode.name());
    write(&cfg.paths.out.join(name), dataset::write_records(&Header::new(dataset::EVAL, hash), reports.iter()))?;
    print!("{}", format_table(&reports));
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var("CGPERF_THREADS") {
        let n: usize = v.parse().map_err(|_| format!("CGPERF_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            return Err("CGPERF_THREADS must be positive".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
