use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use modrank::artifact::write_atomic;
use modrank_cli::config::ExperimentConfig;
use modrank_cli::experiment::{self, LatencyPlan, SweepKind};
use modrank_cli::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "modrank",
    version,
    about = "Modular cross-lingual reranking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bilingual benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Generator settings (JSON); the desk defaults otherwise.
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Write the desk experiment config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        work: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Build the tokenizer and pretrain the base checkpoint.
    Pretrain(ConfigArg),
    /// Run every stage for every pipeline and write a summary table.
    Run(ConfigArg),
    /// Build a BM25 index, either for a benchmark language or a corpus file.
    Index {
        #[arg(long, conflicts_with = "corpus", requires = "lang")]
        config: Option<PathBuf>,
        #[arg(long)]
        lang: Option<String>,
        #[arg(long, requires = "out")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a module or the fully fine-tuned baseline.
    Train {
        #[command(subcommand)]
        kind: TrainKind,
    },
    /// Rank a pipeline's query split and write TREC runs.
    Rank {
        #[command(flatten)]
        config: ConfigArg,
        /// Pipeline name; every pipeline when absent.
        #[arg(long)]
        pipeline: Option<String>,
    },
    /// Compute MAP for a pipeline's runs or for a single run file.
    Eval {
        #[arg(long, conflicts_with = "run")]
        config: Option<PathBuf>,
        #[arg(long)]
        pipeline: Option<String>,
        #[arg(long, requires = "qrels")]
        run: Option<PathBuf>,
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long)]
        cutoff: Option<usize>,
        /// Baseline run for a paired two-tailed t-test.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Sweep the reduction factor or the adapter drop of a pipeline.
    Sweep {
        #[arg(value_enum)]
        axis: Axis,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pipeline: String,
        /// Comma-separated values; adapter drop defaults to 0..=L.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        latency_queries: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainKind {
    /// Language adapter.
    La {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lang: String,
    },
    /// Ranking adapter.
    Ra {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        reduction_factor: Option<usize>,
    },
    /// Language mask.
    Lm {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lang: String,
    },
    /// Ranking mask.
    Rm {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        reduction_factor: Option<usize>,
    },
    /// Full fine-tuning baseline.
    Full(ConfigArg),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Axis {
    ReductionFactor,
    AdapterDrop,
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            settings,
        } => {
            let config = match settings {
                Some(p) => {
                    let mut c: SynthConfig = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                    c.seed = seed;
                    c
                }
                None => SynthConfig::desk(seed),
            };
            generate(&config)?.write(&out)?;
            println!("wrote benchmark to {}", out.display());
        }
        Command::InitConfig {
            out,
            benchmark,
            work,
            seed,
        } => {
            let config = ExperimentConfig::desk(benchmark, work, seed);
            write_atomic(&out, config.to_json().as_bytes())?;
        }
        Command::Pretrain(c) => {
            let ck = experiment::pretrain(&load(&c.config)?)?;
            println!("base checkpoint {}", ck.fingerprint());
        }
        Command::Run(c) => {
            let c = load(&c.config)?;
            for (pipeline, stage, report) in experiment::run_all(&c)? {
                println!("{pipeline}\t{stage}\t{:.4}", report.map);
            }
        }
        Command::Index {
            config,
            lang,
            corpus,
            out,
        } => match (config, lang, corpus, out) {
            (Some(c), Some(lang), None, _) => {
                let index = experiment::index_language(&load(&c)?, &lang)?;
                println!("indexed {} documents", index.num_docs());
            }
            (None, _, Some(corpus), Some(out)) => {
                let index = experiment::build_index(&corpus, &out)?;
                println!("indexed {} documents", index.num_docs());
            }
            _ => bail!("index needs either --config and --lang or --corpus and --out"),
        },
        Command::Train { kind } => {
            let path = match kind {
                TrainKind::La { config, lang } => {
                    experiment::train_language_adapter(&load(&config.config)?, &lang)?
                }
                TrainKind::Lm { config, lang } => {
                    experiment::train_language_mask(&load(&config.config)?, &lang)?
                }
                TrainKind::Ra {
                    config,
                    reduction_factor,
                } => {
                    let c = load(&config.config)?;
                    let r = reduction_factor.unwrap_or(c.adapters.ranking_reduction_factor);
                    experiment::train_ranking_adapter(&c, r)?
                }
                TrainKind::Rm {
                    config,
                    reduction_factor,
                } => {
                    let c = load(&config.config)?;
                    let r = reduction_factor.unwrap_or(c.masks.ranking_reduction_factor);
                    experiment::train_ranking_mask(&c, r)?
                }
                TrainKind::Full(config) => experiment::train_full_model(&load(&config.config)?)?,
            };
            println!("wrote {}", path.display());
        }
        Command::Rank { config, pipeline } => {
            let c = load(&config.config)?;
            let names: Vec<String> = match pipeline {
                Some(p) => vec![p],
                None => c.pipelines.iter().map(|p| p.name.clone()).collect(),
            };
            for name in names {
                let runs = experiment::rank(&c, &name)?;
                let stages: Vec<&str> = runs.stages().iter().map(|s| s.0).collect();
                println!("{name}: {}", stages.join(" "));
            }
        }
        Command::Eval {
            config,
            pipeline,
            run,
            qrels,
            cutoff,
            baseline,
        } => match (config, run, qrels) {
            (Some(c), None, _) => {
                let c = load(&c)?;
                let names: Vec<String> = match pipeline {
                    Some(p) => vec![p],
                    None => c.pipelines.iter().map(|p| p.name.clone()).collect(),
                };
                for name in names {
                    for (stage, report) in experiment::evaluate_pipeline(&c, &name)? {
                        let sig = report
                            .t_test
                            .map(|t| format!("  t={:.3} p={:.4}", t.t, t.p))
                            .unwrap_or_default();
                        println!("{name}\t{stage}\tMAP {:.4}{sig}", report.map);
                    }
                }
            }
            (None, Some(run), Some(qrels)) => {
                let report = experiment::evaluate_files(&run, &qrels, cutoff, baseline.as_deref())?;
                print!("{}", report.to_jsonl());
            }
            _ => bail!("eval needs either --config or --run and --qrels"),
        },
        Command::Sweep {
            axis,
            config,
            pipeline,
            values,
            latency_queries,
            repetitions,
            out,
        } => {
            let c = load(&config.config)?;
            let plan = LatencyPlan {
                queries: latency_queries,
                repetitions,
            };
            let (kind, rows) = match axis {
                Axis::AdapterDrop => {
                    let values = if values.is_empty() {
                        (0..=c.encoder.num_layers).collect()
                    } else {
                        values
                    };
                    (
                        SweepKind::AdapterDrop,
                        experiment::sweep_adapter_drop(&c, &pipeline, &values, plan)?,
                    )
                }
                Axis::ReductionFactor => {
                    if values.is_empty() {
                        bail!("reduction-factor sweep needs --values");
                    }
                    (
                        SweepKind::ReductionFactor,
                        experiment::sweep_reduction_factor(&c, &pipeline, &values, plan)?,
                    )
                }
            };
            let table = experiment::format_sweep(kind, &rows);
            if let Some(out) = out {
                write_atomic(&out, table.as_bytes())?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(modrank_cli::exit_code(&e))
        }
    }
}
