use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trialcf_core::fixture::{synthetic_corpus, synthetic_questions};
use trialcf_core::imagination::PredictMode;
use trialcf_core::pipeline::{evaluate_files, Pipeline, PipelineError, RunConfig, Stage};
use trialcf_core::reward_eval::{write_questions, EvalKind};
use trialcf_core::trial_model::{Discretization, UnitRef};

#[derive(Parser)]
#[command(name = "trialcf", version, about = "Counterfactual clinical-trial result imagination")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set grpo.iterations=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize the corpus.
    Ingest,
    /// Mine natural outcome-measure and same-drug arm pairs.
    MinePairs,
    /// Build the similarity graph and approximate pairs.
    BuildGraph {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        /// `offline` or `http`.
        #[arg(long)]
        provider: Option<String>,
    },
    /// Build perturbation evaluation sets.
    BuildEvalSet {
        /// `outcome` or `arm`; both when omitted.
        #[arg(long)]
        kind: Option<EvalKind>,
    },
    /// Supervised fine-tuning on natural pairs.
    TrainSft,
    /// Reinforcement fine-tuning with verifier rewards.
    TrainGrpo,
    /// Predict results for the evaluation sets, or for one source/target pair.
    Imagine {
        #[arg(long, requires = "target")]
        source: Option<UnitRef>,
        #[arg(long, requires = "source")]
        target: Option<UnitRef>,
        /// `map` or `marginal`.
        #[arg(long)]
        mode: Option<PredictMode>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score predictions; standalone when both files are given.
    Evaluate {
        #[arg(long, requires = "predictions")]
        questions: Option<PathBuf>,
        #[arg(long, requires = "questions")]
        predictions: Option<PathBuf>,
    },
    /// Summarize whatever the run directory holds.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Write a synthetic corpus, questions and config.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn open_pipeline(cli: &Cli, extra: &[String]) -> Result<Pipeline, PipelineError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::Config("--config is required for this command".into()))?;
    let mut overrides = cli.overrides.clone();
    overrides.extend_from_slice(extra);
    let (cfg, base) = RunConfig::load(path, &overrides)?;
    Pipeline::new(cfg, base)
}

fn run_one(p: &mut Pipeline, stage: Stage) -> Result<(), PipelineError> {
    let status = p.run_stage(stage)?;
    println!("{}: {status}", stage.name());
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| PipelineError::Runtime {
        stage: "output".into(),
        message: e.to_string(),
    })?;
    println!("{text}");
    Ok(())
}

const FIXTURE_CONFIG: &str = r#"variables = ["condition", "enrollment", "geography", "phase", "sponsor"]

[corpus]
path = "corpus.jsonl"
questions = "questions.jsonl"

[graph]
delta = 0.8
m = 3

[sft]
epochs = 200

[grpo]
iterations = 100

[run]
output_dir = "run"
"#;

fn make_fixture(out: &Path, trials: usize, seed: u64) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::Runtime {
        stage: "make-fixture".into(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(out).map_err(io)?;
    let corpus = synthetic_corpus(trials, seed);
    corpus
        .save(&out.join("corpus.jsonl"), "v1")
        .map_err(|e| PipelineError::Runtime {
            stage: "make-fixture".into(),
            message: e.to_string(),
        })?;
    let questions = synthetic_questions(&corpus, &Discretization::default(), 3);
    let file = std::fs::File::create(out.join("questions.jsonl")).map_err(io)?;
    write_questions(std::io::BufWriter::new(file), &questions).map_err(|e| PipelineError::Runtime {
        stage: "make-fixture".into(),
        message: e.to_string(),
    })?;
    let cfg = out.join("config.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, FIXTURE_CONFIG).map_err(io)?;
    }
    println!("wrote {} trials and {} questions to {}", corpus.len(), questions.len(), out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::MakeFixture { out, trials, seed } => make_fixture(out, *trials, *seed),
        Command::Evaluate {
            questions: Some(q),
            predictions: Some(p),
        } => print_json(&evaluate_files(q, p)?),
        Command::Imagine {
            source: Some(source),
            target: Some(target),
            mode,
            checkpoint,
        } => {
            let p = open_pipeline(cli, &[])?;
            print_json(&p.imagine_units(source, target, *mode, checkpoint.as_deref())?)
        }
        Command::Imagine { mode, checkpoint, .. } => {
            if checkpoint.is_some() {
                return Err(PipelineError::Config(
                    "--checkpoint applies only with --source/--target".into(),
                ));
            }
            let extra: Vec<String> = mode
                .iter()
                .map(|m| format!("imagination.mode={}", mode_name(*m)))
                .collect();
            run_one(&mut open_pipeline(cli, &extra)?, Stage::Imagine)
        }
        Command::BuildGraph { delta, m, provider } => {
            let mut extra = Vec::new();
            if let Some(d) = delta {
                extra.push(format!("graph.delta={d:?}"));
            }
            if let Some(m) = m {
                extra.push(format!("graph.m={m}"));
            }
            if let Some(p) = provider {
                extra.push(format!("provider.mode={p}"));
            }
            run_one(&mut open_pipeline(cli, &extra)?, Stage::BuildGraph)
        }
        Command::BuildEvalSet { kind } => {
            let mut p = open_pipeline(cli, &[])?;
            if let Some(k) = kind {
                p.set_eval_kinds(vec![*k]);
            }
            run_one(&mut p, Stage::BuildEvalSet)
        }
        Command::Pipeline => {
            let mut p = open_pipeline(cli, &[])?;
            p.run_all(|s, status| println!("{}: {status}", s.name()))
        }
        cmd => {
            let stage = match cmd {
                Command::Ingest => Stage::Ingest,
                Command::MinePairs => Stage::MinePairs,
                Command::TrainSft => Stage::TrainSft,
                Command::TrainGrpo => Stage::TrainGrpo,
                Command::Evaluate { .. } => Stage::Evaluate,
                Command::Report => Stage::Report,
                _ => unreachable!("handled above"),
            };
            run_one(&mut open_pipeline(cli, &[])?, stage)
        }
    }
}

fn mode_name(m: PredictMode) -> &'static str {
    match m {
        PredictMode::Map => "map",
        PredictMode::Marginal => "marginal",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: config error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
