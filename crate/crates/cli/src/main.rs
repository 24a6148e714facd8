use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rd_core::crop::CropMode;
use rd_core::dsl;
use rd_core::eval::Metric;
use rd_core::filter::ScoreSpace;
use rd_core::pipeline::{self, PipelineConfig, PipelineError, Stage, StageStatus, ToolMode};

#[derive(Parser)]
#[command(name = "rdistill", version, about = "Build rationale-distillation training sets for VQA students")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the mock tools regardless of the config
    #[arg(long, global = true)]
    mock: bool,
    /// More logging (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Split tall or wide images into square-ish crops
    Crop {
        /// verbatim or full-coverage (default: from the config)
        #[arg(long)]
        mode: Option<CropMode>,
    },
    /// Ask the tools for a rationale per image and crop
    GenerateRationales,
    /// Categorize crop rationales with the verifier, then balance None crops
    Filter {
        /// Boost factor a useful rationale must reach
        #[arg(long)]
        lambda: Option<f64>,
        /// probability or log
        #[arg(long)]
        space: Option<ScoreSpace>,
    },
    /// Write the training task files
    BuildTasks {
        /// Comma separated: qra,apr,qraci,apraci,qid,ans-only
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
    },
    /// Every stage, skipping those already up to date
    Run,
    /// Check the config and its inputs without running anything
    Validate,
    /// Pick one answer per example from beam hypotheses
    Vote {
        /// JSONL with example_id, decoded, prob
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Replace answers by the result of their program first
        #[arg(long)]
        calculator: bool,
    },
    /// Score predictions against gold answers
    Eval {
        #[arg(long, value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL with example_id and gold_answers (an examples file works)
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Program language utilities
    Dsl {
        #[command(subcommand)]
        command: DslCommand,
    },
}

#[derive(Subcommand)]
enum DslCommand {
    /// Parse and run one program, printing its result
    Exec { program: String },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse()
}

fn load_config(global: &Global) -> Result<PipelineConfig, PipelineError> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.mock {
        cfg.tools.mode = ToolMode::Mock;
    }
    Ok(cfg)
}

fn run_stages(global: &Global, stages: &[Stage], tweak: impl FnOnce(&mut PipelineConfig)) -> Result<(), PipelineError> {
    let mut cfg = load_config(global)?;
    tweak(&mut cfg);
    cfg.task_kinds()?;
    cfg.filter
        .filter_config()
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let problems = pipeline::validate(&cfg);
    if !problems.is_empty() {
        return Err(PipelineError::Invalid(problems));
    }
    let report = pipeline::run(&cfg, stages)?;
    for (stage, status) in report.stages {
        match status {
            StageStatus::Ran { records } => println!("{:<20} ran ({records} records)", stage.name()),
            StageStatus::Skipped => println!("{:<20} up to date", stage.name()),
        }
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn dsl_exec(source: &str) -> Result<(), String> {
    let program = dsl::parse(source).map_err(|e| e.to_string())?;
    let result = dsl::execute(&program).map_err(|e| e.to_string())?;
    match result.render() {
        Some(text) => println!("{}", text.map_err(|e| e.to_string())?),
        None => println!("{program} (Find: the model answer is kept)"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let g = &cli.global;
    match cli.command {
        Command::Crop { mode } => run_stages(g, &[Stage::Crop], |cfg| {
            if let Some(mode) = mode {
                cfg.crop_mode = mode;
            }
        }),
        Command::GenerateRationales => run_stages(g, &[Stage::Rationales], |_| {}),
        Command::Filter { lambda, space } => run_stages(g, &[Stage::Filter, Stage::Balance], |cfg| {
            if let Some(lambda) = lambda {
                cfg.filter.boost_factor = lambda;
            }
            if let Some(space) = space {
                cfg.filter.space = space;
            }
        }),
        Command::BuildTasks { tasks } => run_stages(g, &[Stage::Tasks], |cfg| {
            if let Some(tasks) = tasks {
                cfg.tasks = tasks;
            }
        }),
        Command::Run => run_stages(g, &Stage::ALL, |_| {}),
        Command::Validate => {
            let cfg = load_config(g)?;
            let problems = pipeline::validate(&cfg);
            if problems.is_empty() {
                println!("config ok");
                Ok(())
            } else {
                Err(PipelineError::Invalid(problems))
            }
        }
        Command::Vote { input, output, calculator } => {
            let n = pipeline::run_vote(&input, &output, calculator)?;
            println!("wrote {n} predictions to {}", output.display());
            Ok(())
        }
        Command::Eval { metric, predictions, gold, output } => {
            let report = pipeline::run_eval(&predictions, &gold, metric, output.as_deref())?;
            println!("{} {:.4} over {} examples", report.metric, report.mean, report.per_example.len());
            Ok(())
        }
        Command::Dsl { command: DslCommand::Exec { program } } => dsl_exec(&program).map_err(PipelineError::Config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

