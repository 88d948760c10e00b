use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hatescope::config::PipelineConfig;
use hatescope::pipeline::{Pipeline, PipelineError, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "hatescope", version, about = "Build textual and visual hateful-content datasets from a post corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "hatescope.toml")]
    config: PathBuf,

    /// Overrides the sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the toxicity threshold for `toxicity`, the similarity
    /// threshold for every other command.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    Ingest,
    Toxicity,
    Keywords,
    Phrases,
    /// Serve the annotation API until interrupted.
    AnnotateServe,
    Match,
    Embed,
    Score,
    Sample,
    Agreement,
    Calibrate,
    Phash,
    BuildDatasets,
    Analyze,
    /// Write the summary report (markdown and JSON).
    Report,
    /// Every batch stage in dependency order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Toxicity => Stage::Toxicity,
            Command::Keywords => Stage::Keywords,
            Command::Phrases => Stage::Phrases,
            Command::AnnotateServe => Stage::AnnotateServe,
            Command::Match => Stage::Match,
            Command::Embed => Stage::Embed,
            Command::Score => Stage::Score,
            Command::Sample => Stage::Sample,
            Command::Agreement => Stage::Agreement,
            Command::Calibrate => Stage::Calibrate,
            Command::Phash => Stage::Phash,
            Command::BuildDatasets => Stage::BuildDatasets,
            Command::Analyze => Stage::Analyze,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn print(outcome: &StageOutcome) {
    let status = match outcome.status {
        hatescope::pipeline::Status::Ran => "ran",
        hatescope::pipeline::Status::Cached => "cached",
    };
    println!("{}: {status} {}", outcome.stage, outcome.summary);
}

fn serve(pipeline: Pipeline) -> Result<(), PipelineError> {
    let svc = pipeline.annotation_service()?;
    let bind = pipeline.config().annotation.bind.clone();
    let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Precondition(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| PipelineError::Precondition(format!("cannot bind {bind}: {e}")))?;
        println!("annotation API on http://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or(bind));
        tokio::select! {
            res = hatescope::agreement::serve(listener, svc) => {
                res.map_err(|e| PipelineError::Precondition(format!("server: {e}")))
            }
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })?;
    drop(pipeline);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threshold {
        if cli.command == Command::Toxicity {
            cfg.toxicity.threshold = t;
        } else {
            cfg.similarity.threshold = t;
        }
    }
    let mut pipeline = Pipeline::open(cfg)?;
    match cli.command.stage() {
        Some(Stage::AnnotateServe) => serve(pipeline),
        Some(stage) => {
            print(&pipeline.run(stage)?);
            Ok(())
        }
        None => {
            for stage in Stage::BATCH {
                print(&pipeline.run(stage)?);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
