use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctxaug::pipeline::{validate, BackendSpec, Pipeline, PipelineConfig, Preset, StageOutcome, Status};
use ctxaug::{Error, Strategy};

#[derive(Parser, Debug)]
#[command(name = "ctxaug", version, about = "Augment, score, filter and export conversational training data")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from shipped defaults (qrecc or topiocqa) when no config is given.
    #[arg(long, global = true)]
    preset: Option<Preset>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Comma-separated subset of tom,tum,reo,noi,para,ent,int.
    #[arg(long, global = true, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,

    /// Replay scripted completions from DIR/completions.jsonl.
    #[arg(long, global = true, value_name = "DIR")]
    mock: Option<PathBuf>,

    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    Deps,
    Augment,
    Score,
    Filter,
    Export,
    TrainToy,
    Validate,
    /// Every stage in order, then validation.
    RunAll,
}

fn build_config(cli: &Cli) -> ctxaug::Result<PipelineConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(p)) => PipelineConfig::preset(p),
        (None, None) => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = &cli.strategies {
        cfg.strategies = s.clone();
    }
    if let Some(dir) = &cli.mock {
        cfg.backend.completion = Some(BackendSpec::Mock(dir.clone()));
    }
    if let Some(c) = &cli.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn summarize(o: &StageOutcome) {
    let m = &o.manifest;
    println!(
        "{:<9} {} ok={} degenerate={} failed={} output={}",
        m.stage,
        if o.reused { "reused  " } else { "computed" },
        m.count(|s| *s == Status::Ok),
        m.count(|s| matches!(s, Status::Degenerate(_))),
        m.count(Status::is_failed),
        &m.output_digest[..12]
    );
}

fn run_validate(p: &Pipeline) -> ctxaug::Result<bool> {
    let report = validate(p)?;
    let checks: usize = report.checked.values().sum();
    println!("validate  {checks} checks, {} violations", report.violations.len());
    for v in &report.violations {
        println!("  {v}");
    }
    Ok(report.is_clean())
}

fn run(cli: &Cli) -> ctxaug::Result<bool> {
    let pipeline = Pipeline::new(build_config(cli)?)?;
    match cli.command {
        Command::Deps => summarize(&pipeline.deps()?),
        Command::Augment => summarize(&pipeline.augment()?),
        Command::Score => summarize(&pipeline.score()?),
        Command::Filter => summarize(&pipeline.filter()?),
        Command::Export => summarize(&pipeline.export()?),
        Command::TrainToy => {
            let (outcome, report) = pipeline.train_toy()?;
            summarize(&outcome);
            println!(
                "loss {:.4} -> {:.4} (ratio {:.3}); positive cos {:.3}, hard-negative cos {:.3}",
                report.initial_loss,
                report.final_loss,
                report.loss_ratio,
                report.final_similarity.positive_cosine,
                report.final_similarity.hard_negative_cosine
            );
        }
        Command::Validate => return run_validate(&pipeline),
        Command::RunAll => {
            for o in pipeline.run_all()? {
                summarize(&o);
            }
            return run_validate(&pipeline);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ConfigInvalid(_) | Error::MissingPrerequisiteStage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
