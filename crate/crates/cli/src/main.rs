use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ascvel::pipeline::{self, Executor, RunConfig};
use ascvel::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Acoustics-specific piano velocity transcription experiments.
#[derive(Parser)]
#[command(name = "ascvel", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or ingest performances, split them and render audio.
    DatasetBuild(Common),
    /// Separate every recording into per-note MFCC features.
    Separate(Common),
    /// Train and score the configured trials.
    Train(Common),
    /// Train and score the full 36-config grid.
    Gridsearch(Common),
    /// Write plots, the win table and statistics for the results store.
    Report(Common),
    /// Print the run configuration JSON schema.
    Schema,
    #[command(hide = true)]
    Worker {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trial: String,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config)?;
    let out = common
        .output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no --output given and no output_dir in the config".into()))?;
    Ok((cfg, out))
}

fn executor(cfg: &RunConfig) -> Result<Executor> {
    let workers = cfg.effective_workers()?;
    if workers == 1 {
        return Ok(Executor::InProcess);
    }
    let exe = std::env::current_exe().map_err(|e| Error::Config(format!("own path: {e}")))?;
    Ok(Executor::Processes { exe, workers })
}

fn train(common: &Common, full_grid: bool) -> Result<()> {
    let (cfg, out) = load(common)?;
    let ex = executor(&cfg)?;
    let run = if full_grid {
        pipeline::cmd_gridsearch
    } else {
        pipeline::cmd_train
    };
    let s = run(&cfg, &out, &ex)?;
    println!(
        "{} trials: {} run, {} resumed, {} invalid; results in {}",
        s.scheduled,
        s.ran,
        s.resumed,
        s.invalid,
        out.join(ascvel::evaluation::RESULTS_FILE).display()
    );
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let bundle = pipeline::cmd_report(out)?;
    for f in &bundle.files {
        println!("{}", f.display());
    }
    println!();
    print!("{}", bundle.win_table.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::DatasetBuild(c) => {
            let (cfg, out) = load(&c)?;
            let s = pipeline::cmd_dataset_build(&cfg, &out)?;
            println!(
                "{} recordings, {} notes; {} rendered, {} files written",
                s.n_recordings, s.n_notes, s.rendered, s.files_written
            );
        }
        Cmd::Separate(c) => {
            let (cfg, out) = load(&c)?;
            let s = pipeline::cmd_separate(&cfg, &out)?;
            println!(
                "{} note features{}; {} recordings flagged",
                s.n_features,
                if s.recomputed { "" } else { " (up to date)" },
                s.flagged.len()
            );
            for f in &s.flagged {
                println!("  {}: {}", f.id, f.reason);
            }
        }
        Cmd::Train(c) => train(&c, false)?,
        Cmd::Gridsearch(c) => train(&c, true)?,
        Cmd::Report(c) => {
            let (_, out) = load(&c)?;
            report(&out)?;
        }
        Cmd::Schema => print!("{}", pipeline::RUN_CONFIG_SCHEMA),
        Cmd::Worker { common, trial } => {
            let (cfg, out) = load(&common)?;
            pipeline::cmd_worker(&cfg, &out, &trial)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
