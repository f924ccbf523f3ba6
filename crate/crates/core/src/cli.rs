//! Command-line surface. Every subcommand takes a config file plus
//! `--set key=value` overrides and runs one or more pipeline stages.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::Workspace;

#[derive(Debug, Parser)]
#[command(name = "mlloo", version, about = "Adversarial example detection from attribution dispersion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config field, e.g. `--set protocol.n_test=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to the config, then MLLOO_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Workspace root that relative paths resolve against. Defaults to the
    /// current directory.
    #[arg(long)]
    root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest data, train (or load) the classifier and select neurons.
    Train(Common),
    /// Generate every planned attack set.
    Attack(Common),
    /// Attribution dispersion features for every attack set.
    Features(Common),
    /// Fit the detectors.
    Fit(Common),
    /// Score the evaluation sets and write report.json.
    Eval(Common),
    /// Write ROC curves as CSV.
    Roc(Common),
    /// Run every stage end to end.
    Repro(Common),
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    // A second init (tests calling run_cli repeatedly) is harmless.
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

fn workspace(c: &Common) -> Result<Workspace> {
    let root = match &c.root {
        Some(r) => r.clone(),
        None => std::env::current_dir().map_err(|e| Error::io(".", e))?,
    };
    let mut config = ExperimentConfig::load(&root.join(&c.config), &c.overrides)?;
    if c.workers.is_some() {
        config.workers = c.workers;
    }
    config.validate()?;
    Ok(Workspace::new(config, &root))
}

fn execute(cmd: Command) -> Result<serde_json::Value> {
    let common = match &cmd {
        Command::Train(c)
        | Command::Attack(c)
        | Command::Features(c)
        | Command::Fit(c)
        | Command::Eval(c)
        | Command::Roc(c)
        | Command::Repro(c) => c,
    };
    let mut ws = workspace(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ws.config.worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let out = ws.out.display().to_string();
        let v = match cmd {
            Command::Train(_) => {
                let test = ws.test_data()?;
                let model = ws.train()?;
                let sel = ws.selection(&model, &test)?;
                json!({ "model_hash": model.content_hash(), "selection_hash": sel.hash(), "num_features": sel.num_neurons() })
            }
            Command::Attack(_) => {
                let test = ws.test_data()?;
                let model = ws.model()?;
                ws.attacks(&model, &test)?;
                json!({ "sets": ws.plan.sets.iter().map(|s| s.stem()).collect::<Vec<_>>() })
            }
            Command::Features(_) => {
                let model = ws.model()?;
                ws.features(&model)?;
                json!({ "sets": ws.plan.sets.iter().map(|s| s.stem()).collect::<Vec<_>>() })
            }
            Command::Fit(_) => {
                ws.fit()?;
                json!({ "detectors": ws.plan.detectors })
            }
            Command::Eval(_) => {
                let report = ws.eval()?;
                json!({ "report": ws.path("report.json"), "legs": report.legs.len() })
            }
            Command::Roc(_) => json!({ "curves": ws.roc()? }),
            Command::Repro(_) => {
                let report = ws.repro()?;
                json!({ "report": ws.path("report.json"), "legs": report.legs.len() })
            }
        };
        ws.write_timing()?;
        Ok(json!({ "ok": true, "output_dir": out, "result": v }))
    })
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit status; failures print a JSON object with an
/// error code on stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return 2;
        }
    };
    init_logging();
    match execute(cli.command) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code(), "message": e.to_string() }));
            1
        }
    }
}
