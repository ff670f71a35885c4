use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use edgedash::config::{self, ConfigError};
use edgedash::dashcam::{serve, DashCamCatalog};
use edgedash::metrics::{aggregate, read_csv_file, render_table};
use edgedash::node::{run_master, run_worker};
use edgedash::workload::{gen_workloads, GenSpec};

#[derive(Parser)]
#[command(name = "edgedash", version, about = "Distributed dash-cam video analytics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve a catalog directory as the emulated dash cam.
    Dashcam {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Run the master node.
    Master {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set run.pairs=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Run a worker node.
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        master: Option<String>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate a synthetic workload catalog.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Summarize one or more metrics CSV files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Print the aggregate as JSON.
        #[arg(long)]
        json: bool,
        /// Video length used for the near-real-time fraction.
        #[arg(long)]
        granularity_ms: Option<u64>,
    },
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn with_flags(mut overrides: Vec<String>, flags: &[(&str, Option<String>)]) -> Vec<String> {
    overrides.extend(flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}"))));
    overrides
}

fn path_flag(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| quoted(&p.display().to_string()))
}

fn load_gen_spec(path: &Path, overrides: &[String]) -> Result<GenSpec, ConfigError> {
    let spec: GenSpec = config::load(path, overrides)?;
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Dashcam { port, catalog, bind } => {
            let cat = DashCamCatalog::from_dir(&catalog)?;
            let handle = serve((bind.as_str(), port), cat).with_context(|| format!("cannot listen on {bind}:{port}"))?;
            info!("dash cam serving {} on {}", catalog.display(), handle.local_addr());
            handle.join();
        }
        Cmd::Master { config, overrides, listen, output_dir, pairs } => {
            let overrides = with_flags(
                overrides,
                &[
                    ("listen", listen.map(|l| quoted(&l))),
                    ("output_dir", path_flag(output_dir)),
                    ("run.pairs", pairs.map(|p| p.to_string())),
                ],
            );
            let cfg = config::load_master(&config, &overrides)?;
            let report = run_master(cfg)?;
            print!("{}", render_table(&report.aggregate));
            println!("report written to {}", report.output_dir.display());
        }
        Cmd::Worker { config, overrides, master, name } => {
            let overrides =
                with_flags(overrides, &[("master", master.map(|m| quoted(&m))), ("name", name.map(|n| quoted(&n)))]);
            let cfg = config::load_worker(&config, &overrides)?;
            let summary = run_worker(&cfg)?;
            info!("{} processed {} videos", cfg.name, summary.processed);
        }
        Cmd::Gen { spec, overrides, output_dir } => {
            let overrides = with_flags(overrides, &[("output_dir", path_flag(output_dir))]);
            let spec = load_gen_spec(&spec, &overrides)?;
            let files = gen_workloads(&spec)?;
            println!("wrote {} manifests to {}", files.len(), spec.output_dir.display());
        }
        Cmd::Report { files, json, granularity_ms } => {
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(read_csv_file(f).with_context(|| f.display().to_string())?);
            }
            if rows.is_empty() {
                bail!("no metrics rows");
            }
            let agg = aggregate(&rows, granularity_ms);
            if json {
                println!("{}", serde_json::to_string_pretty(&agg)?);
            } else {
                print!("{}", render_table(&agg));
            }
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgedash: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
