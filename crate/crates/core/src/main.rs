use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use decrec::config::ExperimentConfig;
use decrec::dataset::synthetic_movielens;
use decrec::run::{self, MANIFEST_FILE};
use decrec::{Error, Result};

/// Simulate poisoning attacks and defenses in a decentralized recommender.
#[derive(Parser)]
#[command(name = "decrec", version)]
struct Cli {
    #[command(flatten)]
    opts: RunOpts,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone, Default)]
struct RunOpts {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// movielens_dat or csv.
    #[arg(long, global = true)]
    format: Option<String>,
    /// none, ra, eb, psmu or pamn.
    #[arg(long, global = true)]
    attack: Option<String>,
    /// none, median, trimmed, krum, l2clip or ucsu.
    #[arg(long, global = true)]
    defense: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    rounds: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (the default).
    Run,
    /// One run per value of a numeric key, combined into one CSV.
    Sweep {
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Re-run the experiment a manifest describes.
    Replay {
        /// A manifest file or the directory holding it.
        manifest: PathBuf,
    },
    /// Write a synthetic MovieLens-format dataset.
    SynthFixture {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long = "fixture-seed", default_value_t = 0)]
        fixture_seed: u64,
        /// Destination file.
        path: PathBuf,
    },
}

fn resolve(opts: &RunOpts) -> Result<ExperimentConfig> {
    let mut c = match &opts.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let flags = [
        ("dataset_path", opts.dataset.as_ref().map(|p| p.display().to_string())),
        ("dataset_format", opts.format.clone()),
        ("attack", opts.attack.clone()),
        ("defense", opts.defense.clone()),
        ("seed", opts.seed.clone()),
        ("rounds", opts.rounds.clone()),
        ("output_path", opts.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            c.set(key, &v)?;
        }
    }
    for kv in &opts.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command.unwrap_or(Command::Run) {
        Command::Run => {
            let c = resolve(&cli.opts)?;
            let t = run::run(&c, None)?;
            if let Some(last) = t.records.last() {
                eprintln!("round {}: HR@{k} {:.6}, ER@{k} {:.6}", last.round, last.hr_at_k, last.er_at_k, k = c.top_k);
            }
        }
        Command::Sweep { key, values } => {
            let c = resolve(&cli.opts)?;
            for (v, t) in run::sweep(&c, &key, &values, None)? {
                if let Some(last) = t.records.last() {
                    eprintln!("{key} = {v}: HR {:.6}, ER {:.6}", last.hr_at_k, last.er_at_k);
                }
            }
        }
        Command::Replay { manifest } => {
            let path = if manifest.is_dir() { manifest.join(MANIFEST_FILE) } else { manifest };
            let out = cli
                .opts
                .out
                .ok_or_else(|| Error::Config("replay needs --out".into()))?;
            run::replay(&path, &out)?;
        }
        Command::SynthFixture { users, items, fixture_seed, path } => {
            let text = synthetic_movielens(users, items, (20, 60), fixture_seed);
            std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
