//! `ibss`: synthesize scenes, extract features, separate, and report.

mod bss;
mod config;
mod evaluate;
mod featurize;
mod manifest;
mod report;
mod synth;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "ibss", version, about = "Nonlinear blind source separation from local velocity statistics")]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set bss.min_count=300`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a two-voice scene (or a toy trajectory) with ground truth.
    Synth {
        /// Length in seconds; overrides the configured duration.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Log mel features of a WAV file, reduced to a low-dimensional trajectory.
    Featurize {
        /// Defaults to the scene recorded in the run manifest.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Stop after the feature file.
        #[arg(long)]
        no_reduce: bool,
    },
    /// Separate a trajectory (CSV or binary).
    Bss {
        /// Defaults to the trajectory recorded in the run manifest.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Summarize a run and score it against ground truth when available.
    Report {
        /// Ground-truth CSV; defaults to the one in the manifest.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// What every command needs: the run directory, its manifest and the config.
pub struct Ctx {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub manifest: Manifest,
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, name: &str, command: &str, role: &str) -> Result<()> {
        self.manifest.record(&self.dir, name, command, role)
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn echo_config(&mut self, command: &str) -> Result<()> {
        let name = format!("config_{command}.toml");
        std::fs::write(self.path(&name), config::echo(&self.cfg)?).with_context(|| format!("writing {name}"))?;
        self.record(&name, command, &format!("config_{command}"))
    }

    pub fn finish(&self) -> Result<()> {
        self.manifest.save(&self.dir)
    }

    /// `explicit`, else the manifest entry with `role`.
    pub fn input(&self, explicit: Option<&Path>, role: &str) -> Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p.to_path_buf()),
            None => self
                .manifest
                .find(&self.dir, role)?
                .with_context(|| format!("no --input given and no `{role}` in {}", self.dir.join(manifest::FILE).display())),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Command::Report { truth } = &cli.command {
        return report::run(&cli.out, truth.as_deref());
    }
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut ctx = Ctx {
        manifest: Manifest::load_or_default(&cli.out)?,
        dir: cli.out,
        cfg,
    };
    match cli.command {
        Command::Synth { duration } => synth::run(&mut ctx, duration)?,
        Command::Featurize { input, no_reduce } => featurize::run(&mut ctx, input.as_deref(), no_reduce)?,
        Command::Bss { input } => bss::run(&mut ctx, input.as_deref())?,
        Command::Report { .. } => unreachable!("handled above"),
    }
    ctx.finish()
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
