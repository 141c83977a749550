//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::mnist;
use crate::pipeline::{Context, Options, StageReport};
use crate::table;

#[derive(Debug, Parser)]
#[command(name = "robustfeat", version, about = "Train, attack and compare center-loss classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download MNIST and verify checksums.
    Fetch(FetchArgs),
    /// Train every (run, seed) cell of a manifest.
    Train(StageArgs),
    /// Evaluate the attack grid on trained checkpoints.
    Attack(StageArgs),
    /// Feature statistics, feature dumps and local robustness.
    Metrics(StageArgs),
    /// Aggregate results into mean ± std tables with p-values.
    Table(StageArgs),
    /// train, attack, metrics and table in sequence.
    All(StageArgs),
    /// Check a manifest and print the resolved runs.
    Check(StageArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Destination directory.
    #[arg(long, env = crate::pipeline::MNIST_DIR_ENV, default_value = "data/mnist")]
    pub dir: PathBuf,
    /// Base URL to try before the built-in mirrors; repeatable.
    #[arg(long)]
    pub mirror: Vec<String>,
    /// Download even if the files exist.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Experiment manifest (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Use this seed instead of each run's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the manifest's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recompute outputs that already exist.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for independent (run, seed) cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// MNIST directory (overrides the manifest and the environment).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to these runs; repeatable.
    #[arg(long = "run")]
    pub runs: Vec<String>,
    /// Restrict to these attacks; repeatable.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
}

impl StageArgs {
    fn context(&self) -> Result<Context> {
        if self.jobs == 0 {
            return Err(Error::Usage("--jobs must be >= 1".into()));
        }
        Context::load(
            &self.config,
            Options {
                out: self.out.clone(),
                data_dir: self.data.clone(),
                force: self.force,
                jobs: self.jobs,
                seed: self.seed,
                runs: self.runs.clone(),
                attacks: self.attacks.clone(),
            },
        )
    }
}

fn report(stage: &str, r: &StageReport) {
    eprintln!("{stage}: {} written, {} up to date", r.produced.len(), r.skipped.len());
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch(a) => {
            let mut mirrors = a.mirror.clone();
            mirrors.extend(mnist::MIRRORS.iter().map(|s| s.to_string()));
            for p in mnist::fetch(&a.dir, &mirrors, a.force)? {
                println!("{}", p.display());
            }
        }
        Command::Train(a) => report("train", &a.context()?.train()?),
        Command::Attack(a) => report("attack", &a.context()?.attack()?),
        Command::Metrics(a) => report("metrics", &a.context()?.metrics()?),
        Command::Table(a) => print_table(&a.context()?)?,
        Command::All(a) => {
            let ctx = a.context()?;
            report("train", &ctx.train()?);
            report("attack", &ctx.attack()?);
            report("metrics", &ctx.metrics()?);
            print_table(&ctx)?;
        }
        Command::Check(a) => {
            let ctx = a.context()?;
            for r in ctx.runs()? {
                for s in &r.seeds {
                    println!("{}", ctx.cell_dir(&r, *s).display());
                }
            }
        }
    }
    Ok(())
}

fn print_table(ctx: &Context) -> Result<()> {
    let paths = table::write(ctx)?;
    let text = std::fs::read_to_string(&paths[0]).map_err(Error::io(&paths[0]))?;
    print!("{text}");
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
