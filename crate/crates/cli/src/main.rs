use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use momentloc::harness::commands::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, Split};
use momentloc::harness::RunConfig;
use momentloc::spatial::GraphVariant;
use momentloc::{Error, Result};

/// Natural-language moment localization with a language-conditioned
/// spatio-temporal graph.
#[derive(Parser, Debug)]
#[command(name = "momentloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `paths.dataset`.
    Synth(Common),
    /// Train and write the best checkpoint and the training log.
    Train(Common),
    /// Score a checkpoint and dump per-pair predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Compare tape gradients with central differences on a tiny instance.
    Gradcheck(Common),
    /// Train every variant and iteration count under one seed.
    Ablate(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<GraphVariant>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    swap_degenerate: bool,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Start from the desk-scale synthetic settings instead of the paper-scale defaults.
    #[arg(long)]
    synthetic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.synthetic => RunConfig::synthetic_default(),
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(v) = self.variant {
            c.graph.variant = v;
        }
        if let Some(n) = self.iterations {
            c.graph.iterations = n;
        }
        if self.swap_degenerate {
            c.eval.swap_degenerate = true;
        }
        if let Some(r) = &self.report {
            c.paths.report = Some(r.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth(common) => {
            let dir = cmd_synth(&common.resolve()?)?;
            println!("wrote synthetic dataset to {}", dir.display());
        }
        Command::Train(common) => {
            let log = cmd_train(&common.resolve()?)?;
            match (log.best_epoch, log.best_val_miou) {
                (Some(e), Some(m)) => println!("best val mIoU {m:.2} at epoch {e}"),
                (Some(e), None) => println!("kept parameters from epoch {e}"),
                _ => println!("no epochs run; saved initial parameters"),
            }
        }
        Command::Eval { common, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let (out, _) = cmd_eval(&common.resolve()?, split)?;
            print!("{}", out.report.to_table());
        }
        Command::Gradcheck(common) => {
            let reports = cmd_gradcheck(&common.resolve()?)?;
            for r in &reports {
                println!("variant {} (N={})", r.options.variant, r.options.iterations);
                print!("{}", r.to_table());
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::Ablate(common) => {
            print!("{}", cmd_ablate(&common.resolve()?)?.to_csv());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
