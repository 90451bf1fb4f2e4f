use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metafed::harness::{gen_data, run_ablation, run_experiment, run_sweep, ExperimentConfig, SweepAxis, Table};
use metafed::protocol::Method;

/// Serverless cyclic knowledge-distillation FL simulator.
#[derive(Parser)]
#[command(name = "metafed", version)]
struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over every configured seed.
    Run(Common),
    /// Vary one hyperparameter and tabulate the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda0, l_t1, tap, share_norm, order or budget.
        #[arg(long)]
        axis: SweepAxis,
    },
    /// Run every ablation and baseline on paired splits.
    Ablate(Common),
    /// Export the generated splits as CSV files.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    /// INI-style configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeat or comma-separate); replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method to run.
    #[arg(long)]
    mode: Option<Method>,
}

impl Common {
    fn load(&self) -> metafed::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.hyper.method = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_table(table: &Table) {
    println!("{:<24} {:<18} {:>7} {:>9} {:>9} {:>14}", "value", "method", "rounds", "mean_acc", "std", "bytes");
    for r in &table.rows {
        println!(
            "{:<24} {:<18} {:>7} {:>9.4} {:>9.4} {:>14.0}",
            r.value, r.method.as_str(), r.rounds, r.mean_test_acc, r.std_test_acc, r.mean_total_bytes
        );
        for e in &r.errors {
            eprintln!("  seed {}: {}", e.seed, e.error);
        }
    }
}

fn execute(command: Command) -> metafed::Result<bool> {
    match command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let summary = run_experiment(&cfg)?;
            for r in &summary.runs {
                println!("seed {:<6} mean test acc {:.4}  bytes {}", r.seed, r.average_test_acc, r.total_bytes);
            }
            for e in &summary.errors {
                eprintln!("seed {}: {}", e.seed, e.error);
            }
            println!(
                "{} over {} seed(s): {:.4} ± {:.4}  ({})",
                summary.method,
                summary.runs.len(),
                summary.mean_test_acc,
                summary.std_test_acc,
                cfg.out_dir.display()
            );
            Ok(summary.errors.is_empty())
        }
        Command::Sweep { common, axis } => {
            let table = run_sweep(&common.load()?, axis)?;
            print_table(&table);
            Ok(table.rows.iter().all(|r| r.errors.is_empty()))
        }
        Command::Ablate(common) => {
            let table = run_ablation(&common.load()?)?;
            print_table(&table);
            Ok(table.rows.iter().all(|r| r.errors.is_empty()))
        }
        Command::GenData(common) => {
            let cfg = common.load()?;
            for (seed, checksum) in gen_data(&cfg)? {
                println!("seed {seed}: {checksum}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    // Bad arguments are configuration errors (exit 1), not clap's default 2.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.print_defaults {
        print!("{}", ExperimentConfig::default().to_ini());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (run, sweep, ablate, gen-data); see --help");
        return ExitCode::from(1);
    };
    match execute(command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
