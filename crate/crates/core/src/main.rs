use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fedpisa::cli::{self, CliError, CommonArgs};
use fedpisa::Strategy;

#[derive(Parser)]
#[command(name = "fedpisa", version, about = "Federated identity/style LoRA personalization simulator")]
struct Cli {
    /// Worker threads for client-local training (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Output directory (default: $FEDPISA_OUT/<name> or ./results/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master and world seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    /// Override a config key, e.g. --set schedule.style_steps=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its results bundle.
    Run(Common),
    /// Re-run one experiment per temperature on a shared world.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
    },
    /// Re-run with different timbre/stylization splits of a fixed budget.
    SweepSteps {
        #[command(flatten)]
        common: Common,
        #[arg(long = "m", value_delimiter = ',', required = true)]
        m_list: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        total: usize,
    },
    /// Summarize a results directory.
    Report { dir: PathBuf },
}

fn common(c: Common) -> Result<CommonArgs, CliError> {
    let strategy = c
        .strategy
        .map(|s| s.parse::<Strategy>())
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(CommonArgs { config: c.config, out: c.out, seed: c.seed, strategy, set: c.set, force: c.force })
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(c) => {
            let res = cli::cmd_run(&common(c)?)?;
            println!(
                "{}: {} rounds, final expressive mse {:.6}, cost {:.6} GiB",
                res.out_dir.display(),
                res.bundle.rounds.len(),
                res.bundle.final_mean_expressive_mse(),
                res.bundle.ledger.total_cost_gib()
            );
        }
        Command::SweepTau { common: c, taus } => {
            let (root, rows) = cli::cmd_sweep_tau(&common(c)?, &taus)?;
            for row in rows {
                println!("{}: final expressive mse {:.6}", row.label, row.bundle.final_mean_expressive_mse());
            }
            println!("{}", root.join(cli::SWEEP_TAU_FILE).display());
        }
        Command::SweepSteps { common: c, m_list, total } => {
            let (root, rows) = cli::cmd_sweep_steps(&common(c)?, &m_list, total)?;
            for row in rows {
                println!(
                    "{}: identity error {:.6}, expressive mse {:.6}",
                    row.label,
                    row.bundle.final_mean_identity_error(),
                    row.bundle.final_mean_expressive_mse()
                );
            }
            println!("{}", root.join(cli::SWEEP_STEPS_FILE).display());
        }
        Command::Report { dir } => print!("{}", cli::cmd_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")
        {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    }
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
