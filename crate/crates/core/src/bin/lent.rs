use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lent_core::cli_runner::{
    run_identity_suite, run_isotropic, run_sde_transform, ExperimentConfig, RunOutcome,
};
use lent_core::Result;

#[derive(Parser, Debug)]
#[command(name = "lent", version, about = "Seeded lent particle experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration; all sections default when omitted.
    #[arg(long, global = true, env = "LENT_CONFIG")]
    config: Option<PathBuf>,

    /// Run seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true, env = "LENT_SEED")]
    seed: Option<u64>,

    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true, env = "LENT_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for replica loops (0 = all cores).
    #[arg(long, global = true, env = "LENT_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Planar jump process with uniform angles.
    Isotropic,
    /// Jumps transformed by a diffusion.
    Sde,
    /// Closed-form identities as a pass/fail table.
    Suite,
}

fn run(cli: &Cli) -> Result<RunOutcome> {
    let (mut config, notes) = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml("")?,
    };
    for n in notes {
        eprintln!("[lent] {n}");
    }
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    let seed = config.require_seed()?;
    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    eprintln!("[lent] seed {seed}, writing to {}", out.display());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| lent_core::LentError::Config(format!("threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Isotropic => run_isotropic(&config, seed, &out),
        Command::Sde => run_sde_transform(&config, seed, &out),
        Command::Suite => run_identity_suite(&config, seed, &out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.table());
            for f in &outcome.files {
                eprintln!("[lent] wrote {}", f.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
