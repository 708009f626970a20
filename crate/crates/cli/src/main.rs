use std::path::PathBuf;
use std::process::ExitCode;

use btdz_cli::commands;
use btdz_cli::pipeline::RunOptions;
use btdz_cli::{CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "btdz", version, about = "Zero-shot RL task-sampling testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and reports.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one offline dataset per seed.
    GenDataset(Common),
    /// Extract task vectors and fit the behavioral GMM.
    FitBtd(Common),
    /// Train the successor-feature policy library.
    Train(Common),
    /// Zero-shot evaluation on the test tasks.
    Eval(Common),
    /// Run the sweep described in the config.
    Sweep(Common),
    /// Check the uniform-task variance identity.
    ValidateProp1(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::GenDataset(c)
    | Command::FitBtd(c)
    | Command::Train(c)
    | Command::Eval(c)
    | Command::Sweep(c)
    | Command::ValidateProp1(c)) = &cli.command;
    let cfg = ExperimentConfig::load(&c.config)?;
    if c.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let opts = RunOptions {
        out: c.out.clone(),
        jobs: c.jobs,
        force: c.force,
    };
    let written = match &cli.command {
        Command::GenDataset(_) => commands::gen_dataset(&cfg, &opts)?,
        Command::FitBtd(_) => commands::fit_btd(&cfg, &opts)?,
        Command::Train(_) => commands::train(&cfg, &opts)?,
        Command::Eval(_) => commands::eval(&cfg, &opts)?,
        Command::Sweep(_) => {
            let s = commands::sweep(&cfg, &opts)?;
            for r in &s.summary {
                println!(
                    "{} {} d={} {} alpha={} K={}: ratio {:.4} ± {:.4}, return {:.4}",
                    r.env,
                    r.feature_family,
                    r.d,
                    r.sampler,
                    r.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
                    r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                    r.ratio_mean,
                    r.ratio_se.unwrap_or(f64::NAN),
                    r.return_mean
                );
            }
            [Some(s.report), Some(s.summary_path), s.svg].into_iter().flatten().collect()
        }
        Command::ValidateProp1(_) => {
            let result = commands::validate_prop1(&cfg, &opts);
            if let Ok(rows) = &result {
                for r in rows {
                    println!(
                        "seed {}: MC {:.6e} ± {:.2e} vs Tr/d {:.6e} (z = {:.2}), quadratic error {:.1e}: PASS",
                        r.seed, r.mc_estimate, r.mc_se, r.predicted, r.z_score, r.max_quadratic_error
                    );
                }
            }
            result?;
            vec![opts.out.join("prop1.csv")]
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).expect("error record serializes");
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
