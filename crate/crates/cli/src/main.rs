use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use samlab::config::Experiment;
use samlab::{run_from_path, Invocation};

#[derive(Parser, Debug)]
#[command(name = "samlab", version, about = "Sharpness-aware minimization experiments")]
struct Cli {
    #[arg(value_enum)]
    subcommand: Experiment,
    /// TOML or JSON config, chosen by extension.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides SAMLAB_OUTPUT and the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn main() -> ExitCode {
    // Usage errors are hard failures; 2 is reserved for soft failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    if let Some(jobs) = cli.jobs {
        anyhow::ensure!(jobs >= 1, "--jobs must be at least 1");
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let inv = Invocation {
        output: cli.output.clone(),
        seed_offset: cli.seed_offset,
        sequential: cli.jobs == Some(1),
    };
    let env = std::env::var("SAMLAB_OUTPUT").ok();
    let (outcome, root) = run_from_path(cli.subcommand, &cli.config, &inv, env.as_deref())?;
    for line in &outcome.report {
        println!("{line}");
    }
    for f in &outcome.soft_failures {
        eprintln!("soft failure: {f}");
    }
    for f in &outcome.hard_failures {
        eprintln!("FAILED: {f}");
    }
    println!("outputs in {}", root.display());
    Ok(outcome.exit_code() as u8)
}
