//! Experiment runner behind the `samlab` binary.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use samlab_core::exec::Execution;

use config::{Experiment, Format, RunConfig};
use experiments::{Ctx, Outcome};
use output::OutputDir;

#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub output: Option<PathBuf>,
    pub seed_offset: u64,
    pub sequential: bool,
}

/// Loads a config, runs one subcommand and returns its outcome together with
/// the output directory it wrote into.
pub fn run_from_path(
    experiment: Experiment,
    config_path: &Path,
    inv: &Invocation,
    env_output: Option<&str>,
) -> anyhow::Result<(Outcome, PathBuf)> {
    let cfg = RunConfig::load(config_path)?.with_seed_offset(inv.seed_offset);
    run_config(experiment, &cfg, inv, env_output)
}

pub fn run_config(
    experiment: Experiment,
    cfg: &RunConfig,
    inv: &Invocation,
    env_output: Option<&str>,
) -> anyhow::Result<(Outcome, PathBuf)> {
    anyhow::ensure!(!cfg.seeds.is_empty(), "config lists no seeds");
    let root = config::resolve_output_dir(inv.output.as_deref(), env_output, cfg);
    let mut out = OutputDir::new(&root, cfg.hash());
    out.text("config.toml", &cfg.render(Format::Toml)?)?;
    let exec = if inv.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let mut ctx = Ctx {
        cfg,
        out: &mut out,
        exec,
    };
    let outcome = experiments::run(experiment, &mut ctx)?;
    Ok((outcome, root))
}
