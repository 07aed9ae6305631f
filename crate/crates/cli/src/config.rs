//! Run configuration: one TOML or JSON file per experiment run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use samlab_core::optimizers::OptimizerSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    CompareRhoGrid,
    BiasVerify,
    Switch,
    Interpolate,
    SharpnessGrid,
    ConvergenceCheck,
    ReluDemo,
    PotentialPlot,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::CompareRhoGrid => "compare_rho_grid",
            Experiment::BiasVerify => "bias_verify",
            Experiment::Switch => "switch",
            Experiment::Interpolate => "interpolate",
            Experiment::SharpnessGrid => "sharpness_grid",
            Experiment::ConvergenceCheck => "convergence_check",
            Experiment::ReluDemo => "relu_demo",
            Experiment::PotentialPlot => "potential_plot",
        }
    }
}

/// Sparse regression instance; each run seed generates its own dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub d: usize,
    pub n: usize,
    pub k: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { d: 30, n: 20, k: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub optimizer: OptimizerSpec,
    pub max_steps: u64,
    pub stop_loss: Option<f64>,
    pub snapshot_stride: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.05,
            optimizer: OptimizerSpec::one_sam_full(0.03, 0.05),
            max_steps: 1_000_000,
            stop_loss: Some(1e-10),
            snapshot_stride: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// GD, full-batch n-SAM and full-batch 1-SAM.
    FullBatch,
    /// SGD, fresh-batch n-SAM with a full-data ascent and 1-SAM, all at the
    /// configured batch size.
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMethod {
    Gd,
    NSam,
    OneSam,
}

impl GridMethod {
    pub fn label(self) -> &'static str {
        match self {
            GridMethod::Gd => "gd",
            GridMethod::NSam => "n_sam",
            GridMethod::OneSam => "one_sam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoGridSection {
    pub mode: GridMode,
    pub alpha: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub rho_grid: Vec<f64>,
    pub methods: Vec<GridMethod>,
    pub max_steps: u64,
    pub stop_loss: f64,
    /// Runs above this final train loss do not count as converged.
    pub converged_loss: f64,
}

impl Default for RhoGridSection {
    fn default() -> Self {
        RhoGridSection {
            mode: GridMode::FullBatch,
            alpha: 0.05,
            gamma: 0.5,
            batch_size: 1,
            rho_grid: vec![0.002, 0.005, 0.01, 0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2],
            methods: vec![GridMethod::Gd, GridMethod::NSam, GridMethod::OneSam],
            max_steps: 200_000,
            stop_loss: 1e-10,
            converged_loss: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasVerifySection {
    pub alpha: f64,
    pub rho: f64,
    pub methods: Vec<GridMethod>,
    /// Step size as a fraction of 1/β̂.
    pub gamma_fraction: f64,
    pub max_steps: u64,
    pub stop_loss: f64,
    /// Allowed relative ℓ∞ error between endpoint and potential minimizer.
    pub tolerance: f64,
}

impl Default for BiasVerifySection {
    fn default() -> Self {
        BiasVerifySection {
            alpha: 0.05,
            rho: 0.05,
            methods: vec![GridMethod::Gd, GridMethod::NSam, GridMethod::OneSam],
            gamma_fraction: 0.1,
            max_steps: 2_000_000,
            stop_loss: 1e-14,
            tolerance: 1e-2,
        }
    }
}

/// Two consecutive phases; `second_steps = 0` runs the first method only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchLeg {
    pub first: OptimizerSpec,
    pub first_steps: u64,
    pub second: OptimizerSpec,
    pub second_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchSection {
    pub alpha: f64,
    /// Typically GD → 1-SAM.
    pub forward: SwitchLeg,
    /// Typically 1-SAM → GD.
    pub reverse: Option<SwitchLeg>,
    pub interpolation_points: usize,
    pub extended_range: bool,
}

impl Default for SwitchSection {
    fn default() -> Self {
        let d = DatasetSpec::default().d as f64;
        SwitchSection {
            alpha: 0.05,
            forward: SwitchLeg {
                first: OptimizerSpec::gd(1.0 / d),
                first_steps: 10_000,
                second: OptimizerSpec::one_sam_full(0.003, 10.0),
                second_steps: 40_000,
            },
            reverse: Some(SwitchLeg {
                first: OptimizerSpec::one_sam_full(1.0 / d, 0.175),
                first_steps: 600_000,
                second: OptimizerSpec::gd(1.0 / d),
                second_steps: 40_000,
            }),
            interpolation_points: 41,
            extended_range: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateSection {
    pub alpha: f64,
    /// JSON arrays of flat diagonal-network parameters. Relative paths are
    /// resolved against the config file.
    pub endpoint_a: PathBuf,
    pub endpoint_b: PathBuf,
    pub num_points: usize,
    pub extended_range: bool,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        InterpolateSection {
            alpha: 0.05,
            endpoint_a: PathBuf::from("endpoint_a.json"),
            endpoint_b: PathBuf::from("endpoint_b.json"),
            num_points: 41,
            extended_range: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpnessModel {
    LinearLogistic,
    DiagNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharpnessGridSection {
    pub model: SharpnessModel,
    /// Features and examples of the classification data (linear model).
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    /// GD steps before measuring.
    pub train_gamma: f64,
    pub train_steps: u64,
    pub rho_grid: Vec<f64>,
    pub m_values: Vec<usize>,
    pub ascent_iters: usize,
    pub suboptimality: bool,
}

impl Default for SharpnessGridSection {
    fn default() -> Self {
        SharpnessGridSection {
            model: SharpnessModel::LinearLogistic,
            d: 10,
            n: 64,
            alpha: 0.05,
            train_gamma: 0.5,
            train_steps: 2_000,
            rho_grid: vec![0.05, 0.1, 0.2, 0.4],
            m_values: vec![1, 4, 16, 64],
            ascent_iters: 20,
            suboptimality: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSection {
    pub instances: usize,
    pub dim: usize,
    pub num_examples: usize,
    pub smoothness: f64,
    pub min_eigenvalue: f64,
    pub noise: f64,
    pub probes: usize,
    pub stochastic_points: usize,
    pub draws: usize,
    pub lemma_batch_size: usize,
    pub horizon: u64,
    pub batch_size: usize,
    pub rate_seeds: u64,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            instances: 10,
            dim: 10,
            num_examples: 32,
            smoothness: 2.0,
            min_eigenvalue: 0.1,
            noise: 1.0,
            probes: 1000,
            stochastic_points: 5,
            draws: 1000,
            lemma_batch_size: 2,
            horizon: 10_000,
            batch_size: 4,
            rate_seeds: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReluSection {
    pub width: usize,
    pub gamma: f64,
    pub rho: f64,
    pub max_steps: u64,
    /// Train MSE below which a run counts as interpolating.
    pub target_mse: f64,
    pub grid_points: usize,
}

impl Default for ReluSection {
    fn default() -> Self {
        ReluSection {
            width: 100,
            gamma: 0.05,
            rho: 0.05,
            max_steps: 400_000,
            target_mse: 1e-4,
            grid_points: 201,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialSection {
    pub alpha_scales: Vec<f64>,
    /// The grid covers [−extent, extent]².
    pub extent: f64,
    pub grid_points: usize,
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection {
            alpha_scales: vec![0.01, 0.1, 1.0, 10.0],
            extent: 1.0,
            grid_points: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// When present, must match the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_log_stride")]
    pub log_stride: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub compare_rho_grid: RhoGridSection,
    #[serde(default)]
    pub bias_verify: BiasVerifySection,
    #[serde(default)]
    pub switch: SwitchSection,
    #[serde(default)]
    pub interpolate: InterpolateSection,
    #[serde(default)]
    pub sharpness_grid: SharpnessGridSection,
    #[serde(default)]
    pub convergence_check: ConvergenceSection,
    #[serde(default)]
    pub relu_demo: ReluSection,
    #[serde(default)]
    pub potential_plot: PotentialSection,
}

fn default_log_stride() -> u64 {
    1000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            experiment: None,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
            log_stride: default_log_stride(),
            dataset: DatasetSpec::default(),
            train: TrainSection::default(),
            compare_rho_grid: RhoGridSection::default(),
            bias_verify: BiasVerifySection::default(),
            switch: SwitchSection::default(),
            interpolate: InterpolateSection::default(),
            sharpness_grid: SharpnessGridSection::default(),
            convergence_check: ConvergenceSection::default(),
            relu_demo: ReluSection::default(),
            potential_plot: PotentialSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> anyhow::Result<Format> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Ok(Format::Toml),
            Some("json") => Ok(Format::Json),
            _ => bail!("config {} must end in .toml or .json", path.display()),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, format: Format) -> anyhow::Result<Self> {
        let cfg: RunConfig = match format {
            Format::Toml => toml::from_str(text).context("invalid TOML config")?,
            Format::Json => serde_json::from_str(text).context("invalid JSON config")?,
        };
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text, Format::from_path(path)?)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.interpolate.endpoint_a, &mut cfg.interpolate.endpoint_b] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        Ok(match format {
            Format::Toml => toml::to_string(self)?,
            Format::Json => serde_json::to_string_pretty(self)?,
        })
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s += offset;
        }
        self
    }
}

/// Output directory precedence: command line, then `SAMLAB_OUTPUT`, then the
/// config, then `./samlab-out`.
pub fn resolve_output_dir(cli: Option<&Path>, env: Option<&str>, cfg: &RunConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("samlab-out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_both_formats() {
        let cfg = RunConfig::default();
        for f in [Format::Toml, Format::Json] {
            let text = cfg.render(f).unwrap();
            assert_eq!(RunConfig::parse(&text, f).unwrap(), cfg, "{f:?}");
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("schema_version = 1\nseeds = [3]\n", Format::Toml).unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.dataset, DatasetSpec::default());
    }

    #[test]
    fn rejects_other_schema_versions_and_unknown_keys() {
        assert!(RunConfig::parse("schema_version = 2", Format::Toml).is_err());
        assert!(RunConfig::parse("schema_version = 1\nbogus = 3", Format::Toml).is_err());
        assert!(Format::from_path(Path::new("c.yaml")).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed_offset(1).hash());
    }

    #[test]
    fn output_precedence() {
        let cfg = RunConfig {
            output_dir: Some("from-config".into()),
            ..RunConfig::default()
        };
        assert_eq!(
            resolve_output_dir(Some(Path::new("cli")), Some("env"), &cfg),
            PathBuf::from("cli")
        );
        assert_eq!(resolve_output_dir(None, Some("env"), &cfg), PathBuf::from("env"));
        assert_eq!(resolve_output_dir(None, None, &cfg), PathBuf::from("from-config"));
    }
}
