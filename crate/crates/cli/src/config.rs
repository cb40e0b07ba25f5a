//! Layered configuration: command-line flags override the TOML config file,
//! which overrides built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pmrn::data::DegradationKind;
use pmrn::trainer::TrainConfig;
use pmrn::{Attention, MultiScale, PmrnConfig};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionArg {
    Cpa,
    None,
}

impl From<AttentionArg> for Attention {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Cpa => Attention::Cpa,
            AttentionArg::None => Attention::None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Combinations,
    LargeKernels,
}

impl From<VariantArg> for MultiScale {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Combinations => MultiScale::Combinations,
            VariantArg::LargeKernels => MultiScale::LargeKernels,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationArg {
    Bi,
    Bd,
}

impl From<DegradationArg> for DegradationKind {
    fn from(d: DegradationArg) -> Self {
        match d {
            DegradationArg::Bi => DegradationKind::Bi,
            DegradationArg::Bd => DegradationKind::Bd,
        }
    }
}

/// Architecture overrides shared by every subcommand.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// Upscale factor r
    #[arg(long = "scale", short = 'r')]
    #[serde(rename = "upscale")]
    pub upscale: Option<usize>,
    /// Largest multi-scale kernel S (odd, >= 3)
    #[arg(long)]
    pub max_scale: Option<usize>,
    /// Number of residual blocks K
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Feature channels c
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    /// Multi-scale implementation
    #[arg(long, value_enum)]
    #[serde(rename = "multiscale")]
    pub variant: Option<VariantArg>,
}

impl ModelArgs {
    pub fn apply(&self, mut cfg: PmrnConfig) -> PmrnConfig {
        if let Some(v) = self.upscale {
            cfg.upscale = v;
        }
        if let Some(v) = self.max_scale {
            cfg.max_scale = v;
        }
        if let Some(v) = self.blocks {
            cfg.blocks = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.attention {
            cfg.attention = v.into();
        }
        if let Some(v) = self.variant {
            cfg.multiscale = v.into();
        }
        cfg
    }

    pub fn is_empty(&self) -> bool {
        self.upscale.is_none()
            && self.max_scale.is_none()
            && self.blocks.is_none()
            && self.channels.is_none()
            && self.attention.is_none()
            && self.variant.is_none()
    }
}

/// Training overrides.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Initial learning rate
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Halve the learning rate every N units
    #[arg(long)]
    pub halve_every: Option<u64>,
    /// Length of the run in schedule units
    #[arg(long)]
    pub total_units: Option<u64>,
    /// Adam steps per schedule unit
    #[arg(long)]
    pub steps_per_unit: Option<u64>,
    /// Patches per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// LR patch side length
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Disable flip/rotation augmentation
    #[arg(long)]
    #[serde(skip)]
    pub no_augment: bool,
    #[arg(skip)]
    pub augment: Option<bool>,
    /// Save a checkpoint every N units (0 = only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.halve_every {
            cfg.halve_every = v;
        }
        if let Some(v) = self.total_units {
            cfg.total_units = v;
        }
        if let Some(v) = self.steps_per_unit {
            cfg.steps_per_unit = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.augment {
            cfg.augment = v;
        }
        if self.no_augment {
            cfg.augment = false;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFile {
    pub resolution: Option<String>,
    pub include_elementwise: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub degradation: Option<DegradationArg>,
    pub ensemble: Option<bool>,
}

/// Contents of a `--config` TOML file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelArgs,
    #[serde(default)]
    pub train: TrainArgs,
    #[serde(default)]
    pub analysis: AnalysisFile,
    #[serde(default)]
    pub metrics: MetricsFile,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| crate::Failure::Usage(format!("{}: {e}", path.display())).into())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisOptions {
    pub resolution: String,
    pub include_elementwise: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricOptions {
    pub degradation: DegradationArg,
    pub shave: usize,
    pub ensemble: bool,
}

/// The fully resolved configuration of one invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub model: PmrnConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricOptions>,
    pub paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, model: PmrnConfig) -> Self {
        RunConfig {
            command: command.to_owned(),
            seed,
            model,
            train: None,
            analysis: None,
            metrics: None,
            paths: BTreeMap::new(),
        }
    }

    pub fn path(&mut self, key: &str, p: &Path) -> &mut Self {
        self.paths.insert(key.to_owned(), p.to_owned());
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Logs the resolved config and, when `sidecar` is given, writes it there.
    pub fn record(&self, sidecar: Option<&Path>) -> anyhow::Result<()> {
        let text = self.to_toml();
        log::info!("resolved configuration:\n{text}");
        if let Some(path) = sidecar {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// Sidecar path for a single output file: `out.csv` → `out.csv.run.toml`.
pub fn sidecar_for_file(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_owned();
    name.push(".run.toml");
    path.with_file_name(name)
}

pub const SIDECAR_NAME: &str = "pmrn-run.toml";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let file: ConfigFile = toml::from_str(
            "seed = 3\n[model]\nblocks = 4\nchannels = 32\nmultiscale = \"large-kernels\"\n",
        )
        .unwrap();
        let flags = ModelArgs {
            channels: Some(16),
            ..Default::default()
        };
        let cfg = flags.apply(file.model.apply(PmrnConfig::default()));
        assert_eq!(cfg.blocks, 4);
        assert_eq!(cfg.channels, 16);
        assert_eq!(cfg.max_scale, 9);
        assert_eq!(cfg.multiscale, MultiScale::LargeKernels);
        assert_eq!(file.seed, Some(3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ConfigFile>("[model]\nblokcs = 4\n").is_err());
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let mut rc = RunConfig::new("train", 1, PmrnConfig::desk());
        rc.train = Some(TrainConfig::desk());
        rc.path("out_dir", Path::new("/tmp/x"));
        let text = rc.to_toml();
        let v: toml::Value = toml::from_str(&text).unwrap();
        assert_eq!(v["model"]["channels"].as_integer(), Some(16));
        assert_eq!(v["train"]["steps_per_unit"].as_integer(), Some(20));
        assert_eq!(v["paths"]["out_dir"].as_str(), Some("/tmp/x"));
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_for_file(Path::new("/a/b.csv")), Path::new("/a/b.csv.run.toml"));
    }
}
