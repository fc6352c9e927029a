//! Experiment configuration (TOML).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::{AdamConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::imaging::SimulationParams;

/// Environment variable that, when set, roots every relative output path.
pub const OUTPUT_ROOT_ENV: &str = "CHO_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LocationKnown,
    Sks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AeTask,
    AeTraditional,
    Pls,
    Lg,
    ConvLg,
    MatchedFilter,
    HoDirect,
    HoCmd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::AeTask,
        Method::AeTraditional,
        Method::Pls,
        Method::Lg,
        Method::ConvLg,
        Method::MatchedFilter,
        Method::HoDirect,
        Method::HoCmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::AeTask => "ae_task",
            Method::AeTraditional => "ae_traditional",
            Method::Pls => "pls",
            Method::Lg => "lg",
            Method::ConvLg => "conv_lg",
            Method::MatchedFilter => "matched_filter",
            Method::HoDirect => "ho_direct",
            Method::HoCmd => "ho_cmd",
        }
    }

    pub fn is_autoencoder(self) -> bool {
        matches!(self, Method::AeTask | Method::AeTraditional)
    }

    /// Methods that reduce the image to channels before the Hotelling solve.
    pub fn is_channelized(self) -> bool {
        !matches!(self, Method::HoDirect | Method::HoCmd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub test_pairs: usize,
    /// Noiseless backgrounds drawn for the HO-CMD covariance.
    #[serde(default = "default_backgrounds")]
    pub background_samples: usize,
    /// Existing dataset directory (with `manifest.txt`); generated under the
    /// output directory when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

fn default_backgrounds() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    #[serde(default = "default_channel_grid")]
    pub ae_channels: Vec<usize>,
    #[serde(default = "default_lr_grid")]
    pub ae_learning_rates: Vec<f64>,
    #[serde(default = "default_channel_grid")]
    pub pls_channels: Vec<usize>,
    #[serde(default = "default_channel_grid")]
    pub lg_channels: Vec<usize>,
    #[serde(default = "default_lg_widths")]
    pub lg_widths: Vec<f64>,
    #[serde(default = "default_channel_grid")]
    pub conv_lg_channels: Vec<usize>,
}

fn default_channel_grid() -> Vec<usize> {
    (1..=20).collect()
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3]
}

fn default_lg_widths() -> Vec<f64> {
    vec![10.0, 15.0, 20.0, 25.0, 30.0]
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            ae_channels: default_channel_grid(),
            ae_learning_rates: default_lr_grid(),
            pls_channels: default_channel_grid(),
            lg_channels: default_channel_grid(),
            lg_widths: default_lg_widths(),
            conv_lg_channels: default_channel_grid(),
        }
    }
}

/// Autoencoder settings shared by every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_epochs() -> usize {
    500
}

fn default_minibatch() -> usize {
    250
}

fn default_init_std() -> f64 {
    5e-6
}

impl Default for AeSettings {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            minibatch_size: default_minibatch(),
            init_std: default_init_std(),
            pretrain: PretrainConfig::default(),
            center: false,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: Task,
    pub seed: u64,
    pub side: usize,
    /// Overrides the standard lumpy/collimator/noise/signal parameters.
    #[serde(default)]
    pub simulation: Option<SimulationParams>,
    pub data: DataConfig,
    pub subsets: Vec<usize>,
    pub methods: Vec<Method>,
    /// Independent initializations per autoencoder cell.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub ae: AeSettings,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_resamples: usize,
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".to_string()
}

fn default_restarts() -> usize {
    5
}

fn default_bootstrap() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::persist::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format("config", "not valid UTF-8"))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded. `output_dir` is
    /// blanked first: where results go does not change them.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn simulation(&self) -> SimulationParams {
        self.simulation
            .clone()
            .unwrap_or_else(|| SimulationParams::standard(self.side, self.task == Task::Sks))
    }

    /// `output_dir`, rooted under `$CHO_OUTPUT_ROOT` when that is set and
    /// the path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("config lists no methods"));
        }
        if self.side == 0 {
            return Err(Error::invalid("side must be > 0"));
        }
        let sim = self.simulation();
        sim.validate()?;
        if sim.side() != self.side {
            return Err(Error::invalid("simulation.collimator.side differs from side"));
        }
        let d = &self.data;
        if d.train_pairs == 0 || d.validation_pairs < 2 || d.test_pairs < 2 {
            return Err(Error::invalid("need >= 1 training pair and >= 2 validation and test pairs"));
        }
        if self.subsets.is_empty() {
            return Err(Error::invalid("config lists no subset sizes"));
        }
        if let Some(&k) = self.subsets.iter().find(|&&k| k == 0 || k > d.train_pairs) {
            return Err(Error::invalid(format!(
                "subset size {k} outside 1..={} training pairs",
                d.train_pairs
            )));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be >= 1"));
        }
        if self.methods.contains(&Method::HoCmd) && d.background_samples < 2 {
            return Err(Error::invalid("HO-CMD needs at least two background samples"));
        }
        let g = &self.grids;
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::invalid(format!("grid {name} is empty")))
            } else {
                Ok(())
            }
        };
        for m in &self.methods {
            match m {
                Method::AeTask | Method::AeTraditional => {
                    empty("ae_channels", g.ae_channels.len())?;
                    empty("ae_learning_rates", g.ae_learning_rates.len())?;
                }
                Method::Pls => empty("pls_channels", g.pls_channels.len())?,
                Method::Lg => {
                    empty("lg_channels", g.lg_channels.len())?;
                    empty("lg_widths", g.lg_widths.len())?;
                }
                Method::ConvLg => {
                    empty("conv_lg_channels", g.conv_lg_channels.len())?;
                    empty("lg_widths", g.lg_widths.len())?;
                }
                _ => {}
            }
        }
        let all_channels = g
            .ae_channels
            .iter()
            .chain(&g.pls_channels)
            .chain(&g.lg_channels)
            .chain(&g.conv_lg_channels);
        if all_channels.clone().any(|&m| m == 0) {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if g.ae_learning_rates.iter().chain(&g.lg_widths).any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("learning rates and LG widths must be > 0"));
        }
        Ok(())
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "location_known"
seed = 3
side = 16
subsets = [10, 20]
methods = ["matched_filter", "pls"]
output_dir = "out"

[data]
train_pairs = 20
validation_pairs = 10
test_pairs = 10
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.restarts, 5);
        assert_eq!(cfg.grids.ae_channels, (1..=20).collect::<Vec<_>>());
        assert_eq!(cfg.ae.epochs, 500);
        assert_eq!(cfg.simulation().signal.center, [8.0, 8.0]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut moved = cfg.clone();
        moved.output_dir = PathBuf::from("elsewhere/run");
        assert_eq!(moved.hash(), cfg.hash());
        let mut reseeded = cfg.clone();
        reseeded.seed += 1;
        assert_ne!(reseeded.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_big = MINIMAL.replace("subsets = [10, 20]", "subsets = [10, 30]");
        assert!(ExperimentConfig::from_toml(&too_big).is_err());
        let no_methods = MINIMAL.replace(r#"methods = ["matched_filter", "pls"]"#, "methods = []");
        assert!(ExperimentConfig::from_toml(&no_methods).is_err());
        let unknown = MINIMAL.replace("seed = 3", "seed = 3\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Format { .. })));
        let bad_method = MINIMAL.replace("\"pls\"", "\"svd\"");
        assert!(ExperimentConfig::from_toml(&bad_method).is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
