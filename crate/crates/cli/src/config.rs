//! Declarative run configuration, read from TOML and then overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use pdadmm::dataset::{load_csv, load_idx, preprocess, Dataset};
use pdadmm::model::{HyperParams, NetworkSpec};
use pdadmm::trainer::{progressive_schedule, ExecMode, GrowthStep};
use pdadmm::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Serial,
    #[default]
    Parallel,
}

impl std::str::FromStr for ModeName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "serial" => Ok(ModeName::Serial),
            "parallel" => Ok(ModeName::Parallel),
            other => Err(format!("expected serial or parallel, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "yes")]
        downsample: bool,
        #[serde(default)]
        classes: Option<Vec<u8>>,
        #[serde(default)]
        samples: Option<usize>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        samples: Option<usize>,
    },
    Synthetic {
        features: usize,
        classes: usize,
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn yes() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Idx {
            images: PathBuf::from("data/mnist/images-idx3-ubyte.gz"),
            labels: PathBuf::from("data/mnist/labels-idx1-ubyte.gz"),
            downsample: true,
            classes: None,
            samples: None,
        }
    }
}

impl DataConfig {
    /// Loads the dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let data = match self {
            DataConfig::Idx {
                images,
                labels,
                downsample,
                classes,
                samples,
            } => {
                let raw = load_idx(base.join(images), base.join(labels))?;
                truncate(preprocess(&raw, *downsample, classes.as_deref())?, *samples)?
            }
            DataConfig::Csv {
                path,
                label_column,
                samples,
            } => truncate(load_csv(base.join(path), label_column)?, *samples)?,
            DataConfig::Synthetic {
                features,
                classes,
                samples,
                seed,
            } => {
                if *features == 0 || *classes < 2 || *samples == 0 {
                    return Err(Error::InvalidConfig(
                        "synthetic data needs features >= 1, classes >= 2, samples >= 1".into(),
                    ));
                }
                Dataset::synthetic_blobs(*features, *classes, *samples, *seed)
            }
        };
        Ok(data)
    }
}

fn truncate(data: Dataset, samples: Option<usize>) -> Result<Dataset> {
    match samples {
        None => Ok(data),
        Some(0) => Err(Error::InvalidConfig("samples must be at least 1".into())),
        Some(n) if n > data.num_samples() => Err(Error::InvalidConfig(format!(
            "requested {n} samples but the dataset has {}",
            data.num_samples()
        ))),
        Some(n) => Ok(data.take(n)),
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_layers: 5,
            width: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    pub start_hidden: usize,
    pub at_epoch: usize,
    /// Explicit schedule; replaces `start_hidden`/`at_epoch` when present.
    pub schedule: Option<Vec<GrowthStep>>,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            start_hidden: 5,
            at_epoch: 10,
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub workers: Vec<usize>,
    pub samples: usize,
    pub repetitions: usize,
    pub output: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            layers: vec![2, 4, 8],
            widths: vec![512],
            workers: vec![4],
            samples: 1000,
            repetitions: 3,
            output: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub mode: ModeName,
    pub workers: Option<usize>,
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub timing: bool,
    pub certify: bool,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub hyper: HyperParams,
    pub growth: GrowthConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 100,
            mode: ModeName::default(),
            workers: None,
            metrics: None,
            checkpoint: None,
            timing: true,
            certify: false,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            hyper: HyperParams::default(),
            growth: GrowthConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn exec_mode(&self) -> Result<ExecMode> {
        match self.mode {
            ModeName::Serial => Ok(ExecMode::Serial),
            ModeName::Parallel => {
                let workers = match self.workers {
                    Some(w) => w,
                    None => threads_from_env()?.unwrap_or_else(default_workers),
                };
                if workers == 0 {
                    return Err(Error::InvalidConfig("workers must be at least 1".into()));
                }
                Ok(ExecMode::Parallel { workers })
            }
        }
    }

    /// Network sized for the dataset, starting at the growth schedule's
    /// initial depth.
    pub fn initial_spec(&self, data: &Dataset) -> Result<NetworkSpec> {
        let hidden = match &self.growth.schedule {
            Some(steps) => {
                let added: usize = steps.iter().map(|s| s.layers).sum();
                self.network.hidden_layers.checked_sub(added).filter(|&h| h >= 1).ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "growth schedule adds {added} layers but the network has only {} hidden layers",
                        self.network.hidden_layers
                    ))
                })?
            }
            None => self.network.hidden_layers.min(self.growth.start_hidden.max(1)),
        };
        NetworkSpec::uniform(data.num_features(), hidden, self.network.width, data.num_classes())
    }

    pub fn growth_schedule(&self) -> Vec<GrowthStep> {
        match &self.growth.schedule {
            Some(steps) => steps.clone(),
            None => progressive_schedule(self.network.hidden_layers, self.growth.start_hidden.max(1), self.growth.at_epoch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.hidden_layers == 0 || self.network.width == 0 {
            return Err(Error::InvalidConfig("network needs at least one hidden layer of positive width".into()));
        }
        self.hyper.validate(pdadmm::model::Activation::Relu)?;
        self.exec_mode()?;
        if self.benchmark.repetitions < 3 {
            return Err(Error::InvalidConfig(format!(
                "benchmark repetitions must be at least 3, got {}",
                self.benchmark.repetitions
            )));
        }
        Ok(())
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("PDADMM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("PDADMM_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("epochs = 3\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[hyper]\nrho = 1.0\nsigma = 2.0").is_err());
        assert!(RunConfig::from_toml("[network]\nhidden_layers = 2\nwidth = 3\ndepth = 4").is_err());
    }

    #[test]
    fn full_config_parses() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 7
            epochs = 12
            mode = "serial"
            timing = false
            [data]
            format = "synthetic"
            features = 4
            classes = 3
            samples = 30
            [network]
            hidden_layers = 3
            width = 16
            [hyper]
            rho = 1.0
            nu = 0.1
            [growth]
            schedule = [{ epoch = 4, layers = 1 }]
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.exec_mode().unwrap(), ExecMode::Serial);
        let data = cfg.data.load(Path::new(".")).unwrap();
        let spec = cfg.initial_spec(&data).unwrap();
        assert_eq!(spec.layer_widths, vec![4, 16, 16, 3]);
        assert_eq!(cfg.growth_schedule(), vec![GrowthStep { epoch: 4, layers: 1 }]);
    }

    #[test]
    fn progressive_default_starts_at_five_hidden_layers() {
        let cfg = RunConfig::from_toml("[network]\nhidden_layers = 9\nwidth = 8").unwrap();
        let data = Dataset::synthetic_blobs(4, 2, 6, 0);
        assert_eq!(cfg.initial_spec(&data).unwrap().num_layers(), 6);
        assert_eq!(cfg.growth_schedule(), vec![GrowthStep { epoch: 10, layers: 4 }]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = RunConfig::from_toml("[hyper]\nrho = -1.0").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_toml("mode = \"parallel\"\nworkers = 0").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::from_toml("mode = \"threads\"").is_err());
    }
}
