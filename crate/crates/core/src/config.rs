//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [scenario]
//! source = "blobs"            # or "idx"
//!
//! [scenario.blobs]
//! classes = 12
//! input_dim = 8
//! spread = 3.0
//! cov_scale = 1.0
//! train_per_class = 120
//! test_per_class = 60
//!
//! [scenario.split]
//! kind = "equal"              # or "large-first" with first_fraction
//! tasks = 6
//!
//! [model]
//! input_dim = 8
//! trunk_layers = [32]
//! head_layers = [32]
//! embed_dim = 4
//!
//! [training]
//! experts = 3
//! epochs = 20
//!
//! [output]
//! out_dir = "out"
//! ```
//!
//! Unknown keys are rejected. Relative IDX paths resolve against the
//! directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::RepresentationMode;
use crate::net::{Activation, NetConfig};
use crate::rng::{derive_seed, Stream};
use crate::scenarios::{
    cap_per_class, load_idx, make_split, synth_blobs, BlobSpec, SplitDataset, SplitKind, TaskData,
    TaskSplitSpec,
};
use crate::trainer::{Seeds, SelectionStrategy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub source: DataSource,
    /// Pins the synthetic data independently of the global seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub blobs: Option<BlobSpec>,
    #[serde(default)]
    pub idx: Option<IdxConfig>,
    pub split: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKindName {
    Equal,
    LargeFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub kind: SplitKindName,
    pub tasks: usize,
    #[serde(default)]
    pub first_fraction: Option<f64>,
    #[serde(default)]
    pub class_order_seed: Option<u64>,
}

impl SplitConfig {
    pub fn to_spec(&self) -> Result<TaskSplitSpec> {
        let kind = match (self.kind, self.first_fraction) {
            (SplitKindName::Equal, None) => SplitKind::Equal { tasks: self.tasks },
            (SplitKindName::Equal, Some(_)) => {
                return Err(Error::Config("first_fraction only applies to large-first splits".into()))
            }
            (SplitKindName::LargeFirst, Some(f)) => SplitKind::LargeFirst {
                tasks: self.tasks,
                first_fraction: f,
            },
            (SplitKindName::LargeFirst, None) => {
                return Err(Error::Config("large-first split needs first_fraction".into()))
            }
        };
        Ok(TaskSplitSpec {
            kind,
            class_order_seed: self.class_order_seed,
        })
    }
}

/// Network shape; initialization seeds come from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub trunk_layers: Vec<usize>,
    #[serde(default)]
    pub head_layers: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub trace: bool,
    #[serde(default)]
    pub joint_reference: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("seed-cl-out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            trace: false,
            joint_reference: false,
        }
    }
}

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<SelectionStrategy>,
    pub experts: Option<usize>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub representation: Option<RepresentationMode>,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative IDX paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(idx), Some(dir)) = (cfg.scenario.idx.as_mut(), path.parent()) {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.strategy {
            self.training.strategy = v;
        }
        if let Some(v) = o.experts {
            self.training.experts = v;
        }
        if let Some(v) = o.tau {
            self.training.tau = v;
        }
        if let Some(v) = o.alpha {
            self.training.alpha = v;
        }
        if let Some(v) = o.representation {
            self.training.representation = v;
        }
        if let Some(v) = &o.out_dir {
            self.output.out_dir = v.clone();
        }
        if o.trace {
            self.output.trace = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.net().validate()?;
        let sc = &self.scenario;
        match sc.source {
            DataSource::Blobs => {
                let b = sc
                    .blobs
                    .as_ref()
                    .ok_or_else(|| Error::Config("source = \"blobs\" needs a [scenario.blobs] table".into()))?;
                b.validate()?;
                if b.input_dim != self.model.input_dim {
                    return Err(Error::Config(format!(
                        "model.input_dim {} differs from blobs.input_dim {}",
                        self.model.input_dim, b.input_dim
                    )));
                }
                if sc.idx.is_some() {
                    return Err(Error::Config("[scenario.idx] given with source = \"blobs\"".into()));
                }
            }
            DataSource::Idx => {
                if sc.idx.is_none() {
                    return Err(Error::Config("source = \"idx\" needs a [scenario.idx] table".into()));
                }
                if sc.blobs.is_some() {
                    return Err(Error::Config("[scenario.blobs] given with source = \"idx\"".into()));
                }
            }
        }
        let spec = sc.split.to_spec()?;
        if let DataSource::Blobs = sc.source {
            let classes = sc.blobs.as_ref().map_or(0, |b| b.classes);
            crate::scenarios::task_sizes(&spec.kind, classes)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.seed)
    }

    /// Network configuration with the initialization seed filled in.
    pub fn net(&self) -> NetConfig {
        NetConfig {
            input_dim: self.model.input_dim,
            trunk_layers: self.model.trunk_layers.clone(),
            head_layers: self.model.head_layers.clone(),
            embed_dim: self.model.embed_dim,
            activation: self.model.activation,
            rng_seed: self.seeds().init,
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.scenario
            .data_seed
            .unwrap_or_else(|| derive_seed(self.seed, Stream::Data))
    }

    /// Loads or synthesizes the dataset.
    pub fn dataset(&self) -> Result<SplitDataset> {
        match self.scenario.source {
            DataSource::Blobs => {
                let mut spec = self.scenario.blobs.clone().ok_or(Error::Config("missing blobs".into()))?;
                spec.seed = self.data_seed();
                synth_blobs(&spec)
            }
            DataSource::Idx => {
                let idx = self.scenario.idx.as_ref().ok_or(Error::Config("missing idx".into()))?;
                let mut train = load_idx(&idx.train_images, &idx.train_labels)?;
                let mut test = load_idx(&idx.test_images, &idx.test_labels)?;
                if train.input_dim != self.model.input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.model.input_dim,
                        got: train.input_dim,
                    });
                }
                if let Some(n) = idx.train_per_class {
                    cap_per_class(&mut train, n);
                }
                if let Some(n) = idx.test_per_class {
                    cap_per_class(&mut test, n);
                }
                Ok(SplitDataset { train, test })
            }
        }
    }

    pub fn tasks(&self) -> Result<Vec<TaskData>> {
        make_split(&self.dataset()?, &self.scenario.split.to_spec()?)
    }
}
