//! The experiment configuration file (TOML). Every key is optional; missing
//! keys take the defaults below and unknown keys are rejected.

use std::path::{Path, PathBuf};

use petalnet::augment::AugmentConfig;
use petalnet::dataset::{SyntheticSpec, REFERENCE_SPLIT};
use petalnet::fusion::{ConcatSource, FusionStrategy};
use petalnet::netcore::NetworkConfig;
use petalnet::optim::LrSchedule;
use petalnet::trainer::{MetaConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root for all artifacts; relative paths resolve against the working
    /// directory.
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub train: TrainSection,
    pub schedule: LrSchedule,
    pub augment: AugmentConfig,
    pub fusion: FusionSection,
    pub meta: MetaSection,
    pub bases: Vec<BaseSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            train: TrainSection::default(),
            schedule: LrSchedule::default(),
            augment: AugmentConfig::default(),
            fusion: FusionSection::default(),
            meta: MetaSection::default(),
            bases: vec![
                BaseSection::new("base_a", &[12, 24], 48, 1),
                BaseSection::new("base_b", &[16, 32], 64, 2),
                BaseSection::new("base_c", &[24, 32], 64, 3),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub hue_jitter: f64,
    pub max_noise: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            seed: 7,
            num_classes: spec.num_classes,
            samples_per_class: spec.samples_per_class,
            image_side: spec.image_side,
            hue_jitter: spec.hue_jitter,
            max_noise: spec.max_noise,
            split: [REFERENCE_SPLIT.0, REFERENCE_SPLIT.1, REFERENCE_SPLIT.2],
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            image_side: self.image_side,
            hue_jitter: self.hue_jitter,
            max_noise: self.max_noise,
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub replicas: usize,
    pub gamma: f64,
    pub shuffle_seed: u64,
    pub augment_seed: u64,
    /// Apply the `[augment]` section to training batches.
    pub augment: bool,
    /// Constant learning rate replacing the schedule.
    pub fixed_lr: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            replicas: t.replicas,
            gamma: t.gamma,
            shuffle_seed: 10,
            augment_seed: 20,
            augment: true,
            fixed_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub strategy: FusionStrategy,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub seed: u64,
    pub concat_source: ConcatSource,
    pub average_init: bool,
    pub average_init_scale: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        Self {
            seed: 99,
            concat_source: m.concat_source,
            average_init: m.average_init,
            average_init_scale: m.average_init_scale,
        }
    }
}

impl MetaSection {
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            concat_source: self.concat_source,
            average_init: self.average_init,
            average_init_scale: self.average_init_scale,
        }
    }
}

/// One base classifier: conv widths, feature width and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub name: String,
    pub conv_filters: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl BaseSection {
    fn new(name: &str, conv_filters: &[usize], feature_dim: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            conv_filters: conv_filters.to_vec(),
            feature_dim,
            seed,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let config: Self = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::data(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: petalnet::Result<()>| r.map_err(|e| CliError::config(e.to_string()));
        check(self.data.spec().validate())?;
        check(self.train_config(0).validate())?;
        if self.bases.is_empty() {
            return Err(CliError::config("at least one [[bases]] entry is required"));
        }
        let mut names: Vec<&str> = self.bases.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::config("base names must be unique"));
        }
        for b in &self.bases {
            if b.name.is_empty() || !b.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CliError::config(format!("invalid base name {:?}", b.name)));
            }
            check(self.network_config(b).layer_shapes().map(|_| ()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn train_config(&self, init_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            replicas: self.train.replicas,
            gamma: self.train.gamma,
            schedule: self.schedule,
            init_seed,
            shuffle_seed: self.train.shuffle_seed.wrapping_add(init_seed),
            augment_seed: self.train.augment_seed.wrapping_add(init_seed),
            augment: self.train.augment.then_some(self.augment),
            fixed_lr: self.train.fixed_lr,
        }
    }

    pub fn network_config(&self, base: &BaseSection) -> NetworkConfig {
        let side = self.data.image_side;
        NetworkConfig::small_convnet((side, side, 3), &base.conv_filters, base.feature_dim, self.data.num_classes)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn bases_dir(&self) -> PathBuf {
        self.output_dir.join("bases")
    }

    pub fn meta_dir(&self) -> PathBuf {
        self.output_dir.join("meta")
    }
}
