//! On-disk run configuration (TOML).
//!
//! A run directory gets a copy of the effective configuration next to its
//! history and checkpoints, so every result is reproducible from the
//! directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::distill::DistillConfig;
use crate::models::ArchSpec;

use super::{OptimConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Architecture family name, e.g. `res16unet34c`.
    pub arch: String,
    /// Width divisor: 1 is the full network, 2/4/8 the slimmed students.
    pub divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "Res16UNet34C".into(),
            divisor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Edge length of one voxel, in the point cloud's units.
    pub voxel_size: f64,
    pub augment: AugmentConfig,
    /// Mix pairs of augmented training scenes by voxel union.
    pub mix3d: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            voxel_size: 0.05,
            augment: AugmentConfig::default(),
            mix3d: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (0 = only the final one).
    pub save_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            seed: 0,
            save_every: 0,
        }
    }
}

/// Everything a `train-teacher` or `distill` invocation needs, as one
/// TOML document. Missing keys take their defaults, so a minimal file can
/// be a single section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub optim: OptimConfig,
    pub distill: DistillConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            TrainError::BadRunConfig(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| TrainError::BadRunConfig(format!("unserializable config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.optim.validate()?;
        self.distill.validate()?;
        self.arch_spec(1)?; // resolves the architecture name and divisor
        if !(self.data.voxel_size > 0.0 && self.data.voxel_size.is_finite()) {
            return Err(TrainError::BadRunConfig(format!(
                "voxel_size must be positive, got {}",
                self.data.voxel_size
            )));
        }
        if self.train.epochs == 0 {
            return Err(TrainError::BadRunConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Resolves the `[model]` section into a concrete topology for a given
    /// class count. The family name combines with `divisor`; variant names
    /// like `Res16UNet34C_Half` carry their own width and must not be
    /// contradicted.
    pub fn arch_spec(&self, num_classes: usize) -> Result<ArchSpec, TrainError> {
        if self.model.arch.eq_ignore_ascii_case("res16unet34c") {
            return Ok(ArchSpec::res16unet34c(self.model.divisor, num_classes)?);
        }
        let spec = ArchSpec::from_name(&self.model.arch, num_classes)?;
        if self.model.divisor != 1 && spec.width_divisor != self.model.divisor {
            return Err(TrainError::BadRunConfig(format!(
                "arch {:?} fixes the width divisor to {}, which contradicts divisor = {}",
                self.model.arch, spec.width_divisor, self.model.divisor
            )));
        }
        Ok(spec)
    }
}
