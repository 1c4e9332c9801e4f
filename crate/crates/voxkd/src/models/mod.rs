//! The Res16UNet34C family: a sparse residual U-Net with four encoder and
//! four decoder levels, scaled to student sizes by dividing every channel
//! width by a common divisor.

mod gradcheck;
mod plan;
mod res16unet;

pub use gradcheck::{gradcheck, GradcheckReport, TensorCheck};
pub use plan::{CoordinatePlan, LEVELS};
pub use res16unet::{Res16UNet, TapGrads, TappedOutput};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;
use crate::sparse::SparseError;

/// Channel widths of the full-size network, encoder levels then decoder
/// levels.
pub const BASE_PLANES: [usize; 8] = [32, 64, 128, 256, 256, 128, 96, 96];

/// Residual-block repeats per level, the ResNet34-style schedule the "34" in
/// the architecture name refers to.
pub const BASE_BLOCKS: [usize; 8] = [2, 3, 4, 6, 2, 2, 2, 2];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("width divisor {divisor} does not divide base width {plane}")]
    IndivisibleWidth { divisor: usize, plane: usize },
    #[error("width divisor must be >= 1")]
    ZeroDivisor,
    #[error("unknown architecture name: {0:?}")]
    UnknownArch(String),
    #[error("this build supports 3 spatial dimensions, got {0}")]
    UnsupportedDims(usize),
    #[error("input feature width {got} does not match network input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("input tensor does not live on the plan's stride-1 coordinate map")]
    PlanMismatch,
    #[error("checkpoint is missing tensor {0:?}")]
    TensorMissing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Topology of one network: widths, block repeats, and I/O dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub planes: [usize; 8],
    pub block_counts: [usize; 8],
    /// Stem output width; equals `planes[0]` in this family.
    pub init_dim: usize,
    /// Input feature width (3 for RGB).
    pub in_channels: usize,
    pub num_classes: usize,
    /// Spatial dimensionality; this build fixes it to 3.
    pub dims: usize,
    pub width_divisor: usize,
}

impl ArchSpec {
    /// The Res16UNet34C topology with every width divided by `divisor`.
    pub fn res16unet34c(divisor: usize, num_classes: usize) -> Result<Self, ModelError> {
        if divisor == 0 {
            return Err(ModelError::ZeroDivisor);
        }
        let mut planes = [0usize; 8];
        for (slot, &base) in planes.iter_mut().zip(BASE_PLANES.iter()) {
            if base % divisor != 0 || base / divisor == 0 {
                return Err(ModelError::IndivisibleWidth {
                    divisor,
                    plane: base,
                });
            }
            *slot = base / divisor;
        }
        Ok(ArchSpec {
            planes,
            block_counts: BASE_BLOCKS,
            init_dim: planes[0],
            in_channels: 3,
            num_classes,
            dims: 3,
            width_divisor: divisor,
        })
    }

    /// Parses an architecture name: `Res16UNet34C`, `Res16UNet34C_Half`,
    /// `Res16UNet34C_Quarter`, or `Res16UNet34C@divisor=N`.
    pub fn from_name(name: &str, num_classes: usize) -> Result<Self, ModelError> {
        let divisor = match name {
            "Res16UNet34C" => 1,
            "Res16UNet34C_Half" => 2,
            "Res16UNet34C_Quarter" => 4,
            _ => match name.strip_prefix("Res16UNet34C@divisor=") {
                Some(rest) => rest
                    .parse::<usize>()
                    .map_err(|_| ModelError::UnknownArch(name.to_string()))?,
                None => return Err(ModelError::UnknownArch(name.to_string())),
            },
        };
        Self::res16unet34c(divisor, num_classes)
    }

    /// Canonical name for this spec.
    pub fn name(&self) -> String {
        match self.width_divisor {
            1 => "Res16UNet34C".to_string(),
            2 => "Res16UNet34C_Half".to_string(),
            4 => "Res16UNet34C_Quarter".to_string(),
            d => format!("Res16UNet34C@divisor={d}"),
        }
    }
}

/// Scalar parameter counts, split by whether the optimizer updates them.
/// `total` additionally counts batch-norm running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisor_scales_every_plane() {
        let half = ArchSpec::res16unet34c(2, 20).unwrap();
        assert_eq!(half.planes, [16, 32, 64, 128, 128, 64, 48, 48]);
        assert_eq!(half.init_dim, 16);
        let quarter = ArchSpec::res16unet34c(4, 20).unwrap();
        assert_eq!(quarter.planes, [8, 16, 32, 64, 64, 32, 24, 24]);
        assert_eq!(quarter.block_counts, [2, 3, 4, 6, 2, 2, 2, 2]);
    }

    #[test]
    fn indivisible_divisor_rejected() {
        let err = ArchSpec::res16unet34c(7, 20).unwrap_err();
        assert!(err.to_string().contains("does not divide"));
        assert!(ArchSpec::res16unet34c(0, 20).is_err());
        // 64 would divide, but 32/64 == 0.
        assert!(ArchSpec::res16unet34c(64, 20).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "Res16UNet34C",
            "Res16UNet34C_Half",
            "Res16UNet34C_Quarter",
            "Res16UNet34C@divisor=8",
        ] {
            let spec = ArchSpec::from_name(name, 6).unwrap();
            assert_eq!(spec.name(), name);
        }
        assert_eq!(ArchSpec::from_name("Res16UNet34C_Half", 6).unwrap().width_divisor, 2);
        assert!(ArchSpec::from_name("VGG16", 6).is_err());
        assert!(ArchSpec::from_name("Res16UNet34C@divisor=x", 6).is_err());
    }
}
