//! The coordinate plan: every coordinate map and kernel map one U-Net pass
//! needs, built once per batch and shared.
//!
//! Teacher and student follow the same stride schedule, so a single plan
//! serves both networks — width never enters coordinate bookkeeping. Building
//! kernel maps dominates sparse-convolution setup cost; caching them here
//! means each residual block, and each network sharing the plan, reuses the
//! same gather/scatter lists.

use std::sync::Arc;

use crate::sparse::{
    build_kernel_map, stride_coordinates, ConvGeometry, CoordinateMap, KernelMap, SparseError,
};

/// Number of stride levels: 1, 2, 4, 8, 16.
pub const LEVELS: usize = 5;

#[derive(Debug, Clone)]
pub struct CoordinatePlan {
    maps: Vec<Arc<CoordinateMap>>,
    km3: Vec<KernelMap>,
    km1: Vec<KernelMap>,
    down: Vec<KernelMap>,
    up: Vec<KernelMap>,
}

impl CoordinatePlan {
    /// Builds the stride pyramid and all kernel maps for an input living on
    /// `input` at tensor stride 1.
    pub fn build(input: Arc<CoordinateMap>) -> Result<Self, SparseError> {
        let mut maps = vec![input];
        for level in 1..LEVELS {
            let prev_stride = 1 << (level - 1);
            let next = stride_coordinates(&maps[level - 1], prev_stride, 2)?;
            maps.push(Arc::new(next));
        }

        let mut km3 = Vec::with_capacity(LEVELS);
        let mut km1 = Vec::with_capacity(LEVELS);
        for (level, map) in maps.iter().enumerate() {
            let stride = 1 << level;
            km3.push(build_kernel_map(
                map,
                map,
                ConvGeometry {
                    kernel_size: 3,
                    conv_stride: 1,
                    transposed: false,
                    in_tensor_stride: stride,
                },
            )?);
            km1.push(build_kernel_map(
                map,
                map,
                ConvGeometry {
                    kernel_size: 1,
                    conv_stride: 1,
                    transposed: false,
                    in_tensor_stride: stride,
                },
            )?);
        }

        let mut down = Vec::with_capacity(LEVELS - 1);
        let mut up = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS - 1 {
            let stride = 1 << level;
            down.push(build_kernel_map(
                &maps[level],
                &maps[level + 1],
                ConvGeometry {
                    kernel_size: 2,
                    conv_stride: 2,
                    transposed: false,
                    in_tensor_stride: stride,
                },
            )?);
            up.push(build_kernel_map(
                &maps[level + 1],
                &maps[level],
                ConvGeometry {
                    kernel_size: 2,
                    conv_stride: 2,
                    transposed: true,
                    in_tensor_stride: stride * 2,
                },
            )?);
        }

        Ok(CoordinatePlan {
            maps,
            km3,
            km1,
            down,
            up,
        })
    }

    /// Coordinate map at stride `1 << level`.
    pub fn map(&self, level: usize) -> &Arc<CoordinateMap> {
        &self.maps[level]
    }

    /// 3x3x3 stride-1 kernel map at `level`.
    pub fn km3(&self, level: usize) -> &KernelMap {
        &self.km3[level]
    }

    /// 1x1x1 identity kernel map at `level`.
    pub fn km1(&self, level: usize) -> &KernelMap {
        &self.km1[level]
    }

    /// Downsampling map from `level` to `level + 1`.
    pub fn down(&self, level: usize) -> &KernelMap {
        &self.down[level]
    }

    /// Upsampling (transposed) map from `level + 1` to `level`.
    pub fn up(&self, level: usize) -> &KernelMap {
        &self.up[level]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coordinate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_map(n: usize, seed: u64) -> Arc<CoordinateMap> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let coords: Vec<Coordinate> = (0..n)
            .map(|_| {
                Coordinate::new(
                    rng.gen_range(0..2),
                    [
                        rng.gen_range(0..32),
                        rng.gen_range(0..32),
                        rng.gen_range(0..32),
                    ],
                )
            })
            .collect();
        Arc::new(CoordinateMap::build(&coords).unwrap().0)
    }

    #[test]
    fn pyramid_shrinks_monotonically() {
        let plan = CoordinatePlan::build(random_map(500, 1)).unwrap();
        for level in 1..LEVELS {
            assert!(plan.map(level).len() <= plan.map(level - 1).len());
        }
        // Identity maps really are identities.
        for level in 0..LEVELS {
            assert!(plan.km1(level).is_identity());
        }
    }

    #[test]
    fn down_and_up_maps_share_pair_count() {
        let plan = CoordinatePlan::build(random_map(300, 2)).unwrap();
        for level in 0..LEVELS - 1 {
            // Both directions connect every fine site to its coarse cell.
            assert_eq!(plan.down(level).total_pairs(), plan.map(level).len());
            assert_eq!(plan.up(level).total_pairs(), plan.map(level).len());
        }
    }

    #[test]
    fn plan_is_deterministic() {
        let m = random_map(200, 3);
        let a = CoordinatePlan::build(m.clone()).unwrap();
        let b = CoordinatePlan::build(m).unwrap();
        for level in 0..LEVELS {
            assert_eq!(a.map(level).entries(), b.map(level).entries());
            assert_eq!(a.km3(level), b.km3(level));
        }
    }
}
