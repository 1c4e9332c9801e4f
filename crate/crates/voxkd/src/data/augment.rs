//! Label-preserving augmentations on point clouds and voxel-level scene
//! mixing.
//!
//! The mixing pipeline follows the "union of two augmented scenes" recipe:
//! augment two clouds independently (seeded), voxelize each, then take the
//! voxel union with [`mix_scenes`]. The union is one training sample.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, PointCloud, VoxelizedScene};
use crate::scalar::Scalar;
use crate::sparse::{CoordinateMap, SparseTensor};

/// Which random transforms [`augment`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotate about the z axis by a uniform angle in `[0, 2π)`.
    pub rotate_z: bool,
    /// Mirror the x and/or y axis, each with probability 1/2.
    pub flip_xy: bool,
    /// Gaussian positional jitter σ in meters; 0 disables.
    pub jitter_sigma: f64,
    /// Uniform per-channel color perturbation amplitude; 0 disables.
    pub color_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_z: false,
            flip_xy: false,
            jitter_sigma: 0.0,
            color_jitter: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        !self.rotate_z && !self.flip_xy && self.jitter_sigma == 0.0 && self.color_jitter == 0.0
    }
}

/// Rotates positions about the z axis through the origin. Labels and colors
/// are untouched.
pub fn rotate_z(pc: &PointCloud, angle: f64) -> PointCloud {
    let (sin, cos) = angle.sin_cos();
    let mut positions = pc.positions.clone();
    for mut p in positions.rows_mut() {
        let (x, y) = (p[0], p[1]);
        p[0] = x * cos - y * sin;
        p[1] = x * sin + y * cos;
    }
    PointCloud {
        positions,
        colors: pc.colors.clone(),
        labels: pc.labels.clone(),
    }
}

/// Applies the configured transforms, deterministic in `seed`. With every
/// flag off the input is returned unchanged, bit for bit.
pub fn augment(pc: &PointCloud, seed: u64, cfg: &AugmentConfig) -> PointCloud {
    if cfg.is_identity() {
        return pc.clone();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = pc.clone();

    if cfg.rotate_z {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        out = rotate_z(&out, angle);
    }
    if cfg.flip_xy {
        let flip_x = rng.gen_bool(0.5);
        let flip_y = rng.gen_bool(0.5);
        for mut p in out.positions.rows_mut() {
            if flip_x {
                p[0] = -p[0];
            }
            if flip_y {
                p[1] = -p[1];
            }
        }
    }
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("jitter sigma is positive");
        out.positions.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    if cfg.color_jitter > 0.0 {
        let amp = cfg.color_jitter;
        out.colors
            .mapv_inplace(|c| (c + rng.gen_range(-amp..amp)).clamp(0.0, 1.0));
    }
    out
}

/// Voxel union of two scenes quantized at the same size. On a coordinate
/// collision the features are averaged and the label comes from scene `a`.
/// The inverse map covers `a`'s points first, then `b`'s.
pub fn mix_scenes<F: Scalar>(
    a: &VoxelizedScene<F>,
    b: &VoxelizedScene<F>,
) -> Result<VoxelizedScene<F>, DataError> {
    if a.voxel_size != b.voxel_size {
        return Err(DataError::VoxelSizeMismatch(a.voxel_size, b.voxel_size));
    }
    let channels = a.sparse.num_channels();
    if channels != b.sparse.num_channels() {
        return Err(DataError::LengthMismatch {
            what: "feature channels",
            expected: channels,
            got: b.sparse.num_channels(),
        });
    }

    let mut coords = Vec::with_capacity(a.num_voxels() + b.num_voxels());
    coords.extend_from_slice(a.sparse.cmap.entries());
    coords.extend_from_slice(b.sparse.cmap.entries());
    let (union, rows) = CoordinateMap::build(&coords)?;
    let (a_rows, b_rows) = rows.split_at(a.num_voxels());

    let n = union.len();
    let mut features = Array2::<F>::zeros((n, channels));
    let mut labels = vec![super::IGNORE_LABEL; n];
    let mut from_a = vec![false; n];
    for (old, &new) in a_rows.iter().enumerate() {
        let new = new as usize;
        features
            .row_mut(new)
            .assign(&a.sparse.features.row(old));
        labels[new] = a.labels[old];
        from_a[new] = true;
    }
    let half = F::from_f64(0.5);
    for (old, &new) in b_rows.iter().enumerate() {
        let new = new as usize;
        if from_a[new] {
            let mut row = features.row_mut(new);
            for (merged, &fb) in row.iter_mut().zip(b.sparse.features.row(old)) {
                *merged = (*merged + fb) * half;
            }
            // Label stays with scene a.
        } else {
            features.row_mut(new).assign(&b.sparse.features.row(old));
            labels[new] = b.labels[old];
        }
    }

    let mut inverse = Vec::with_capacity(a.inverse.len() + b.inverse.len());
    inverse.extend(a.inverse.iter().map(|&r| a_rows[r as usize]));
    inverse.extend(b.inverse.iter().map(|&r| b_rows[r as usize]));

    Ok(VoxelizedScene {
        sparse: SparseTensor {
            cmap: Arc::new(union),
            features,
            stride: 1,
        },
        labels,
        inverse,
        voxel_size: a.voxel_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, voxelize, SceneParams};
    use ndarray::array;

    fn small_cloud() -> PointCloud {
        synth_scene(
            5,
            &SceneParams {
                points_per_class: 400,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn all_flags_off_is_identity() {
        let pc = small_cloud();
        let out = augment(&pc, 99, &AugmentConfig::default());
        assert_eq!(pc, out);
    }

    #[test]
    fn full_turn_rotation_returns_home() {
        let pc = small_cloud();
        let out = rotate_z(&pc, std::f64::consts::TAU);
        for (a, b) in pc.positions.iter().zip(out.positions.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_by_hand() {
        let pc = PointCloud::new(
            array![[1.0, 0.0, 0.3]],
            Array2::from_elem((1, 3), 0.5),
            vec![2],
        )
        .unwrap();
        let out = rotate_z(&pc, std::f64::consts::FRAC_PI_2);
        assert!(out.positions[[0, 0]].abs() < 1e-15);
        assert!((out.positions[[0, 1]] - 1.0).abs() < 1e-15);
        assert_eq!(out.positions[[0, 2]], 0.3);
    }

    #[test]
    fn augmentations_preserve_labels_and_are_seeded() {
        let pc = small_cloud();
        let cfg = AugmentConfig {
            rotate_z: true,
            flip_xy: true,
            jitter_sigma: 0.01,
            color_jitter: 0.1,
        };
        let a = augment(&pc, 4, &cfg);
        let b = augment(&pc, 4, &cfg);
        let c = augment(&pc, 5, &cfg);
        assert_eq!(a.labels, pc.labels);
        assert_eq!(a, b, "same seed, same result");
        assert_ne!(a.positions, c.positions, "different seed moves points");
    }

    #[test]
    fn disjoint_mix_is_a_plain_union() {
        let a = voxelize::<f64>(&small_cloud(), 0.05).unwrap();
        // One voxel far outside the room.
        let far = PointCloud::new(
            array![[100.0, 100.0, 100.0]],
            Array2::from_elem((1, 3), 0.25),
            vec![3],
        )
        .unwrap();
        let b = voxelize::<f64>(&far, 0.05).unwrap();
        let mixed = mix_scenes(&a, &b).unwrap();
        assert_eq!(mixed.num_voxels(), a.num_voxels() + 1);
        assert_eq!(mixed.inverse.len(), a.inverse.len() + 1);
    }

    #[test]
    fn self_mix_collides_everywhere() {
        let a = voxelize::<f64>(&small_cloud(), 0.05).unwrap();
        let mixed = mix_scenes(&a, &a).unwrap();
        assert_eq!(mixed.num_voxels(), a.num_voxels());
        assert_eq!(mixed.labels, a.labels);
        // (f + f) / 2 == f exactly in binary floating point.
        assert_eq!(mixed.sparse.features, a.sparse.features);
    }

    #[test]
    fn collision_takes_label_from_a_and_averages_features() {
        let mk = |color: f64, label: u32| {
            let pc = PointCloud::new(
                array![[0.01, 0.01, 0.01]],
                Array2::from_elem((1, 3), color),
                vec![label],
            )
            .unwrap();
            voxelize::<f64>(&pc, 0.05).unwrap()
        };
        let a = mk(1.0, 2);
        let b = mk(0.0, 4);
        let mixed = mix_scenes(&a, &b).unwrap();
        assert_eq!(mixed.num_voxels(), 1);
        assert_eq!(mixed.labels, vec![2]);
        assert_eq!(mixed.sparse.features[[0, 0]], 0.5);
    }

    #[test]
    fn mixed_voxel_set_equals_set_union_oracle() {
        let pc_a = small_cloud();
        let pc_b = synth_scene(6, &SceneParams { points_per_class: 300, ..Default::default() })
            .unwrap();
        let a = voxelize::<f64>(&augment(&pc_a, 1, &AugmentConfig { rotate_z: true, ..Default::default() }), 0.05)
            .unwrap();
        let b = voxelize::<f64>(&augment(&pc_b, 2, &AugmentConfig { rotate_z: true, ..Default::default() }), 0.05)
            .unwrap();
        let mixed = mix_scenes(&a, &b).unwrap();

        let mut oracle: std::collections::BTreeSet<_> = Default::default();
        oracle.extend(a.sparse.cmap.entries().iter().copied());
        oracle.extend(b.sparse.cmap.entries().iter().copied());
        let got: std::collections::BTreeSet<_> =
            mixed.sparse.cmap.entries().iter().copied().collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn voxel_size_mismatch_is_rejected() {
        let a = voxelize::<f64>(&small_cloud(), 0.05).unwrap();
        let b = voxelize::<f64>(&small_cloud(), 0.02).unwrap();
        let err = mix_scenes(&a, &b).unwrap_err();
        assert!(err.to_string().contains("0.05"), "{err}");
    }
}
