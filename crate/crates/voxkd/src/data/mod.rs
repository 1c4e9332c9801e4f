//! Point-cloud ingestion and voxelization.
//!
//! A [`PointCloud`] carries per-point positions (meters), RGB colors in
//! `[0, 1]`, and integer labels. [`voxelize`] floor-quantizes it onto a
//! voxel grid: per-voxel features are the mean color, per-voxel labels a
//! majority vote, and an inverse map remembers which voxel each input point
//! landed in so predictions can be carried back to points.

mod augment;
mod manifest;
mod ply;
mod synth;

pub use augment::{augment, mix_scenes, rotate_z, AugmentConfig};
pub use manifest::{
    load_dataset, seeded_manifest, write_dataset, DatasetManifest, SceneDescriptor, Split,
};
pub use ply::{load_ply, save_ply, PlyFormat};
pub use synth::{synth_scene, SceneParams};

use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::sparse::{Coordinate, CoordinateMap, SparseError, SparseTensor};

/// Label value marking points that carry no supervision. Such points are
/// excluded from label votes, losses, and metrics.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("non-finite position at point {0}")]
    NonFinitePosition(usize),
    #[error("{what} has {got} rows, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cannot mix scenes with voxel sizes {0} and {1}")]
    VoxelSizeMismatch(f64, f64),
    #[error("bad scene parameters: {0}")]
    BadSceneParams(String),
    #[error("{path}: line {line}: {msg}")]
    Ply {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Points in meters with colors and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// N×3 positions in meters.
    pub positions: Array2<f64>,
    /// N×3 RGB, clamped to `[0, 1]` on construction.
    pub colors: Array2<f64>,
    /// N labels in `[0, K) ∪ {IGNORE_LABEL}`.
    pub labels: Vec<u32>,
}

impl PointCloud {
    /// Validates lengths and finiteness; clamps colors into `[0, 1]`.
    pub fn new(
        positions: Array2<f64>,
        mut colors: Array2<f64>,
        labels: Vec<u32>,
    ) -> Result<Self, DataError> {
        let n = positions.nrows();
        if colors.nrows() != n || colors.ncols() != 3 {
            return Err(DataError::LengthMismatch {
                what: "colors",
                expected: n,
                got: colors.nrows(),
            });
        }
        if labels.len() != n {
            return Err(DataError::LengthMismatch {
                what: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        if positions.ncols() != 3 {
            return Err(DataError::LengthMismatch {
                what: "position columns",
                expected: 3,
                got: positions.ncols(),
            });
        }
        for (i, row) in positions.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinitePosition(i));
            }
        }
        colors.mapv_inplace(|c| c.clamp(0.0, 1.0));
        Ok(Self {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A quantized scene: voxel features (mean color), voxel labels, and the
/// point-to-voxel inverse map.
#[derive(Debug, Clone)]
pub struct VoxelizedScene<F: Scalar> {
    pub sparse: SparseTensor<F>,
    /// Per-voxel majority label, `IGNORE_LABEL` if no voted point fell in.
    pub labels: Vec<u32>,
    /// Voxel row for each input point, in input order.
    pub inverse: Vec<u32>,
    /// Edge length in meters of one voxel.
    pub voxel_size: f64,
}

impl<F: Scalar> VoxelizedScene<F> {
    pub fn num_voxels(&self) -> usize {
        self.sparse.num_sites()
    }
}

fn quantize(positions: &Array2<f64>, voxel_size: f64) -> Vec<Coordinate> {
    positions
        .rows()
        .into_iter()
        .map(|p| Coordinate {
            batch: 0,
            xyz: [
                (p[0] / voxel_size).floor() as i32,
                (p[1] / voxel_size).floor() as i32,
                (p[2] / voxel_size).floor() as i32,
            ],
        })
        .collect()
}

/// Majority vote with ties broken by the lowest class id; `IGNORE_LABEL`
/// points do not vote, and a voxel is ignore only when nothing voted.
fn majority(counts: &rustc_hash::FxHashMap<u32, u32>) -> u32 {
    let mut best: Option<(u32, u32)> = None;
    for (&label, &count) in counts {
        best = match best {
            None => Some((label, count)),
            Some((bl, bc)) => {
                if count > bc || (count == bc && label < bl) {
                    Some((label, count))
                } else {
                    Some((bl, bc))
                }
            }
        };
    }
    best.map(|(l, _)| l).unwrap_or(IGNORE_LABEL)
}

/// Floor-quantizes a cloud onto a grid of `voxel_size` meters: voxel
/// coordinate `= floor(position / voxel_size)` per axis, features are the
/// mean color of the points inside (accumulated in input order), labels a
/// majority vote.
pub fn voxelize<F: Scalar>(
    pc: &PointCloud,
    voxel_size: f64,
) -> Result<VoxelizedScene<F>, DataError> {
    if pc.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    if voxel_size <= 0.0 || !voxel_size.is_finite() {
        return Err(DataError::BadVoxelSize(voxel_size));
    }

    let coords = quantize(&pc.positions, voxel_size);
    let (map, inverse) = CoordinateMap::build(&coords)?;
    let n_vox = map.len();

    let mut sums = Array2::<f64>::zeros((n_vox, 3));
    let mut counts = vec![0u32; n_vox];
    let mut votes: Vec<rustc_hash::FxHashMap<u32, u32>> = vec![Default::default(); n_vox];
    for (i, &row) in inverse.iter().enumerate() {
        let row = row as usize;
        for c in 0..3 {
            sums[[row, c]] += pc.colors[[i, c]];
        }
        counts[row] += 1;
        let label = pc.labels[i];
        if label != IGNORE_LABEL {
            *votes[row].entry(label).or_insert(0) += 1;
        }
    }

    let features = Array2::from_shape_fn((n_vox, 3), |(r, c)| {
        F::from_f64(sums[[r, c]] / counts[r] as f64)
    });
    let labels: Vec<u32> = votes.iter().map(majority).collect();

    Ok(VoxelizedScene {
        sparse: SparseTensor {
            cmap: Arc::new(map),
            features,
            stride: 1,
        },
        labels,
        inverse,
        voxel_size,
    })
}

/// Occupied fraction of the axis-aligned bounding grid at each voxel size:
/// `occupied voxels / total voxels in the bounding box of occupied voxels`.
pub fn occupancy_stats(
    pc: &PointCloud,
    voxel_sizes: &[f64],
) -> Result<Vec<(f64, f64)>, DataError> {
    if pc.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    let mut out = Vec::with_capacity(voxel_sizes.len());
    for &vs in voxel_sizes {
        if vs <= 0.0 || !vs.is_finite() {
            return Err(DataError::BadVoxelSize(vs));
        }
        let coords = quantize(&pc.positions, vs);
        let (map, _) = CoordinateMap::build(&coords)?;
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in map.entries() {
            for a in 0..3 {
                lo[a] = lo[a].min(c.xyz[a]);
                hi[a] = hi[a].max(c.xyz[a]);
            }
        }
        let total: f64 = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64).product();
        out.push((vs, map.len() as f64 / total));
    }
    Ok(out)
}
