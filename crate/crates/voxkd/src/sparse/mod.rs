//! Coordinate bookkeeping for sparse voxel tensors.
//!
//! A sparse tensor is a set of active integer voxel coordinates plus one
//! dense feature row per coordinate. This module owns the coordinate side:
//! deduplicated, canonically ordered coordinate maps, stride quantization for
//! the downsampling path, and the kernel maps that plan a sparse convolution.
//!
//! Everything here is exact integer arithmetic. Maps are immutable once
//! built and cheap to share behind an [`Arc`].

mod kmap;

pub use kmap::{build_kernel_map, kernel_offsets, ConvGeometry, KernelMap};

use std::sync::Arc;

use ndarray::Array2;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::scalar::Scalar;

/// Spatial dimensionality of the engine. Voxel grids are three-dimensional.
pub const DIMS: usize = 3;

/// Integer voxel position.
pub type Coord = [i32; DIMS];

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("empty coordinate set")]
    EmptyCoordinates,
    #[error("stride misalignment: coordinate {coord:?} not divisible by stride {stride}")]
    StrideMisalignment { coord: Coord, stride: i32 },
    #[error("stride factor must be >= 1, got {0}")]
    BadStrideFactor(i32),
    #[error("unsupported kernel geometry: {0}")]
    BadKernel(String),
    #[error("feature rows ({rows}) do not match coordinate count ({coords})")]
    FeatureRowMismatch { rows: usize, coords: usize },
}

/// A batched voxel coordinate. Ordering is lexicographic by
/// `(batch, x, y, z)`, which is the canonical order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coordinate {
    pub batch: u32,
    pub xyz: Coord,
}

impl Coordinate {
    pub fn new(batch: u32, xyz: Coord) -> Self {
        Self { batch, xyz }
    }
}

/// Deduplicated, canonically sorted set of coordinates with exact reverse
/// lookup. Row indices are dense in `0..len`.
#[derive(Debug, Clone)]
pub struct CoordinateMap {
    entries: Vec<Coordinate>,
    index: FxHashMap<Coordinate, u32>,
}

impl PartialEq for CoordinateMap {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}
impl Eq for CoordinateMap {}

impl CoordinateMap {
    /// Builds a map from arbitrary coordinates: deduplicates, sorts
    /// canonically, and returns for each input position its row in the map.
    pub fn build(coords: &[Coordinate]) -> Result<(Self, Vec<u32>), SparseError> {
        if coords.is_empty() {
            return Err(SparseError::EmptyCoordinates);
        }
        let mut entries: Vec<Coordinate> = coords.to_vec();
        entries.sort_unstable();
        entries.dedup();
        let map = Self::from_sorted_unique(entries);
        let inverse = coords.iter().map(|c| map.index[c]).collect();
        Ok((map, inverse))
    }

    fn from_sorted_unique(entries: Vec<Coordinate>) -> Self {
        let mut index =
            FxHashMap::with_capacity_and_hasher(entries.len(), Default::default());
        for (i, c) in entries.iter().enumerate() {
            index.insert(*c, i as u32);
        }
        Self { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Row of `coord`, or `None` if inactive.
    pub fn row_of(&self, coord: &Coordinate) -> Option<u32> {
        self.index.get(coord).copied()
    }

    pub fn entries(&self) -> &[Coordinate] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Coordinate> {
        self.entries.iter()
    }

    /// Largest batch index plus one.
    pub fn batch_size(&self) -> u32 {
        self.entries.iter().map(|c| c.batch + 1).max().unwrap_or(0)
    }

    /// Checks that every coordinate is divisible by `stride` on all axes.
    pub fn check_stride(&self, stride: i32) -> Result<(), SparseError> {
        for c in &self.entries {
            if c.xyz.iter().any(|&v| v.rem_euclid(stride) != 0) {
                return Err(SparseError::StrideMisalignment {
                    coord: c.xyz,
                    stride,
                });
            }
        }
        Ok(())
    }
}

/// Quantizes a coordinate map to a coarser grid: floor-division of every
/// coordinate by `in_stride * factor`, re-multiplied, then deduplicated.
/// The result is the coordinate set at tensor stride `in_stride * factor`.
pub fn stride_coordinates(
    cmap: &CoordinateMap,
    in_stride: i32,
    factor: i32,
) -> Result<CoordinateMap, SparseError> {
    if factor < 1 {
        return Err(SparseError::BadStrideFactor(factor));
    }
    cmap.check_stride(in_stride)?;
    if factor == 1 {
        return Ok(cmap.clone());
    }
    let out_stride = in_stride * factor;
    let mut quantized: Vec<Coordinate> = cmap
        .iter()
        .map(|c| {
            let xyz = [
                c.xyz[0].div_euclid(out_stride) * out_stride,
                c.xyz[1].div_euclid(out_stride) * out_stride,
                c.xyz[2].div_euclid(out_stride) * out_stride,
            ];
            Coordinate::new(c.batch, xyz)
        })
        .collect();
    quantized.sort_unstable();
    quantized.dedup();
    Ok(CoordinateMap::from_sorted_unique(quantized))
}

/// Coordinate map plus an `N x C` feature matrix at a tensor stride.
///
/// Row `i` of `features` belongs to `cmap.entries()[i]`.
#[derive(Debug, Clone)]
pub struct SparseTensor<F: Scalar> {
    pub cmap: Arc<CoordinateMap>,
    pub features: Array2<F>,
    pub stride: i32,
}

impl<F: Scalar> SparseTensor<F> {
    /// Validating constructor: checks row count and stride divisibility.
    pub fn new(
        cmap: Arc<CoordinateMap>,
        features: Array2<F>,
        stride: i32,
    ) -> Result<Self, SparseError> {
        if features.nrows() != cmap.len() {
            return Err(SparseError::FeatureRowMismatch {
                rows: features.nrows(),
                coords: cmap.len(),
            });
        }
        cmap.check_stride(stride)?;
        Ok(Self {
            cmap,
            features,
            stride,
        })
    }

    /// Internal constructor for layer outputs whose invariants hold by
    /// construction.
    pub(crate) fn from_parts(cmap: Arc<CoordinateMap>, features: Array2<F>, stride: i32) -> Self {
        debug_assert_eq!(features.nrows(), cmap.len());
        Self {
            cmap,
            features,
            stride,
        }
    }

    pub fn num_sites(&self) -> usize {
        self.cmap.len()
    }

    pub fn num_channels(&self) -> usize {
        self.features.ncols()
    }

    /// Shares the coordinate map but replaces the feature matrix.
    pub fn with_features(&self, features: Array2<F>) -> Self {
        debug_assert_eq!(features.nrows(), self.cmap.len());
        Self {
            cmap: Arc::clone(&self.cmap),
            features,
            stride: self.stride,
        }
    }

    /// True when both operands are defined on the same coordinate set.
    pub fn same_cmap(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.cmap, &other.cmap) || self.cmap == other.cmap
    }
}
