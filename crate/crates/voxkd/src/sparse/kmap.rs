//! Kernel maps: the gather/scatter plan of one sparse convolution.
//!
//! For every kernel offset the map lists the `(input_row, output_row)` pairs
//! that offset connects. Offsets are enumerated in lexicographic order, from
//! `-(K/2)` to `K/2` per axis for stride-1 convolutions and `0..K` for
//! non-overlapping strided ones. Pair lists are emitted in output-row order.
//! Both conventions are fixed so that accumulation order, and therefore every
//! trained checkpoint, is reproducible.

use super::{Coord, Coordinate, CoordinateMap, SparseError, DIMS};

/// Geometry of one sparse convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_size: i32,
    /// Up- or downsampling factor. 1 keeps the coordinate set.
    pub conv_stride: i32,
    /// Transposed convolutions upsample: output stride = input stride / conv_stride.
    pub transposed: bool,
    /// Tensor stride of the input coordinate map.
    pub in_tensor_stride: i32,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<(), SparseError> {
        if self.kernel_size < 1 || self.conv_stride < 1 || self.in_tensor_stride < 1 {
            return Err(SparseError::BadKernel(format!(
                "kernel_size {}, conv_stride {}, in_tensor_stride {} must all be >= 1",
                self.kernel_size, self.conv_stride, self.in_tensor_stride
            )));
        }
        if self.conv_stride == 1 {
            if self.kernel_size % 2 == 0 {
                return Err(SparseError::BadKernel(format!(
                    "stride-1 convolution requires an odd kernel, got {}",
                    self.kernel_size
                )));
            }
        } else if self.kernel_size != self.conv_stride {
            return Err(SparseError::BadKernel(format!(
                "strided convolution requires kernel_size == stride (non-overlapping), got kernel {} stride {}",
                self.kernel_size, self.conv_stride
            )));
        }
        if self.transposed && self.in_tensor_stride % self.conv_stride != 0 {
            return Err(SparseError::BadKernel(format!(
                "transposed stride {} does not divide input tensor stride {}",
                self.conv_stride, self.in_tensor_stride
            )));
        }
        Ok(())
    }

    /// Tensor stride of the output coordinate map.
    pub fn out_tensor_stride(&self) -> i32 {
        if self.transposed {
            self.in_tensor_stride / self.conv_stride
        } else {
            self.in_tensor_stride * self.conv_stride
        }
    }

    fn centered(&self) -> bool {
        self.conv_stride == 1
    }
}

/// Enumerates kernel offsets in lexicographic order. Centered kernels range
/// over `-(K/2)..=K/2` per axis, non-overlapping strided ones over `0..K`.
pub fn kernel_offsets(kernel_size: i32, centered: bool) -> Vec<Coord> {
    let range: Vec<i32> = if centered {
        let half = kernel_size / 2;
        (-half..=half).collect()
    } else {
        (0..kernel_size).collect()
    };
    let mut offsets = Vec::with_capacity(range.len().pow(DIMS as u32));
    for &x in &range {
        for &y in &range {
            for &z in &range {
                offsets.push([x, y, z]);
            }
        }
    }
    offsets
}

/// Per-offset gather/scatter pair lists for one convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMap {
    geometry: ConvGeometry,
    offsets: Vec<Coord>,
    pairs: Vec<Vec<(u32, u32)>>,
    in_len: usize,
    out_len: usize,
    identity: bool,
}

impl KernelMap {
    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn offsets(&self) -> &[Coord] {
        &self.offsets
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    /// `(input_row, output_row)` pairs for offset `k`, sorted by output row.
    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// True when the map is a single-offset row-for-row identity, letting
    /// 1x1 convolutions skip the gather/scatter and run one dense product.
    pub fn is_identity(&self) -> bool {
        self.identity
    }
}

/// Builds the kernel map connecting `in_map` to `out_map` under `geometry`.
///
/// For every output coordinate `u` and offset `o` the probed source is
/// `u + o * in_stride` (stride-1 and strided) or `u - o * out_stride`
/// (transposed); a pair is emitted whenever the source is active. The scan is
/// exhaustive, so no valid pair is omitted.
pub fn build_kernel_map(
    in_map: &CoordinateMap,
    out_map: &CoordinateMap,
    geometry: ConvGeometry,
) -> Result<KernelMap, SparseError> {
    geometry.validate()?;
    in_map.check_stride(geometry.in_tensor_stride)?;
    let out_stride = geometry.out_tensor_stride();
    out_map.check_stride(out_stride)?;

    let offsets = kernel_offsets(geometry.kernel_size, geometry.centered());
    let step = if geometry.transposed {
        -out_stride
    } else {
        geometry.in_tensor_stride
    };

    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (k, off) in offsets.iter().enumerate() {
        let delta = [off[0] * step, off[1] * step, off[2] * step];
        let list = &mut pairs[k];
        for (out_row, u) in out_map.iter().enumerate() {
            let probe = Coordinate::new(
                u.batch,
                [
                    u.xyz[0] + delta[0],
                    u.xyz[1] + delta[1],
                    u.xyz[2] + delta[2],
                ],
            );
            if let Some(in_row) = in_map.row_of(&probe) {
                list.push((in_row, out_row as u32));
            }
        }
    }

    let identity = offsets.len() == 1
        && in_map.len() == out_map.len()
        && pairs[0].len() == out_map.len()
        && pairs[0]
            .iter()
            .enumerate()
            .all(|(p, &(i, j))| i as usize == p && j as usize == p);

    Ok(KernelMap {
        geometry,
        offsets,
        pairs,
        in_len: in_map.len(),
        out_len: out_map.len(),
        identity,
    })
}
