//! Sparse convolution as gather -> GEMM -> scatter over a kernel map.

use ndarray::{Array2, Axis, Ix3};
use rand::Rng;

use super::{NnError, Parameter};
use crate::scalar::Scalar;
use crate::sparse::KernelMap;

/// A sparse convolution. The weight has shape `[kernel_volume, C_in, C_out]`;
/// geometry (kernel size, stride, transposition) lives in the [`KernelMap`]
/// handed to each call, so one layer can serve any batch.
#[derive(Debug, Clone)]
pub struct SparseConv<F: Scalar> {
    weight: Parameter<F>,
    bias: Option<Parameter<F>>,
    in_channels: usize,
    out_channels: usize,
}

impl<F: Scalar> SparseConv<F> {
    /// `kernel_volume` is the offset count of the kernel maps this layer will
    /// run on (`K^3`). Weights take fan-in scaled normal initialization with
    /// `fan_in = kernel_volume * in_channels`; the bias, when present, starts
    /// at zero.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_volume: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Parameter::fan_in_normal(
            format!("{name}.weight"),
            &[kernel_volume, in_channels, out_channels],
            kernel_volume * in_channels,
            rng,
        );
        let bias = with_bias.then(|| Parameter::zeros(format!("{name}.bias"), &[out_channels], true));
        SparseConv {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Parameter<F> {
        &self.weight
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    fn check(&self, x: &Array2<F>, km: &KernelMap) -> Result<(), NnError> {
        if x.nrows() != km.in_len() {
            return Err(NnError::RowMismatch {
                expected: km.in_len(),
                got: x.nrows(),
            });
        }
        if x.ncols() != self.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: self.in_channels,
                got: x.ncols(),
            });
        }
        debug_assert_eq!(km.num_offsets(), self.weight.data().shape()[0]);
        Ok(())
    }

    pub fn forward(&self, x: &Array2<F>, km: &KernelMap) -> Result<Array2<F>, NnError> {
        self.check(x, km)?;
        let w = self
            .weight
            .data()
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv weight is 3-d");

        let mut out = if km.is_identity() {
            x.dot(&w.index_axis(Axis(0), 0))
        } else {
            let mut out = Array2::zeros((km.out_len(), self.out_channels));
            for k in 0..km.num_offsets() {
                let pairs = km.pairs(k);
                if pairs.is_empty() {
                    continue;
                }
                let mut gathered = Array2::zeros((pairs.len(), self.in_channels));
                for (p, &(i, _)) in pairs.iter().enumerate() {
                    gathered.row_mut(p).assign(&x.row(i as usize));
                }
                let prod = gathered.dot(&w.index_axis(Axis(0), k));
                for (p, &(_, j)) in pairs.iter().enumerate() {
                    let mut row = out.row_mut(j as usize);
                    row += &prod.row(p);
                }
            }
            out
        };

        if let Some(b) = &self.bias {
            let b = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b;
        }
        Ok(out)
    }

    /// Accumulates weight (and bias) gradients and returns the gradient with
    /// respect to the input features. `x` must be the forward input.
    pub fn backward(
        &mut self,
        x: &Array2<F>,
        grad_out: &Array2<F>,
        km: &KernelMap,
    ) -> Result<Array2<F>, NnError> {
        self.check(x, km)?;
        if grad_out.nrows() != km.out_len() || grad_out.ncols() != self.out_channels {
            return Err(NnError::RowMismatch {
                expected: km.out_len(),
                got: grad_out.nrows(),
            });
        }

        let (wdata, wgrad) = self.weight.data_and_grad_mut();
        let w = wdata.view().into_dimensionality::<Ix3>().unwrap();
        let mut wgrad = wgrad.view_mut().into_dimensionality::<Ix3>().unwrap();

        let grad_x = if km.is_identity() {
            let mut wg = wgrad.index_axis_mut(Axis(0), 0);
            wg += &x.t().dot(grad_out);
            grad_out.dot(&w.index_axis(Axis(0), 0).t())
        } else {
            let mut grad_x = Array2::zeros((km.in_len(), self.in_channels));
            for k in 0..km.num_offsets() {
                let pairs = km.pairs(k);
                if pairs.is_empty() {
                    continue;
                }
                let mut gx = Array2::zeros((pairs.len(), self.in_channels));
                let mut gg = Array2::zeros((pairs.len(), self.out_channels));
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    gx.row_mut(p).assign(&x.row(i as usize));
                    gg.row_mut(p).assign(&grad_out.row(j as usize));
                }
                let mut wg = wgrad.index_axis_mut(Axis(0), k);
                wg += &gx.t().dot(&gg);
                let gin = gg.dot(&w.index_axis(Axis(0), k).t());
                for (p, &(i, _)) in pairs.iter().enumerate() {
                    let mut row = grad_x.row_mut(i as usize);
                    row += &gin.row(p);
                }
            }
            grad_x
        };

        if let Some(b) = &mut self.bias {
            let sums = grad_out.sum_axis(Axis(0));
            let mut bg = b
                .grad_mut()
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &sums;
        }
        Ok(grad_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{
        build_kernel_map, stride_coordinates, ConvGeometry, Coordinate, CoordinateMap,
    };
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_features(rng: &mut ChaCha20Rng, n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |_| rand::Rng::gen_range(rng, -1.0..1.0))
    }

    fn random_coords(rng: &mut ChaCha20Rng, n: usize, lo: i32, hi: i32) -> CoordinateMap {
        let coords: Vec<Coordinate> = (0..n)
            .map(|_| {
                Coordinate::new(
                    rand::Rng::gen_range(rng, 0..2),
                    [
                        rand::Rng::gen_range(rng, lo..hi),
                        rand::Rng::gen_range(rng, lo..hi),
                        rand::Rng::gen_range(rng, lo..hi),
                    ],
                )
            })
            .collect();
        CoordinateMap::build(&coords).unwrap().0
    }

    fn k3s1(map: &CoordinateMap) -> KernelMap {
        build_kernel_map(
            map,
            map,
            ConvGeometry {
                kernel_size: 3,
                conv_stride: 1,
                transposed: false,
                in_tensor_stride: 1,
            },
        )
        .unwrap()
    }

    fn k1s1(map: &CoordinateMap) -> KernelMap {
        build_kernel_map(
            map,
            map,
            ConvGeometry {
                kernel_size: 1,
                conv_stride: 1,
                transposed: false,
                in_tensor_stride: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_conv_is_dense_matmul() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let map = random_coords(&mut rng, 40, -4, 4);
        let km = k1s1(&map);
        assert!(km.is_identity());
        let conv = SparseConv::<f64>::new("c", 3, 5, 1, true, &mut rng);
        let x = random_features(&mut rng, map.len(), 3);
        let y = conv.forward(&x, &km).unwrap();

        let w = conv.weight.data().view().into_dimensionality::<Ix3>().unwrap();
        let b = conv.bias.as_ref().unwrap();
        let expected = x.dot(&w.index_axis(Axis(0), 0))
            + &b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let diff = (&y - &expected).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    /// Oracle: a fully occupied grid convolved densely with zero padding.
    #[test]
    fn matches_dense_convolution_on_full_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let side = 4i32;
        let mut coords = Vec::new();
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    coords.push(Coordinate::new(0, [x, y, z]));
                }
            }
        }
        let (map, _) = CoordinateMap::build(&coords).unwrap();
        let km = k3s1(&map);
        let (cin, cout) = (2usize, 3usize);
        let conv = SparseConv::<f64>::new("c", cin, cout, 27, false, &mut rng);
        let x = random_features(&mut rng, map.len(), cin);
        let y = conv.forward(&x, &km).unwrap();

        // Dense reference: out[u] = sum_o W_o^T x[u + o].
        let w = conv.weight.data().view().into_dimensionality::<Ix3>().unwrap();
        let offsets = km.offsets();
        let mut dense = Array3::<f64>::zeros((map.len(), 1, cout));
        for (row, coord) in map.iter().enumerate() {
            for (k, off) in offsets.iter().enumerate() {
                let src = [
                    coord.xyz[0] + off[0],
                    coord.xyz[1] + off[1],
                    coord.xyz[2] + off[2],
                ];
                if src.iter().any(|&v| v < 0 || v >= side) {
                    continue;
                }
                let src_row = map
                    .row_of(&Coordinate::new(0, src))
                    .expect("full grid") as usize;
                for ci in 0..cin {
                    for co in 0..cout {
                        dense[[row, 0, co]] += x[[src_row, ci]] * w[[k, ci, co]];
                    }
                }
            }
        }
        for row in 0..map.len() {
            for co in 0..cout {
                assert!((y[[row, co]] - dense[[row, 0, co]]).abs() < 1e-12);
            }
        }
    }

    /// `<conv(x), g> == <x, conv_backward(g)>` for the linear (bias-free) map.
    #[test]
    fn input_gradient_is_adjoint() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let map = random_coords(&mut rng, 60, -4, 4);
        let km = k3s1(&map);
        let mut conv = SparseConv::<f64>::new("c", 4, 6, 27, false, &mut rng);
        let x = random_features(&mut rng, map.len(), 4);
        let g = random_features(&mut rng, map.len(), 6);

        let y = conv.forward(&x, &km).unwrap();
        let gx = conv.backward(&x, &g, &km).unwrap();

        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &gx).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-12);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let map = random_coords(&mut rng, 30, -3, 3);
        let km = k3s1(&map);
        let mut conv = SparseConv::<f64>::new("c", 2, 3, 27, true, &mut rng);
        let x = random_features(&mut rng, map.len(), 2);
        let g = random_features(&mut rng, map.len(), 3);

        conv.backward(&x, &g, &km).unwrap();
        let analytic = conv.weight.grad().clone();
        let banal = conv.bias.as_ref().unwrap().grad().clone();

        let h = 1e-6;
        let loss = |c: &SparseConv<f64>| (&c.forward(&x, &km).unwrap() * &g).sum();
        for &idx in &[0usize, 7, 50, 101, 161] {
            let orig = conv.weight.data().as_slice().unwrap()[idx];
            conv.weight.data_mut().as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&conv);
            conv.weight.data_mut().as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&conv);
            conv.weight.data_mut().as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() / an.abs().max(1e-8) < 1e-5,
                "weight[{idx}]: fd {fd} analytic {an}"
            );
        }
        // Bias gradient is the column sum of the output gradient.
        let expected = g.sum_axis(Axis(0));
        for c in 0..3 {
            assert!((banal.as_slice().unwrap()[c] - expected[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_and_transposed_shapes_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let fine = random_coords(&mut rng, 80, -6, 6);
        let coarse = stride_coordinates(&fine, 1, 2).unwrap();

        let down = build_kernel_map(
            &fine,
            &coarse,
            ConvGeometry {
                kernel_size: 2,
                conv_stride: 2,
                transposed: false,
                in_tensor_stride: 1,
            },
        )
        .unwrap();
        let up = build_kernel_map(
            &coarse,
            &fine,
            ConvGeometry {
                kernel_size: 2,
                conv_stride: 2,
                transposed: true,
                in_tensor_stride: 2,
            },
        )
        .unwrap();

        let conv_d = SparseConv::<f64>::new("d", 3, 5, 8, false, &mut rng);
        let conv_u = SparseConv::<f64>::new("u", 5, 3, 8, false, &mut rng);
        let x = random_features(&mut rng, fine.len(), 3);
        let mid = conv_d.forward(&x, &down).unwrap();
        assert_eq!(mid.nrows(), coarse.len());
        let back = conv_u.forward(&mid, &up).unwrap();
        assert_eq!(back.nrows(), fine.len());
    }

    #[test]
    fn row_mismatch_is_reported() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let map = random_coords(&mut rng, 10, -2, 2);
        let km = k1s1(&map);
        let conv = SparseConv::<f64>::new("c", 3, 3, 1, false, &mut rng);
        let x = Array2::<f64>::zeros((map.len() + 1, 3));
        assert!(conv.forward(&x, &km).is_err());
    }
}
