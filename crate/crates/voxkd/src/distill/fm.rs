//! Feature-map distillation: a trainable 1×1×1 projection lifts a student
//! tap onto the teacher's channel width, where an MSE loss compares the two
//! maps site by site.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;

use super::losses::row_softmax;
use super::DistillError;
use crate::nn::{Parameter, SparseConv};
use crate::scalar::Scalar;
use crate::sparse::{build_kernel_map, ConvGeometry, CoordinateMap, KernelMap, SparseTensor};

/// Kernel-size-1 sparse convolution mapping student channels onto teacher
/// channels. Trained jointly with the student and discarded once training
/// ends; it exists only to make the feature-map loss well-typed across
/// widths.
#[derive(Debug, Clone)]
pub struct ProjectionLayer<F: Scalar> {
    conv: SparseConv<F>,
    student_channels: usize,
    teacher_channels: usize,
}

impl<F: Scalar> ProjectionLayer<F> {
    pub fn new(
        name: &str,
        student_channels: usize,
        teacher_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: SparseConv::new(name, student_channels, teacher_channels, 1, true, rng),
            student_channels,
            teacher_channels,
        }
    }

    /// A projection that embeds student channels unchanged into the first
    /// `student_channels` teacher channels (zero elsewhere, zero bias).
    /// Handy for tests: with equal widths it is the identity map.
    pub fn identity(name: &str, student_channels: usize, teacher_channels: usize) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
        let mut layer = Self::new(name, student_channels, teacher_channels, &mut rng);
        let mut params = Vec::new();
        layer.conv.params_mut(&mut params);
        for p in params {
            let data = p.data_mut();
            data.fill(F::from_f64(0.0));
            if data.ndim() == 3 {
                for i in 0..student_channels.min(teacher_channels) {
                    data[[0, i, i]] = F::from_f64(1.0);
                }
            }
        }
        layer
    }

    pub fn student_channels(&self) -> usize {
        self.student_channels
    }

    pub fn teacher_channels(&self) -> usize {
        self.teacher_channels
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.conv.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.conv.params_mut(out);
    }

    pub fn zero_grad(&mut self) {
        let mut params = Vec::new();
        self.conv.params_mut(&mut params);
        for p in params {
            p.zero_grad();
        }
    }

    /// Named tensors for checkpointing (resume needs the projections even
    /// though the exported student drops them).
    pub fn export_tensors(&self) -> Vec<(String, Vec<F>, Vec<usize>)> {
        let mut params = Vec::new();
        self.conv.params(&mut params);
        params
            .into_iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    p.data().iter().copied().collect(),
                    p.data().shape().to_vec(),
                )
            })
            .collect()
    }

    pub fn import_tensors(
        &mut self,
        tensors: &rustc_hash::FxHashMap<String, (Vec<F>, Vec<usize>)>,
    ) -> Result<(), DistillError> {
        let mut params = Vec::new();
        self.conv.params_mut(&mut params);
        for p in params {
            let (values, shape) = tensors
                .get(p.name())
                .ok_or_else(|| DistillError::TensorMissing(p.name().to_string()))?;
            if shape != p.data().shape() {
                return Err(DistillError::TensorShape {
                    name: p.name().to_string(),
                    expected: p.data().shape().to_vec(),
                    got: shape.clone(),
                });
            }
            let arr = ndarray::ArrayD::from_shape_vec(shape.clone(), values.clone())
                .expect("shape was checked against numel");
            p.set_data(arr);
        }
        Ok(())
    }
}

fn maps_match(a: &Arc<CoordinateMap>, b: &Arc<CoordinateMap>) -> bool {
    Arc::ptr_eq(a, b) || a.entries() == b.entries()
}

fn identity_map(map: &CoordinateMap, stride: i32) -> KernelMap {
    build_kernel_map(
        map,
        map,
        ConvGeometry {
            kernel_size: 1,
            conv_stride: 1,
            transposed: false,
            in_tensor_stride: stride,
        },
    )
    .expect("kernel-size-1 map over one coordinate set is always valid")
}

/// Mean squared error between a teacher tap and the projected (optionally
/// channel-softmaxed) student tap, averaged over sites and teacher channels.
///
/// Returns the loss and its gradient with respect to the *student* features;
/// the projection's own parameter gradients are accumulated in place. The
/// teacher tap is a constant.
pub fn feature_map_loss<F: Scalar>(
    student_tap: &SparseTensor<F>,
    teacher_tap: &SparseTensor<F>,
    proj: &mut ProjectionLayer<F>,
    fm_softmax: bool,
) -> Result<(F, Array2<F>), DistillError> {
    if student_tap.stride != teacher_tap.stride
        || !maps_match(&student_tap.cmap, &teacher_tap.cmap)
    {
        return Err(DistillError::TapAlignment {
            student_sites: student_tap.num_sites(),
            student_stride: student_tap.stride,
            teacher_sites: teacher_tap.num_sites(),
            teacher_stride: teacher_tap.stride,
        });
    }
    if student_tap.num_channels() != proj.student_channels {
        return Err(DistillError::TapWidth {
            side: "student",
            expected: proj.student_channels,
            got: student_tap.num_channels(),
        });
    }
    if teacher_tap.num_channels() != proj.teacher_channels {
        return Err(DistillError::TapWidth {
            side: "teacher",
            expected: proj.teacher_channels,
            got: teacher_tap.num_channels(),
        });
    }

    let km = identity_map(&student_tap.cmap, student_tap.stride);
    let s = if fm_softmax {
        row_softmax(&student_tap.features)
    } else {
        student_tap.features.clone()
    };
    let projected = proj.conv.forward(&s, &km)?;

    let n = teacher_tap.num_sites();
    let c = teacher_tap.num_channels();
    let diff = &projected - &teacher_tap.features;
    let inv = F::from_f64(1.0 / (n * c) as f64);
    let loss = diff.iter().fold(F::from_f64(0.0), |a, &d| a + d * d) * inv;

    let two = F::from_f64(2.0);
    let d_projected = diff.mapv(|d| d * two * inv);
    let d_s = proj.conv.backward(&s, &d_projected, &km)?;

    let grad = if fm_softmax {
        // Softmax Jacobian: dx_i = s_i · (g_i − Σ_j g_j s_j), per row.
        let mut grad = d_s;
        for (mut grow, srow) in grad.axis_iter_mut(Axis(0)).zip(s.axis_iter(Axis(0))) {
            let dot = grow.iter().zip(srow.iter()).fold(F::from_f64(0.0), |a, (&g, &p)| a + g * p);
            for (g, &p) in grow.iter_mut().zip(srow.iter()) {
                *g = p * (*g - dot);
            }
        }
        grad
    } else {
        d_s
    };
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coordinate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tap(
        rng: &mut ChaCha20Rng,
        n: usize,
        channels: usize,
        stride: i32,
    ) -> (Arc<CoordinateMap>, SparseTensor<f64>) {
        use rand::Rng;
        let coords: Vec<Coordinate> = (0..n as i32)
            .map(|i| Coordinate {
                batch: 0,
                xyz: [i * stride, 0, 0],
            })
            .collect();
        let (map, _) = CoordinateMap::build(&coords).unwrap();
        let map = Arc::new(map);
        let features = Array2::from_shape_fn((map.len(), channels), |_| rng.gen_range(-1.0..1.0));
        let tensor = SparseTensor {
            cmap: Arc::clone(&map),
            features,
            stride,
        };
        (map, tensor)
    }

    #[test]
    fn identity_projection_on_matching_taps_gives_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (_, student) = tap(&mut rng, 7, 5, 16);
        let teacher = SparseTensor {
            cmap: Arc::clone(&student.cmap),
            features: student.features.clone(),
            stride: 16,
        };
        let mut proj = ProjectionLayer::identity("proj", 5, 5);
        let (loss, grad) = feature_map_loss(&student, &teacher, &mut proj, false).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    /// A single mismatched entry of size e contributes e²/(N·C).
    #[test]
    fn single_entry_error_is_squared_over_sites_times_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (_, student) = tap(&mut rng, 4, 3, 1);
        let mut teacher_features = student.features.clone();
        teacher_features[[2, 1]] += 0.5;
        let teacher = SparseTensor {
            cmap: Arc::clone(&student.cmap),
            features: teacher_features,
            stride: 1,
        };
        let mut proj = ProjectionLayer::identity("proj", 3, 3);
        let (loss, _) = feature_map_loss(&student, &teacher, &mut proj, false).unwrap();
        assert!((loss - 0.25 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn widening_projection_embeds_student_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (map, student) = tap(&mut rng, 5, 2, 1);
        // Teacher equals the embedded student: first 2 channels copied, rest 0.
        let mut teacher_features = Array2::zeros((5, 6));
        teacher_features
            .slice_mut(ndarray::s![.., ..2])
            .assign(&student.features);
        let teacher = SparseTensor {
            cmap: map,
            features: teacher_features,
            stride: 1,
        };
        let mut proj = ProjectionLayer::identity("proj", 2, 6);
        let (loss, _) = feature_map_loss(&student, &teacher, &mut proj, false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mismatched_maps_report_tap_alignment_failure() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (_, student) = tap(&mut rng, 4, 3, 2);
        let (_, teacher) = tap(&mut rng, 5, 3, 2);
        let mut proj = ProjectionLayer::identity("proj", 3, 3);
        let err = feature_map_loss(&student, &teacher, &mut proj, false).unwrap_err();
        assert!(err.to_string().contains("tap alignment failure"), "{err}");
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let (_, student) = tap(&mut rng, 4, 3, 1);
        let teacher = SparseTensor {
            cmap: Arc::clone(&student.cmap),
            features: Array2::zeros((4, 8)),
            stride: 1,
        };
        let mut proj = ProjectionLayer::identity("proj", 3, 6);
        assert!(feature_map_loss(&student, &teacher, &mut proj, false).is_err());
    }

    /// Finite-difference oracle over student features, projection weight,
    /// and projection bias, with and without the softmax head.
    #[test]
    fn gradients_match_finite_differences() {
        for fm_softmax in [false, true] {
            let mut rng = ChaCha20Rng::seed_from_u64(15);
            let (_, student) = tap(&mut rng, 6, 4, 8);
            let (_, mut teacher) = tap(&mut rng, 6, 7, 8);
            teacher.cmap = Arc::clone(&student.cmap);
            let mut proj = ProjectionLayer::new("proj", 4, 7, &mut rng);

            proj.zero_grad();
            let (_, g_student) =
                feature_map_loss(&student, &teacher, &mut proj, fm_softmax).unwrap();

            // Snapshot parameter gradients now: every later loss evaluation
            // accumulates further gradient into the projection.
            let mut flat_grads: Vec<(usize, Vec<f64>)> = Vec::new();
            {
                let mut params = Vec::new();
                proj.params(&mut params);
                for (i, p) in params.iter().enumerate() {
                    flat_grads.push((i, p.grad().iter().copied().collect()));
                }
            }

            let h = 1e-6;
            let eval = |student: &SparseTensor<f64>, proj: &mut ProjectionLayer<f64>| {
                feature_map_loss(student, &teacher, proj, fm_softmax).unwrap().0
            };

            // Student features.
            for (r, c) in [(0usize, 0usize), (3, 2), (5, 3)] {
                let mut s = student.clone();
                s.features[[r, c]] += h;
                let up = eval(&s, &mut proj);
                s.features[[r, c]] -= 2.0 * h;
                let down = eval(&s, &mut proj);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - g_student[[r, c]]).abs() / fd.abs().max(1e-4) < 1e-6,
                    "softmax={fm_softmax} student ({r},{c}): fd {fd} vs {}",
                    g_student[[r, c]]
                );
            }

            // Projection parameters (gradients were accumulated in place).
            for (pi, grads) in flat_grads {
                for &j in &[0usize, grads.len() / 2, grads.len() - 1] {
                    let nudge = |proj: &mut ProjectionLayer<f64>, delta: f64| {
                        let mut params = Vec::new();
                        proj.params_mut(&mut params);
                        params[pi]
                            .data_mut()
                            .as_slice_mut()
                            .expect("conv params are contiguous")[j] += delta;
                    };
                    nudge(&mut proj, h);
                    let up = eval(&student, &mut proj);
                    nudge(&mut proj, -2.0 * h);
                    let down = eval(&student, &mut proj);
                    nudge(&mut proj, h);
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        (fd - grads[j]).abs() / fd.abs().max(1e-4) < 1e-6,
                        "softmax={fm_softmax} param {pi}[{j}]: fd {fd} vs {}",
                        grads[j]
                    );
                }
            }
        }
    }

    #[test]
    fn import_round_trips_and_rejects_bad_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let proj = ProjectionLayer::<f64>::new("proj.dec", 4, 7, &mut rng);
        let exported = proj.export_tensors();
        assert_eq!(exported.len(), 2); // weight + bias
        assert!(exported.iter().any(|(n, _, _)| n == "proj.dec.weight"));

        let mut table: rustc_hash::FxHashMap<String, (Vec<f64>, Vec<usize>)> = exported
            .iter()
            .cloned()
            .map(|(n, v, s)| (n, (v, s)))
            .collect();
        let mut fresh = ProjectionLayer::<f64>::new("proj.dec", 4, 7, &mut rng);
        fresh.import_tensors(&table).unwrap();
        assert_eq!(fresh.export_tensors(), exported);

        table.get_mut("proj.dec.bias").unwrap().1 = vec![3];
        assert!(matches!(
            fresh.import_tensors(&table),
            Err(DistillError::TensorShape { .. })
        ));
        table.remove("proj.dec.bias");
        assert!(matches!(
            fresh.import_tensors(&table),
            Err(DistillError::TensorMissing(_))
        ));
    }
}
