//! Layers with explicit forward and backward passes.
//!
//! There is no tape: every layer exposes `forward_train` (saves what its
//! backward needs), `forward_eval` (no caches, batch norm uses running
//! statistics), and `backward` (consumes the saved cache, accumulates
//! parameter gradients, returns the input gradient). Networks compose these
//! by hand, which keeps the differentiation path explicit and auditable.

mod block;
mod conv;
mod norm;

pub use block::ResidualBlock;
pub use conv::SparseConv;
pub use norm::{BatchNorm, BnCache};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;
use ndarray::Array2;

#[derive(Debug, Error)]
pub enum NnError {
    /// Residual addition of tensors living on different coordinate maps.
    #[error("coordinate map mismatch")]
    CoordinateMapMismatch,
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel map expects {expected} input rows, features have {got}")]
    RowMismatch { expected: usize, got: usize },
    #[error("backward called without a saved forward cache")]
    MissingCache,
}

/// A named tensor with an accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    name: String,
    data: ArrayD<F>,
    grad: ArrayD<F>,
    trainable: bool,
}

impl<F: Scalar> Parameter<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        let dim = IxDyn(shape);
        Parameter {
            name: name.into(),
            data: ArrayD::zeros(dim.clone()),
            grad: ArrayD::zeros(dim),
            trainable,
        }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        let mut p = Self::zeros(name, shape, trainable);
        p.data.fill(F::from_f64(1.0));
        p
    }

    /// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`.
    /// Samples are drawn in f64 and converted, so f32 and f64 instantiations
    /// of the same seed agree to rounding.
    pub fn fan_in_normal(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let mut p = Self::zeros(name, shape, true);
        for v in p.data.iter_mut() {
            *v = F::from_f64(normal.sample(rng));
        }
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn data(&self) -> &ArrayD<F> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ArrayD<F> {
        &mut self.data
    }

    pub fn grad(&self) -> &ArrayD<F> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut ArrayD<F> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::from_f64(0.0));
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Replaces the data in place, keeping name and flags.
    pub fn set_data(&mut self, data: ArrayD<F>) {
        assert_eq!(data.shape(), self.data.shape(), "parameter {}", self.name);
        self.data = data;
    }

    /// Splits into the value and its gradient accumulator, for layers that
    /// read the former while writing the latter.
    pub fn data_and_grad_mut(&mut self) -> (&ArrayD<F>, &mut ArrayD<F>) {
        (&self.data, &mut self.grad)
    }

    /// The opposite split: mutable value, read-only gradient, for optimizers
    /// that consume the accumulated gradient to update the weights.
    pub fn data_mut_and_grad(&mut self) -> (&mut ArrayD<F>, &ArrayD<F>) {
        (&mut self.data, &self.grad)
    }

    /// Converts to another element type through f64.
    pub fn cast<G: Scalar>(&self) -> Parameter<G> {
        Parameter {
            name: self.name.clone(),
            data: self.data.mapv(|v| G::from_f64(v.to_f64())),
            grad: self.grad.mapv(|v| G::from_f64(v.to_f64())),
            trainable: self.trainable,
        }
    }
}

/// Element-wise `max(x, 0)`.
pub fn relu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let zero = F::from_f64(0.0);
    x.mapv(|v| if v > zero { v } else { zero })
}

/// Gradient of [`relu`], masked by the forward *output* (`y > 0`).
pub fn relu_backward<F: Scalar>(y: &Array2<F>, grad_out: &Array2<F>) -> Array2<F> {
    let zero = F::from_f64(0.0);
    let mut grad = grad_out.clone();
    grad.zip_mut_with(y, |g, &v| {
        if v <= zero {
            *g = zero;
        }
    });
    grad
}

/// Adds two feature arrays defined on the same coordinate map.
///
/// The caller passes the coordinate-map lengths it knows both tensors live
/// on; a disagreement is a wiring error surfaced as
/// [`NnError::CoordinateMapMismatch`].
pub fn residual_add<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Result<Array2<F>, NnError> {
    if a.nrows() != b.nrows() {
        return Err(NnError::CoordinateMapMismatch);
    }
    if a.ncols() != b.ncols() {
        return Err(NnError::ChannelMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn relu_clamps_and_masks() {
        let x = array![[-1.0f64, 0.0], [2.0, -0.5]];
        let y = relu(&x);
        assert_eq!(y, array![[0.0, 0.0], [2.0, 0.0]]);
        let g = array![[1.0, 1.0], [1.0, 1.0]];
        let gx = relu_backward(&y, &g);
        assert_eq!(gx, array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn residual_add_rejects_mismatched_maps() {
        let a = Array2::<f64>::zeros((3, 2));
        let b = Array2::<f64>::zeros((4, 2));
        let err = residual_add(&a, &b).unwrap_err();
        assert_eq!(err.to_string(), "coordinate map mismatch");
    }

    #[test]
    fn fan_in_normal_std_matches_rule() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let p = Parameter::<f64>::fan_in_normal("w", &[27, 32, 32], 27 * 32, &mut rng);
        let n = p.numel() as f64;
        let mean = p.data().iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = p
            .data()
            .iter()
            .map(|v| (v.to_f64() - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = 2.0 / (27.0 * 32.0);
        assert!(mean.abs() < 5e-4, "mean {mean}");
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn f32_and_f64_init_agree_to_rounding() {
        let mut r1 = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let mut r2 = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let a = Parameter::<f32>::fan_in_normal("w", &[8, 4, 4], 32, &mut r1);
        let b = Parameter::<f64>::fan_in_normal("w", &[8, 4, 4], 32, &mut r2);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
