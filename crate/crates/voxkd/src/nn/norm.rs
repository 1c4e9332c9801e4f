//! Batch normalization over the active sites of a sparse tensor.
//!
//! Statistics are taken over all rows in the batch (every occupied voxel),
//! which is the natural analogue of image batch norm when the spatial
//! dimensions are ragged. Normalization uses the biased variance; the running
//! variance is updated with the unbiased estimate (falling back to the biased
//! one for a single-row batch, where the correction is undefined).

use ndarray::{Array1, Array2, Axis, Ix1};

use super::{NnError, Parameter};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    name: String,
    gamma: Parameter<F>,
    beta: Parameter<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
    momentum: f64,
    eps: f64,
    channels: usize,
}

/// Saved activations for [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BnCache<F: Scalar> {
    xhat: Array2<F>,
    invstd: Array1<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Parameter::ones(format!("{name}.gamma"), &[channels], true),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels], true),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::from_f64(1.0)),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    /// Running statistics as named tensors, for checkpoints.
    pub fn state(&self, out: &mut Vec<(String, Vec<F>, Vec<usize>)>) {
        out.push((
            format!("{}.running_mean", self.name),
            self.running_mean.to_vec(),
            vec![self.channels],
        ));
        out.push((
            format!("{}.running_var", self.name),
            self.running_var.to_vec(),
            vec![self.channels],
        ));
    }

    pub fn load_state(&mut self, running_mean: &[F], running_var: &[F]) {
        assert_eq!(running_mean.len(), self.channels);
        assert_eq!(running_var.len(), self.channels);
        self.running_mean = Array1::from_vec(running_mean.to_vec());
        self.running_var = Array1::from_vec(running_var.to_vec());
    }

    pub fn running_mean(&self) -> &Array1<F> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Array1<F> {
        &self.running_var
    }

    fn check(&self, x: &Array2<F>) -> Result<(), NnError> {
        if x.ncols() != self.channels {
            return Err(NnError::ChannelMismatch {
                expected: self.channels,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Normalizes with batch statistics, updates the running estimates, and
    /// returns the cache its backward needs.
    pub fn forward_train(&mut self, x: &Array2<F>) -> Result<(Array2<F>, BnCache<F>), NnError> {
        self.check(x)?;
        let n = x.nrows();
        let nf = F::from_f64(n as f64);
        let mean = x.sum_axis(Axis(0)).mapv(|v| v / nf);
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|v| v / nf);
        let invstd = var.mapv(|v| F::from_f64(1.0) / (v + F::from_f64(self.eps)).sqrt());

        let xhat = &centered * &invstd;
        let gamma = self.gamma.data().view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.data().view().into_dimensionality::<Ix1>().unwrap();
        let y = &xhat * &gamma + &beta;

        let m = F::from_f64(self.momentum);
        let keep = F::from_f64(1.0 - self.momentum);
        let var_update = if n > 1 {
            let correction = F::from_f64(n as f64 / (n as f64 - 1.0));
            var.mapv(|v| v * correction)
        } else {
            var
        };
        self.running_mean = self.running_mean.mapv(|v| v * keep) + mean.mapv(|v| v * m);
        self.running_var = self.running_var.mapv(|v| v * keep) + var_update.mapv(|v| v * m);

        Ok((y, BnCache { xhat, invstd }))
    }

    /// Normalizes with the running statistics; no state changes.
    pub fn forward_eval(&self, x: &Array2<F>) -> Result<Array2<F>, NnError> {
        self.check(x)?;
        let invstd = self
            .running_var
            .mapv(|v| F::from_f64(1.0) / (v + F::from_f64(self.eps)).sqrt());
        let gamma = self.gamma.data().view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.data().view().into_dimensionality::<Ix1>().unwrap();
        let xhat = (x - &self.running_mean) * &invstd;
        Ok(&xhat * &gamma + &beta)
    }

    /// Backward through the batch-statistics normalization.
    pub fn backward(&mut self, cache: &BnCache<F>, grad_out: &Array2<F>) -> Result<Array2<F>, NnError> {
        self.check(grad_out)?;
        let n = grad_out.nrows();
        let nf = F::from_f64(n as f64);

        let dbeta = grad_out.sum_axis(Axis(0));
        let dgamma = (grad_out * &cache.xhat).sum_axis(Axis(0));

        let gamma = self.gamma.data().view().into_dimensionality::<Ix1>().unwrap();
        let dxhat = grad_out * &gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));

        // dx = invstd/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        let mut dx = dxhat.mapv(|v| v * nf);
        dx -= &sum_dxhat;
        dx -= &(&cache.xhat * &sum_dxhat_xhat);
        let scale = cache.invstd.mapv(|v| v / nf);
        dx *= &scale;

        let mut gg = self
            .gamma
            .grad_mut()
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        gg += &dgamma;
        let mut bg = self
            .beta
            .grad_mut()
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        bg += &dbeta;

        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random(rng: &mut ChaCha20Rng, n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut bn = BatchNorm::<f64>::new("bn", 4);
        let x = random(&mut rng, 200, 4);
        let (y, _) = bn.forward_train(&x).unwrap();
        for c in 0..4 {
            let col = y.column(c);
            let mean = col.sum() / 200.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "eps makes var slightly below 1");
        }
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        let x = random(&mut rng, 50, 2);
        let n = 50.0;
        let mean0 = x.column(0).sum() / n;
        let var0 = x.column(0).iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / n;
        let unbiased0 = var0 * n / (n - 1.0);
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean()[0] - 0.1 * mean0).abs() < 1e-12);
        assert!((bn.running_var()[0] - (0.9 + 0.1 * unbiased0)).abs() < 1e-12);
    }

    #[test]
    fn single_row_batch_uses_biased_variance() {
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        let x = array![[3.0, -1.0]];
        let (y, _) = bn.forward_train(&x).unwrap();
        // One row: x == mean, so the normalized value is zero and y == beta.
        assert_eq!(y, array![[0.0, 0.0]]);
        assert!((bn.running_var()[0] - 0.9).abs() < 1e-12);
        assert!((bn.running_mean()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_stays_finite() {
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let x = Array2::from_elem((10, 1), 5.0);
        let (y, cache) = bn.forward_train(&x).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let g = Array2::from_elem((10, 1), 1.0);
        let dx = bn.backward(&cache, &g).unwrap();
        assert!(dx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        for _ in 0..5 {
            bn.forward_train(&random(&mut rng, 64, 3)).unwrap();
        }
        let x = random(&mut rng, 16, 3);
        let y = bn.forward_eval(&x).unwrap();
        for c in 0..3 {
            let invstd = 1.0 / (bn.running_var()[c] + 1e-5).sqrt();
            for r in 0..16 {
                let expected = (x[[r, c]] - bn.running_mean()[c]) * invstd;
                assert!((y[[r, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        // Give gamma/beta non-trivial values.
        bn.gamma.data_mut().as_slice_mut().unwrap().copy_from_slice(&[1.3, 0.7]);
        bn.beta.data_mut().as_slice_mut().unwrap().copy_from_slice(&[0.2, -0.4]);
        let x = random(&mut rng, 24, 2);
        let g = random(&mut rng, 24, 2);

        let (_, cache) = bn.forward_train(&x).unwrap();
        let dx = bn.backward(&cache, &g).unwrap();
        let dgamma = bn.gamma.grad().clone();
        let dbeta = bn.beta.grad().clone();

        let loss = |bn: &mut BatchNorm<f64>, x: &Array2<f64>| {
            let (y, _) = bn.forward_train(x).unwrap();
            (&y * &g).sum()
        };
        let h = 1e-6;

        for (r, c) in [(0usize, 0usize), (5, 1), (23, 0)] {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let up = loss(&mut bn, &xp);
            xp[[r, c]] -= 2.0 * h;
            let down = loss(&mut bn, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx[[r, c]]).abs() / fd.abs().max(1e-8) < 1e-5,
                "dx[{r},{c}]: fd {fd} analytic {}",
                dx[[r, c]]
            );
        }
        for c in 0..2 {
            let orig = bn.gamma.data().as_slice().unwrap()[c];
            bn.gamma.data_mut().as_slice_mut().unwrap()[c] = orig + h;
            let up = loss(&mut bn, &x);
            bn.gamma.data_mut().as_slice_mut().unwrap()[c] = orig - h;
            let down = loss(&mut bn, &x);
            bn.gamma.data_mut().as_slice_mut().unwrap()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = dgamma.as_slice().unwrap()[c];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-5);

            let orig = bn.beta.data().as_slice().unwrap()[c];
            bn.beta.data_mut().as_slice_mut().unwrap()[c] = orig + h;
            let up = loss(&mut bn, &x);
            bn.beta.data_mut().as_slice_mut().unwrap()[c] = orig - h;
            let down = loss(&mut bn, &x);
            bn.beta.data_mut().as_slice_mut().unwrap()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = dbeta.as_slice().unwrap()[c];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-5);
        }
    }

    /// Train-mode batch norm is invariant to per-channel shifts and (with
    /// eps = 0) to scaling of its input, so the input gradient must be
    /// orthogonal to both directions.
    #[test]
    fn input_gradient_orthogonal_to_invariant_directions() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        bn.eps = 0.0;
        let x = random(&mut rng, 40, 3);
        let g = random(&mut rng, 40, 3);
        let (_, cache) = bn.forward_train(&x).unwrap();
        let dx = bn.backward(&cache, &g).unwrap();

        let scale_dir: f64 = (&dx * &x).sum();
        assert!(scale_dir.abs() < 1e-10, "scale direction {scale_dir}");
        for c in 0..3 {
            let shift_dir: f64 = dx.column(c).sum();
            assert!(shift_dir.abs() < 1e-10, "shift direction ch {c}: {shift_dir}");
        }
    }
}
