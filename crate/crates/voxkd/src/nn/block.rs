//! The residual unit the encoder/decoder levels are built from.
//!
//! Two 3x3x3 convolutions (no bias, each followed by batch norm) with a ReLU
//! between them, plus a skip connection added before the final ReLU. When the
//! channel count changes the skip takes a 1x1x1 convolution and batch norm;
//! otherwise it is the identity.

use ndarray::Array2;
use rand::Rng;

use super::{relu, relu_backward, residual_add, BatchNorm, BnCache, NnError, Parameter, SparseConv};
use crate::scalar::Scalar;
use crate::sparse::KernelMap;

#[derive(Debug, Clone)]
struct BlockCache<F: Scalar> {
    x: Array2<F>,
    bn1: BnCache<F>,
    r1: Array2<F>,
    bn2: BnCache<F>,
    bn_sc: Option<BnCache<F>>,
    y: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<F: Scalar> {
    conv1: SparseConv<F>,
    bn1: BatchNorm<F>,
    conv2: SparseConv<F>,
    bn2: BatchNorm<F>,
    shortcut: Option<(SparseConv<F>, BatchNorm<F>)>,
    cache: Option<BlockCache<F>>,
}

impl<F: Scalar> ResidualBlock<F> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let conv1 = SparseConv::new(&format!("{name}.conv1"), in_channels, out_channels, 27, false, rng);
        let bn1 = BatchNorm::new(&format!("{name}.bn1"), out_channels);
        let conv2 = SparseConv::new(&format!("{name}.conv2"), out_channels, out_channels, 27, false, rng);
        let bn2 = BatchNorm::new(&format!("{name}.bn2"), out_channels);
        let shortcut = (in_channels != out_channels).then(|| {
            (
                SparseConv::new(&format!("{name}.shortcut.conv"), in_channels, out_channels, 1, false, rng),
                BatchNorm::new(&format!("{name}.shortcut.bn"), out_channels),
            )
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            cache: None,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.conv1.params(out);
        self.bn1.params(out);
        self.conv2.params(out);
        self.bn2.params(out);
        if let Some((c, b)) = &self.shortcut {
            c.params(out);
            b.params(out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.conv1.params_mut(out);
        self.bn1.params_mut(out);
        self.conv2.params_mut(out);
        self.bn2.params_mut(out);
        if let Some((c, b)) = &mut self.shortcut {
            c.params_mut(out);
            b.params_mut(out);
        }
    }

    pub fn state(&self, out: &mut Vec<(String, Vec<F>, Vec<usize>)>) {
        self.bn1.state(out);
        self.bn2.state(out);
        if let Some((_, b)) = &self.shortcut {
            b.state(out);
        }
    }

    pub fn bn_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, b)) = &mut self.shortcut {
            v.push(b);
        }
        v
    }

    /// `km3` is the 3x3x3 stride-1 map at this block's level; `km1` the 1x1x1
    /// identity map, required only when the block projects its shortcut.
    pub fn forward_train(
        &mut self,
        x: &Array2<F>,
        km3: &KernelMap,
        km1: Option<&KernelMap>,
    ) -> Result<Array2<F>, NnError> {
        let z1 = self.conv1.forward(x, km3)?;
        let (b1, bn1_cache) = self.bn1.forward_train(&z1)?;
        let r1 = relu(&b1);
        let z2 = self.conv2.forward(&r1, km3)?;
        let (b2, bn2_cache) = self.bn2.forward_train(&z2)?;

        let (skip, bn_sc_cache) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let km1 = km1.ok_or(NnError::MissingCache)?;
                let s = conv.forward(x, km1)?;
                let (s, c) = bn.forward_train(&s)?;
                (s, Some(c))
            }
            None => (x.clone(), None),
        };

        let y = relu(&residual_add(&b2, &skip)?);
        self.cache = Some(BlockCache {
            x: x.clone(),
            bn1: bn1_cache,
            r1,
            bn2: bn2_cache,
            bn_sc: bn_sc_cache,
            y: y.clone(),
        });
        Ok(y)
    }

    pub fn forward_eval(
        &self,
        x: &Array2<F>,
        km3: &KernelMap,
        km1: Option<&KernelMap>,
    ) -> Result<Array2<F>, NnError> {
        let z1 = self.conv1.forward(x, km3)?;
        let r1 = relu(&self.bn1.forward_eval(&z1)?);
        let b2 = self.bn2.forward_eval(&self.conv2.forward(&r1, km3)?)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let km1 = km1.ok_or(NnError::MissingCache)?;
                bn.forward_eval(&conv.forward(x, km1)?)?
            }
            None => x.clone(),
        };
        Ok(relu(&residual_add(&b2, &skip)?))
    }

    /// Consumes the cache of the last `forward_train`.
    pub fn backward(
        &mut self,
        grad_out: &Array2<F>,
        km3: &KernelMap,
        km1: Option<&KernelMap>,
    ) -> Result<Array2<F>, NnError> {
        let cache = self.cache.take().ok_or(NnError::MissingCache)?;
        let g_sum = relu_backward(&cache.y, grad_out);

        // Main path.
        let g_b2 = self.bn2.backward(&cache.bn2, &g_sum)?;
        let g_r1 = self.conv2.backward(&cache.r1, &g_b2, km3)?;
        let g_b1 = relu_backward(&cache.r1, &g_r1);
        let g_z1 = self.bn1.backward(&cache.bn1, &g_b1)?;
        let g_main = self.conv1.backward(&cache.x, &g_z1, km3)?;

        // Skip path.
        let g_skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let km1 = km1.ok_or(NnError::MissingCache)?;
                let c = cache.bn_sc.as_ref().expect("projection cache saved in forward");
                let g = bn.backward(c, &g_sum)?;
                conv.backward(&cache.x, &g, km1)?
            }
            None => g_sum,
        };

        residual_add(&g_main, &g_skip)
    }
}
