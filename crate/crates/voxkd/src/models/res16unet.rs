//! The Res16UNet network: stem, four strided encoder levels, four transposed
//! decoder levels with concatenated skips, and a 1x1 classifier.
//!
//! The forward pass optionally records every intermediate its hand-written
//! backward needs; `backward` then walks the graph in reverse, accumulating
//! parameter gradients and accepting injected gradients at the two
//! distillation tap points (encoder bottleneck and final decoder output).

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rustc_hash::FxHashMap;

use super::{ArchSpec, CoordinatePlan, ModelError, ParamCount};
use crate::nn::{relu, relu_backward, BatchNorm, BnCache, NnError, Parameter, ResidualBlock, SparseConv};
use crate::scalar::Scalar;
use crate::sparse::SparseTensor;

/// Logits plus the two feature maps distillation losses attach to.
#[derive(Debug, Clone)]
pub struct TappedOutput<F: Scalar> {
    /// N x num_classes at stride 1, on the input coordinate map.
    pub logits: SparseTensor<F>,
    /// Bottleneck features: N_16 x planes[3] at stride 16.
    pub encoder_tap: SparseTensor<F>,
    /// Final decoder features: N x planes[7] at stride 1.
    pub decoder_tap: SparseTensor<F>,
}

/// Gradients injected at the network outputs for one backward pass.
#[derive(Debug, Clone)]
pub struct TapGrads<F: Scalar> {
    pub logits: Array2<F>,
    pub encoder: Option<Array2<F>>,
    pub decoder: Option<Array2<F>>,
}

#[derive(Debug, Clone)]
struct EncoderLevel<F: Scalar> {
    down: SparseConv<F>,
    bn: BatchNorm<F>,
    blocks: Vec<ResidualBlock<F>>,
}

#[derive(Debug, Clone)]
struct DecoderLevel<F: Scalar> {
    up: SparseConv<F>,
    bn: BatchNorm<F>,
    blocks: Vec<ResidualBlock<F>>,
}

#[derive(Debug, Clone)]
struct NetCache<F: Scalar> {
    input: Array2<F>,
    stem_bn: BnCache<F>,
    r0: Array2<F>,
    enc_down_bn: Vec<BnCache<F>>,
    enc_down_relu: Vec<Array2<F>>,
    enc_out: Vec<Array2<F>>,
    dec_in: Vec<Array2<F>>,
    dec_bn: Vec<BnCache<F>>,
    dec_relu: Vec<Array2<F>>,
    dec_out: Vec<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct Res16UNet<F: Scalar> {
    spec: ArchSpec,
    stem_conv: SparseConv<F>,
    stem_bn: BatchNorm<F>,
    enc: Vec<EncoderLevel<F>>,
    dec: Vec<DecoderLevel<F>>,
    classifier: SparseConv<F>,
    cache: Option<NetCache<F>>,
}

impl<F: Scalar> Res16UNet<F> {
    pub fn new(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if spec.dims != 3 {
            return Err(ModelError::UnsupportedDims(spec.dims));
        }
        let p = &spec.planes;

        let stem_conv = SparseConv::new("stem.conv", spec.in_channels, spec.init_dim, 27, false, rng);
        let stem_bn = BatchNorm::new("stem.bn", spec.init_dim);

        let mut enc = Vec::with_capacity(4);
        let mut ch = spec.init_dim;
        for (i, (&width, &repeats)) in p[..4].iter().zip(&spec.block_counts[..4]).enumerate() {
            let name = format!("enc{i}");
            let down = SparseConv::new(&format!("{name}.down"), ch, ch, 8, false, rng);
            let bn = BatchNorm::new(&format!("{name}.bn"), ch);
            let mut blocks = Vec::with_capacity(repeats);
            for b in 0..repeats {
                let in_ch = if b == 0 { ch } else { width };
                blocks.push(ResidualBlock::new(&format!("{name}.block{b}"), in_ch, width, rng));
            }
            ch = width;
            enc.push(EncoderLevel { down, bn, blocks });
        }

        // Skip sources, deepest first: e3, e2, e1, stem output.
        let skip_ch = [p[2], p[1], p[0], spec.init_dim];
        let mut dec = Vec::with_capacity(4);
        for (j, (&width, &repeats)) in p[4..].iter().zip(&spec.block_counts[4..]).enumerate() {
            let name = format!("dec{j}");
            let up = SparseConv::new(&format!("{name}.up"), ch, width, 8, false, rng);
            let bn = BatchNorm::new(&format!("{name}.bn"), width);
            let mut blocks = Vec::with_capacity(repeats);
            for b in 0..repeats {
                let in_ch = if b == 0 { width + skip_ch[j] } else { width };
                blocks.push(ResidualBlock::new(&format!("{name}.block{b}"), in_ch, width, rng));
            }
            ch = width;
            dec.push(DecoderLevel { up, bn, blocks });
        }

        let classifier = SparseConv::new("classifier", p[7], spec.num_classes, 1, true, rng);

        Ok(Res16UNet {
            spec: spec.clone(),
            stem_conv,
            stem_bn,
            enc,
            dec,
            classifier,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<F>>) {
        self.stem_conv.params(out);
        self.stem_bn.params(out);
        for level in &self.enc {
            level.down.params(out);
            level.bn.params(out);
            for b in &level.blocks {
                b.params(out);
            }
        }
        for level in &self.dec {
            level.up.params(out);
            level.bn.params(out);
            for b in &level.blocks {
                b.params(out);
            }
        }
        self.classifier.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<F>>) {
        self.stem_conv.params_mut(out);
        self.stem_bn.params_mut(out);
        for level in &mut self.enc {
            level.down.params_mut(out);
            level.bn.params_mut(out);
            for b in &mut level.blocks {
                b.params_mut(out);
            }
        }
        for level in &mut self.dec {
            level.up.params_mut(out);
            level.bn.params_mut(out);
            for b in &mut level.blocks {
                b.params_mut(out);
            }
        }
        self.classifier.params_mut(out);
    }

    fn state(&self, out: &mut Vec<(String, Vec<F>, Vec<usize>)>) {
        self.stem_bn.state(out);
        for level in &self.enc {
            level.bn.state(out);
            for b in &level.blocks {
                b.state(out);
            }
        }
        for level in &self.dec {
            level.bn.state(out);
            for b in &level.blocks {
                b.state(out);
            }
        }
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm<F>> {
        let mut v = vec![&mut self.stem_bn];
        for level in &mut self.enc {
            v.push(&mut level.bn);
            for b in &mut level.blocks {
                v.extend(b.bn_mut());
            }
        }
        for level in &mut self.dec {
            v.push(&mut level.bn);
            for b in &mut level.blocks {
                v.extend(b.bn_mut());
            }
        }
        v
    }

    /// Trainable counts the optimizer's view; total additionally includes
    /// batch-norm running statistics.
    pub fn param_count(&self) -> ParamCount {
        let mut params = Vec::new();
        self.params(&mut params);
        let trainable = params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.numel())
            .sum();
        let mut all: usize = params.iter().map(|p| p.numel()).sum();
        let mut state = Vec::new();
        self.state(&mut state);
        all += state.iter().map(|(_, v, _)| v.len()).sum::<usize>();
        ParamCount {
            trainable,
            total: all,
        }
    }

    pub fn zero_grad(&mut self) {
        let mut params = Vec::new();
        self.params_mut(&mut params);
        for p in params {
            p.zero_grad();
        }
    }

    /// Marks every parameter (non-)trainable, e.g. to freeze a teacher.
    pub fn set_trainable(&mut self, trainable: bool) {
        let mut params = Vec::new();
        self.params_mut(&mut params);
        for p in params {
            p.set_trainable(trainable);
        }
    }

    /// All tensors that define the network's state, in a fixed walk order:
    /// parameters first, then batch-norm running statistics.
    pub fn export_tensors(&self) -> Vec<(String, Vec<F>, Vec<usize>)> {
        let mut params = Vec::new();
        self.params(&mut params);
        let mut out: Vec<(String, Vec<F>, Vec<usize>)> = params
            .iter()
            .map(|p| {
                (
                    p.name().to_string(),
                    p.data().iter().copied().collect(),
                    p.data().shape().to_vec(),
                )
            })
            .collect();
        self.state(&mut out);
        out
    }

    /// Restores state exported by [`Self::export_tensors`]. Every tensor the
    /// network owns must be present with a matching shape.
    pub fn import_tensors(
        &mut self,
        tensors: &FxHashMap<String, (Vec<F>, Vec<usize>)>,
    ) -> Result<(), ModelError> {
        {
            let mut params = Vec::new();
            self.params_mut(&mut params);
            for p in params {
                let (data, shape) = tensors
                    .get(p.name())
                    .ok_or_else(|| ModelError::TensorMissing(p.name().to_string()))?;
                if shape.as_slice() != p.data().shape() {
                    return Err(ModelError::TensorShape {
                        name: p.name().to_string(),
                        expected: p.data().shape().to_vec(),
                        got: shape.clone(),
                    });
                }
                let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data.clone())
                    .expect("shape checked above");
                p.set_data(arr);
            }
        }
        for bn in self.bns_mut() {
            let name = bn.name().to_string();
            let mean_key = format!("{name}.running_mean");
            let var_key = format!("{name}.running_var");
            let (mean, mshape) = tensors
                .get(&mean_key)
                .ok_or_else(|| ModelError::TensorMissing(mean_key.clone()))?;
            let (var, vshape) = tensors
                .get(&var_key)
                .ok_or_else(|| ModelError::TensorMissing(var_key.clone()))?;
            if mshape.as_slice() != [bn.channels()] || vshape.as_slice() != [bn.channels()] {
                return Err(ModelError::TensorShape {
                    name: mean_key,
                    expected: vec![bn.channels()],
                    got: mshape.clone(),
                });
            }
            bn.load_state(mean, var);
        }
        Ok(())
    }

    fn check_input(&self, x: &SparseTensor<F>, plan: &CoordinatePlan) -> Result<(), ModelError> {
        if x.num_channels() != self.spec.in_channels {
            return Err(ModelError::InputWidth {
                expected: self.spec.in_channels,
                got: x.num_channels(),
            });
        }
        let same_map = std::sync::Arc::ptr_eq(&x.cmap, plan.map(0))
            || x.cmap.entries() == plan.map(0).entries();
        if x.stride != 1 || !same_map {
            return Err(ModelError::PlanMismatch);
        }
        Ok(())
    }

    /// Forward pass. With `training` the pass uses batch statistics, updates
    /// running estimates, and records the cache [`Self::backward`] consumes;
    /// without, it uses running statistics and stores nothing.
    pub fn forward_tapped(
        &mut self,
        x: &SparseTensor<F>,
        plan: &CoordinatePlan,
        training: bool,
    ) -> Result<TappedOutput<F>, ModelError> {
        self.check_input(x, plan)?;
        if training {
            self.forward_train(x, plan)
        } else {
            self.forward_eval(x, plan)
        }
    }

    fn forward_train(
        &mut self,
        x: &SparseTensor<F>,
        plan: &CoordinatePlan,
    ) -> Result<TappedOutput<F>, ModelError> {
        let input = x.features.clone();
        let z = self.stem_conv.forward(&input, plan.km3(0))?;
        let (b, stem_bn) = self.stem_bn.forward_train(&z)?;
        let r0 = relu(&b);

        let mut enc_down_bn = Vec::with_capacity(4);
        let mut enc_down_relu = Vec::with_capacity(4);
        let mut enc_out = Vec::with_capacity(4);
        let mut cur = r0.clone();
        for (i, level) in self.enc.iter_mut().enumerate() {
            let z = level.down.forward(&cur, plan.down(i))?;
            let (b, bnc) = level.bn.forward_train(&z)?;
            let r = relu(&b);
            enc_down_bn.push(bnc);
            enc_down_relu.push(r.clone());
            let mut h = r;
            for blk in &mut level.blocks {
                h = blk.forward_train(&h, plan.km3(i + 1), Some(plan.km1(i + 1)))?;
            }
            enc_out.push(h.clone());
            cur = h;
        }

        let mut dec_in = Vec::with_capacity(4);
        let mut dec_bn = Vec::with_capacity(4);
        let mut dec_relu = Vec::with_capacity(4);
        let mut dec_out = Vec::with_capacity(4);
        for (j, level) in self.dec.iter_mut().enumerate() {
            let target = 3 - j; // stride level the up conv lands on
            dec_in.push(cur.clone());
            let z = level.up.forward(&cur, plan.up(target))?;
            let (b, bnc) = level.bn.forward_train(&z)?;
            let r = relu(&b);
            dec_bn.push(bnc);
            dec_relu.push(r.clone());
            let skip = if j == 3 { &r0 } else { &enc_out[2 - j] };
            let mut h = concatenate(Axis(1), &[r.view(), skip.view()]).expect("same row count");
            for blk in &mut level.blocks {
                h = blk.forward_train(&h, plan.km3(target), Some(plan.km1(target)))?;
            }
            dec_out.push(h.clone());
            cur = h;
        }

        let logits = self.classifier.forward(&cur, plan.km1(0))?;
        let out = TappedOutput {
            logits: SparseTensor::from_parts(plan.map(0).clone(), logits, 1),
            encoder_tap: SparseTensor::from_parts(plan.map(4).clone(), enc_out[3].clone(), 16),
            decoder_tap: SparseTensor::from_parts(plan.map(0).clone(), dec_out[3].clone(), 1),
        };
        self.cache = Some(NetCache {
            input,
            stem_bn,
            r0,
            enc_down_bn,
            enc_down_relu,
            enc_out,
            dec_in,
            dec_bn,
            dec_relu,
            dec_out,
        });
        Ok(out)
    }

    fn forward_eval(
        &self,
        x: &SparseTensor<F>,
        plan: &CoordinatePlan,
    ) -> Result<TappedOutput<F>, ModelError> {
        let z = self.stem_conv.forward(&x.features, plan.km3(0))?;
        let r0 = relu(&self.stem_bn.forward_eval(&z)?);

        let mut enc_out = Vec::with_capacity(4);
        let mut cur = r0.clone();
        for (i, level) in self.enc.iter().enumerate() {
            let z = level.down.forward(&cur, plan.down(i))?;
            let mut h = relu(&level.bn.forward_eval(&z)?);
            for blk in &level.blocks {
                h = blk.forward_eval(&h, plan.km3(i + 1), Some(plan.km1(i + 1)))?;
            }
            enc_out.push(h.clone());
            cur = h;
        }

        let mut dec_last = None;
        for (j, level) in self.dec.iter().enumerate() {
            let target = 3 - j;
            let z = level.up.forward(&cur, plan.up(target))?;
            let r = relu(&level.bn.forward_eval(&z)?);
            let skip = if j == 3 { &r0 } else { &enc_out[2 - j] };
            let mut h = concatenate(Axis(1), &[r.view(), skip.view()]).expect("same row count");
            for blk in &level.blocks {
                h = blk.forward_eval(&h, plan.km3(target), Some(plan.km1(target)))?;
            }
            if j == 3 {
                dec_last = Some(h.clone());
            }
            cur = h;
        }

        let logits = self.classifier.forward(&cur, plan.km1(0))?;
        Ok(TappedOutput {
            logits: SparseTensor::from_parts(plan.map(0).clone(), logits, 1),
            encoder_tap: SparseTensor::from_parts(plan.map(4).clone(), enc_out.pop().expect("4 levels"), 16),
            decoder_tap: SparseTensor::from_parts(plan.map(0).clone(), dec_last.expect("4 levels"), 1),
        })
    }

    /// Reverse pass over the cache of the last training forward. Returns the
    /// gradient with respect to the input features.
    pub fn backward(
        &mut self,
        grads: &TapGrads<F>,
        plan: &CoordinatePlan,
    ) -> Result<Array2<F>, ModelError> {
        let cache = self.cache.take().ok_or(NnError::MissingCache)?;

        let mut g = self
            .classifier
            .backward(&cache.dec_out[3], &grads.logits, plan.km1(0))?;
        if let Some(gd) = &grads.decoder {
            g = g + gd;
        }

        // Decoder, deepest-level-last first. Collects the gradient each skip
        // connection sends back to its encoder-side source.
        let mut skip_to_enc: [Option<Array2<F>>; 3] = [None, None, None];
        let mut skip_to_stem: Option<Array2<F>> = None;
        for j in (0..4).rev() {
            let target = 3 - j;
            let level = &mut self.dec[j];
            for blk in level.blocks.iter_mut().rev() {
                g = blk.backward(&g, plan.km3(target), Some(plan.km1(target)))?;
            }
            let up_ch = self.spec.planes[4 + j];
            let g_up = g.slice(s![.., ..up_ch]).to_owned();
            let g_skip = g.slice(s![.., up_ch..]).to_owned();
            if j == 3 {
                skip_to_stem = Some(g_skip);
            } else {
                skip_to_enc[2 - j] = Some(g_skip);
            }
            let g_b = relu_backward(&cache.dec_relu[j], &g_up);
            let g_z = level.bn.backward(&cache.dec_bn[j], &g_b)?;
            g = level.up.backward(&cache.dec_in[j], &g_z, plan.up(target))?;
        }

        if let Some(ge) = &grads.encoder {
            g = g + ge;
        }

        for i in (0..4).rev() {
            let level = &mut self.enc[i];
            for blk in level.blocks.iter_mut().rev() {
                g = blk.backward(&g, plan.km3(i + 1), Some(plan.km1(i + 1)))?;
            }
            let g_b = relu_backward(&cache.enc_down_relu[i], &g);
            let g_z = level.bn.backward(&cache.enc_down_bn[i], &g_b)?;
            let down_in = if i == 0 { &cache.r0 } else { &cache.enc_out[i - 1] };
            g = level.down.backward(down_in, &g_z, plan.down(i))?;
            if i > 0 {
                if let Some(gs) = skip_to_enc[i - 1].take() {
                    g = g + gs;
                }
            }
        }
        if let Some(gs) = skip_to_stem.take() {
            g = g + gs;
        }

        let g_b = relu_backward(&cache.r0, &g);
        let g_z = self.stem_bn.backward(&cache.stem_bn, &g_b)?;
        Ok(self.stem_conv.backward(&cache.input, &g_z, plan.km3(0))?)
    }
}
