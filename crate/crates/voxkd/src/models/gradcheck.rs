//! Finite-difference verification of the hand-written backward pass.
//!
//! The check builds a random sparse input, takes a fixed random linear
//! functional of the network outputs (logits and both taps) as the loss,
//! computes analytic gradients with one backward pass, then probes sampled
//! parameter entries and every input feature with central differences. The
//! whole procedure is a deterministic function of the seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use super::{ArchSpec, CoordinatePlan, ModelError, Res16UNet, TapGrads};
use crate::sparse::{Coordinate, CoordinateMap, SparseTensor};

/// Outcome of the probes that touched one tensor (a parameter, or the
/// network input).
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Total probed entries (parameters + input features).
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest relative error, e.g. `enc0.block1.conv2.weight[14]`.
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
    /// One line per entry over tolerance: name, finite-difference value,
    /// analytic value.
    pub failures: Vec<String>,
    /// Per-tensor rows in network order, the input last.
    pub per_tensor: Vec<TensorCheck>,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} entries checked, max rel err {:.3e} at {} (tolerance {:.1e}) -> {}",
            self.checked,
            self.max_rel_err,
            self.worst,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with a floor so near-zero gradient pairs compare
/// absolutely against `tolerance * floor`.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

/// Central difference with adaptive step. ReLU kinks are dense near
/// parameters that feed eps-floored batch-norm channels (the normalizer
/// amplifies a perturbation by ~1/sqrt(eps)), so a fixed window can straddle
/// a kink no stencil order survives. Shrinking h moves the window off the
/// kink; a genuinely wrong analytic gradient keeps failing at every h
/// because the estimate converges to the true derivative.
fn adaptive_central_diff(
    mut eval: impl FnMut(f64) -> Result<f64, ModelError>,
    orig: f64,
    an: f64,
    tolerance: f64,
) -> Result<(f64, f64), ModelError> {
    let scale = orig.abs().max(1.0);
    let mut best = (f64::INFINITY, f64::NAN);
    for h in [1e-5 * scale, 1e-6 * scale, 1e-7 * scale] {
        let up = eval(orig + h)?;
        let down = eval(orig - h)?;
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(fd, an);
        if e < best.0 {
            best = (e, fd);
        }
        if e < tolerance {
            break;
        }
    }
    Ok(best)
}

pub fn gradcheck(
    spec: &ArchSpec,
    num_sites: usize,
    samples_per_tensor: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Spread sites widely enough that the deepest level keeps several
    // distinct cells: a one- or two-row batch norm at the bottleneck has
    // near-degenerate variance, whose extreme curvature defeats central
    // differences even though the analytic gradient is exact.
    let coords: Vec<Coordinate> = (0..num_sites)
        .map(|i| {
            Coordinate::new(
                (i % 2) as u32,
                [
                    rng.gen_range(0..32),
                    rng.gen_range(0..32),
                    rng.gen_range(0..32),
                ],
            )
        })
        .collect();
    let map = Arc::new(CoordinateMap::build(&coords)?.0);
    let plan = CoordinatePlan::build(map.clone())?;
    let n = map.len();

    let feats = Array2::from_shape_fn((n, spec.in_channels), |_| rng.gen_range(-1.0..1.0));
    let mut net = Res16UNet::<f64>::new(spec, &mut rng)?;
    // Nudge every parameter off its init value. Zero biases and unit gains
    // sit exactly on ReLU kinks (a batch-norm over one site outputs its bias
    // verbatim), where central differences straddle the non-smooth point.
    {
        let mut params = Vec::new();
        net.params_mut(&mut params);
        for p in params {
            for v in p.data_mut().iter_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }

    let n16 = plan.map(4).len();
    let g_logits = Array2::from_shape_fn((n, spec.num_classes), |_| rng.gen_range(-1.0..1.0));
    let g_enc = Array2::from_shape_fn((n16, spec.planes[3]), |_| rng.gen_range(-1.0..1.0));
    let g_dec = Array2::from_shape_fn((n, spec.planes[7]), |_| rng.gen_range(-1.0..1.0));

    let loss = |net: &mut Res16UNet<f64>, feats: &Array2<f64>| -> Result<f64, ModelError> {
        let x = SparseTensor::new(map.clone(), feats.clone(), 1).expect("row count fixed");
        let out = net.forward_tapped(&x, &plan, true)?;
        Ok((&out.logits.features * &g_logits).sum()
            + (&out.encoder_tap.features * &g_enc).sum()
            + (&out.decoder_tap.features * &g_dec).sum())
    };

    // Analytic gradients.
    net.zero_grad();
    loss(&mut net, &feats)?;
    let grad_input = net.backward(
        &TapGrads {
            logits: g_logits.clone(),
            encoder: Some(g_enc.clone()),
            decoder: Some(g_dec.clone()),
        },
        &plan,
    )?;
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut params = Vec::new();
        net.params(&mut params);
        params
            .iter()
            .map(|p| (p.name().to_string(), p.grad().iter().copied().collect()))
            .collect()
    };

    // Probe plan: sampled entries per parameter tensor, then all input
    // features (capped).
    let tensor_sizes: Vec<usize> = analytic.iter().map(|(_, g)| g.len()).collect();
    let mut probes: Vec<(usize, usize)> = Vec::new(); // (tensor index, flat entry)
    for (ti, &len) in tensor_sizes.iter().enumerate() {
        let take = samples_per_tensor.min(len);
        for idx in rand::seq::index::sample(&mut rng, len, take) {
            probes.push((ti, idx));
        }
    }

    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    let mut failures = Vec::new();
    // (entries probed, max rel err) per parameter tensor; input tracked after.
    let mut tensor_stats = vec![(0usize, 0.0f64); analytic.len()];

    for (ti, idx) in probes {
        let orig = {
            let mut params = Vec::new();
            net.params_mut(&mut params);
            params[ti].data().as_slice().unwrap()[idx]
        };
        let an = analytic[ti].1[idx];
        let (e, fd) = {
            let net = &mut net;
            adaptive_central_diff(
                |v| {
                    {
                        let mut params = Vec::new();
                        net.params_mut(&mut params);
                        params[ti].data_mut().as_slice_mut().unwrap()[idx] = v;
                    }
                    loss(net, &feats)
                },
                orig,
                an,
                tolerance,
            )?
        };
        {
            let mut params = Vec::new();
            net.params_mut(&mut params);
            params[ti].data_mut().as_slice_mut().unwrap()[idx] = orig;
        }
        checked += 1;
        tensor_stats[ti].0 += 1;
        tensor_stats[ti].1 = tensor_stats[ti].1.max(e);
        if e >= tolerance {
            failures.push(format!("{}[{idx}]: fd {fd:.9e} analytic {an:.9e}", analytic[ti].0));
        }
        if e > max_rel_err {
            max_rel_err = e;
            worst = format!("{}[{idx}]", analytic[ti].0);
        }
    }

    let mut input_stats = (0usize, 0.0f64);
    let input_numel = n * spec.in_channels;
    let input_probes: Vec<usize> = if input_numel <= 128 {
        (0..input_numel).collect()
    } else {
        rand::seq::index::sample(&mut rng, input_numel, 128).into_vec()
    };
    for flat in input_probes {
        let (r, c) = (flat / spec.in_channels, flat % spec.in_channels);
        let orig = feats[[r, c]];
        let an = grad_input[[r, c]];
        let mut fp = feats.clone();
        let (e, fd) = {
            let net = &mut net;
            adaptive_central_diff(
                |v| {
                    fp[[r, c]] = v;
                    loss(net, &fp)
                },
                orig,
                an,
                tolerance,
            )?
        };
        checked += 1;
        input_stats.0 += 1;
        input_stats.1 = input_stats.1.max(e);
        if e >= tolerance {
            failures.push(format!("input[{r},{c}]: fd {fd:.9e} analytic {an:.9e}"));
        }
        if e > max_rel_err {
            max_rel_err = e;
            worst = format!("input[{r},{c}]");
        }
    }

    let per_tensor = analytic
        .iter()
        .map(|(name, _)| name.clone())
        .zip(tensor_stats)
        .chain(std::iter::once(("input".to_string(), input_stats)))
        .map(|(name, (checked, max_rel_err))| TensorCheck {
            name,
            checked,
            max_rel_err,
            passed: max_rel_err < tolerance,
        })
        .collect();

    Ok(GradcheckReport {
        checked,
        max_rel_err,
        worst,
        tolerance,
        passed: max_rel_err < tolerance,
        failures,
        per_tensor,
    })
}
