//! Logit-level losses: cross-entropy, temperature-softened KL, and their
//! α-blend.

use ndarray::{Array1, Array2, Axis};

use super::DistillError;
use crate::scalar::Scalar;

/// Numerically stable row-wise softmax.
pub fn row_softmax<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-sum-exp, the normalizer of a stable log-softmax.
fn row_logsumexp<F: Scalar>(x: &Array2<F>) -> Array1<F> {
    Array1::from_iter(x.axis_iter(Axis(0)).map(|row| {
        let m = row.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), F::max);
        let sum = row.iter().map(|&v| (v - m).exp()).fold(F::from_f64(0.0), |a, b| a + b);
        m + sum.ln()
    }))
}

/// Mean softmax cross-entropy over rows whose label is not `ignore_label`.
/// The gradient is zero on ignored rows.
pub fn ce_loss<F: Scalar>(
    logits: &Array2<F>,
    labels: &[u32],
    ignore_label: u32,
) -> Result<(F, Array2<F>), DistillError> {
    let (n, k) = (logits.nrows(), logits.ncols());
    if labels.len() != n {
        return Err(DistillError::LabelCount {
            rows: n,
            labels: labels.len(),
        });
    }
    let counted = labels.iter().filter(|&&l| l != ignore_label).count();
    if counted == 0 {
        return Err(DistillError::NoSupervisedPoints);
    }
    for &l in labels {
        if l != ignore_label && l as usize >= k {
            return Err(DistillError::LabelRange { label: l, classes: k });
        }
    }

    let lse = row_logsumexp(logits);
    let inv = F::from_f64(1.0 / counted as f64);
    let mut loss = F::from_f64(0.0);
    let mut grad = Array2::zeros((n, k));
    for (r, &label) in labels.iter().enumerate() {
        if label == ignore_label {
            continue;
        }
        let row = logits.row(r);
        loss += lse[r] - row[label as usize];
        let mut grow = grad.row_mut(r);
        for c in 0..k {
            grow[c] = (row[c] - lse[r]).exp() * inv;
        }
        grow[label as usize] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Row-mean KL(softmax(v/T) || softmax(z/T)) between constant teacher logits
/// `v` and student logits `z`. The gradient with respect to `z` is
/// `(1/(N·T))(softmax(z/T) − softmax(v/T))`, multiplied by `T²` when
/// `t2_scaling` keeps gradient magnitude comparable across temperatures.
pub fn kd_kl_loss<F: Scalar>(
    z: &Array2<F>,
    v: &Array2<F>,
    temperature: f64,
    t2_scaling: bool,
) -> Result<(F, Array2<F>), DistillError> {
    if temperature <= 0.0 {
        return Err(DistillError::BadTemperature(temperature));
    }
    if z.dim() != v.dim() {
        return Err(DistillError::LogitShape {
            student: z.dim(),
            teacher: v.dim(),
        });
    }
    let n = z.nrows();
    let t = F::from_f64(temperature);
    let p_s = row_softmax(&z.mapv(|x| x / t));
    let p_t = row_softmax(&v.mapv(|x| x / t));

    let mut loss = F::from_f64(0.0);
    for r in 0..n {
        for c in 0..z.ncols() {
            let pt = p_t[[r, c]];
            if pt > F::from_f64(0.0) {
                loss += pt * (pt.ln() - p_s[[r, c]].ln());
            }
        }
    }
    let inv_n = F::from_f64(1.0 / n as f64);
    loss *= inv_n;

    let scale = if t2_scaling {
        // (1/T)·T² = T
        t * inv_n
    } else {
        inv_n / t
    };
    let grad = (&p_s - &p_t).mapv(|d| d * scale);
    Ok((loss, grad))
}

/// `α·CE + (1−α)·KL`: supervised labels and softened teacher logits blended
/// into one logit-level objective.
#[allow(clippy::type_complexity)]
pub fn ban_loss<F: Scalar>(
    z: &Array2<F>,
    v: &Array2<F>,
    labels: &[u32],
    ignore_label: u32,
    alpha: f64,
    temperature: f64,
    t2_scaling: bool,
) -> Result<(F, F, F, Array2<F>), DistillError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DistillError::BadAlpha(alpha));
    }
    let (ce, g_ce) = ce_loss(z, labels, ignore_label)?;
    // At alpha = 1 the objective is plain cross-entropy. Skip the KL term
    // instead of scaling it by zero: `x + 0.0 * g` is not always bitwise `x`
    // (it turns -0.0 into +0.0), and the supervised degeneracy is required
    // to match a CE-only run exactly.
    if alpha == 1.0 {
        if z.dim() != v.dim() {
            return Err(DistillError::LogitShape {
                student: z.dim(),
                teacher: v.dim(),
            });
        }
        return Ok((ce, ce, F::from_f64(0.0), g_ce));
    }
    let (kl, g_kl) = kd_kl_loss(z, v, temperature, t2_scaling)?;
    let a = F::from_f64(alpha);
    let b = F::from_f64(1.0 - alpha);
    let total = ce * a + kl * b;
    let grad = g_ce.mapv(|g| g * a) + g_kl.mapv(|g| g * b);
    Ok((total, ce, kl, grad))
}
