//! Knowledge distillation losses.
//!
//! A frozen teacher network and a trainable student see the same voxelized
//! scene (and therefore share coordinate maps at every stride). The student
//! is trained against a blend of objectives:
//!
//! * **Supervised cross-entropy** against ground-truth labels.
//! * **Softened KL** between teacher and student logits at a temperature.
//! * **Feature-map MSE** at the encoder bottleneck and the final decoder
//!   stage, through trainable 1×1×1 projections that reconcile channel
//!   widths.
//!
//! The blend is `α·CE + (1−α)·KL + λ_dec·FM_dec + λ_enc·FM_enc`. Every term
//! reports its raw value separately so training logs can track each one.
//! The teacher participates only through its (constant) outputs: no code
//! path hands a gradient back to it.

mod fm;
mod losses;

pub use fm::{feature_map_loss, ProjectionLayer};
pub use losses::{ban_loss, ce_loss, kd_kl_loss, row_softmax};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{TapGrads, TappedOutput};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("no supervised points")]
    NoSupervisedPoints,
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u32, classes: usize },
    #[error("{rows} logit rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("lambda weights must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("student logits are {student:?} but teacher logits are {teacher:?}")]
    LogitShape {
        student: (usize, usize),
        teacher: (usize, usize),
    },
    #[error(
        "tap alignment failure: student tap has {student_sites} sites at stride \
         {student_stride}, teacher tap has {teacher_sites} sites at stride {teacher_stride}"
    )]
    TapAlignment {
        student_sites: usize,
        student_stride: i32,
        teacher_sites: usize,
        teacher_stride: i32,
    },
    #[error("{side} tap has {got} channels, projection expects {expected}")]
    TapWidth {
        side: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature-map weight is nonzero but no {0} projection was supplied")]
    MissingProjection(&'static str),
    #[error("checkpoint is missing tensor {0:?}")]
    TensorMissing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Hyperparameters of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of supervised cross-entropy; `1 − alpha` weights the KL term.
    pub alpha: f64,
    /// Softening temperature applied inside the KL term.
    pub temperature: f64,
    /// Weight of the decoder feature-map loss (final decoder stage, stride 1).
    pub lambda_dec: f64,
    /// Weight of the encoder feature-map loss (bottleneck, stride 16).
    pub lambda_enc: f64,
    /// Rescale the KL gradient by T² so its magnitude stays comparable to
    /// cross-entropy as the temperature grows.
    pub t2_scaling: bool,
    /// Apply a channel softmax to the student tap before projecting it.
    pub fm_softmax: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
            lambda_dec: 0.0,
            lambda_enc: 0.0,
            t2_scaling: true,
            fm_softmax: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(DistillError::BadAlpha(self.alpha));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(DistillError::BadTemperature(self.temperature));
        }
        for lambda in [self.lambda_dec, self.lambda_enc] {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(DistillError::BadLambda(lambda));
            }
        }
        Ok(())
    }

    /// With `alpha = 1` and both feature weights zero, the objective is
    /// plain supervised cross-entropy: the training loop skips the teacher
    /// and the projections entirely, so the run is bit-identical to one that
    /// never constructed them.
    pub fn is_pure_supervised(&self) -> bool {
        self.alpha == 1.0 && self.lambda_dec == 0.0 && self.lambda_enc == 0.0
    }
}

/// Raw per-term values of one distillation evaluation, before λ-weighting
/// except in `total`. All values are f64 for logging regardless of the
/// training dtype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `α·ce + (1−α)·kl + λ_dec·fm_dec + λ_enc·fm_enc`.
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    /// The logit-level blend `α·ce + (1−α)·kl`.
    pub ban: f64,
    pub fm_dec: f64,
    pub fm_enc: f64,
}

/// Evaluates the full objective and returns per-term values together with
/// the gradients to inject at the student's taps. Projection parameter
/// gradients are accumulated in place; the teacher is untouched.
pub fn total_distill_loss<F: Scalar>(
    student: &TappedOutput<F>,
    teacher: &TappedOutput<F>,
    labels: &[u32],
    ignore_label: u32,
    cfg: &DistillConfig,
    mut proj_dec: Option<&mut ProjectionLayer<F>>,
    mut proj_enc: Option<&mut ProjectionLayer<F>>,
) -> Result<(LossBreakdown, TapGrads<F>), DistillError> {
    cfg.validate()?;
    let (_, ce, kl, g_logits) = ban_loss(
        &student.logits.features,
        &teacher.logits.features,
        labels,
        ignore_label,
        cfg.alpha,
        cfg.temperature,
        cfg.t2_scaling,
    )?;

    let fm_term = |lambda: f64,
                       side: &'static str,
                       s_tap: &crate::sparse::SparseTensor<F>,
                       t_tap: &crate::sparse::SparseTensor<F>,
                       proj: Option<&mut ProjectionLayer<F>>|
     -> Result<(f64, Option<Array2<F>>), DistillError> {
        if lambda == 0.0 {
            return Ok((0.0, None));
        }
        let proj = proj.ok_or(DistillError::MissingProjection(side))?;
        let (loss, grad) = feature_map_loss(s_tap, t_tap, proj, cfg.fm_softmax)?;
        let w = F::from_f64(lambda);
        Ok((loss.to_f64(), Some(grad.mapv(|g| g * w))))
    };

    let (fm_dec, g_dec) = fm_term(
        cfg.lambda_dec,
        "decoder",
        &student.decoder_tap,
        &teacher.decoder_tap,
        proj_dec.as_deref_mut(),
    )?;
    let (fm_enc, g_enc) = fm_term(
        cfg.lambda_enc,
        "encoder",
        &student.encoder_tap,
        &teacher.encoder_tap,
        proj_enc.as_deref_mut(),
    )?;

    let ce = ce.to_f64();
    let kl = kl.to_f64();
    let ban = cfg.alpha * ce + (1.0 - cfg.alpha) * kl;
    let breakdown = LossBreakdown {
        total: ban + cfg.lambda_dec * fm_dec + cfg.lambda_enc * fm_enc,
        ce,
        kl,
        ban,
        fm_dec,
        fm_enc,
    };
    let grads = TapGrads {
        logits: g_logits,
        encoder: g_enc,
        decoder: g_dec,
    };
    Ok((breakdown, grads))
}
