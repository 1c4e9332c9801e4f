//! Optimization, scheduling, metrics, checkpointing, and the training loops.

mod checkpoint;
pub mod config;
mod metrics;
mod run;

pub use checkpoint::{checkpoint_load, checkpoint_peek, checkpoint_save, Checkpoint, Header, RngState};
pub use config::{DataSection, ModelSection, RunConfig, TrainSection};
pub use metrics::{class_names, evaluate, ConfusionMatrix, EvalResult, SCANNET20_CLASSES};
pub use run::{EpochRecord, TrainOptions, Trainer};

use ndarray::ArrayD;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Parameter;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("divergence detected: non-finite gradient in {0}")]
    Divergence(String),
    #[error("bad optimizer config: {0}")]
    BadOptimConfig(String),
    #[error("{path}: checkpoint corrupt at byte {offset}: {msg}")]
    CorruptCheckpoint {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("{path}: checkpoint version {got} is not supported (expected {expected})")]
    CheckpointVersion {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("checkpoint architecture {ckpt:?} does not match network {net:?}")]
    ArchMismatch { ckpt: String, net: String },
    #[error("checkpoint dtype {ckpt:?} does not match requested {requested:?}")]
    DtypeMismatch {
        ckpt: crate::scalar::Dtype,
        requested: crate::scalar::Dtype,
    },
    #[error("dataset has no {0} scenes")]
    EmptySplit(&'static str),
    #[error("dataset has {dataset} classes but the network outputs {net}")]
    ClassCount { dataset: usize, net: usize },
    #[error("teacher outputs {teacher} classes but the student outputs {student}")]
    TeacherClassCount { teacher: usize, student: usize },
    #[error("bad run config: {0}")]
    BadRunConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Sparse(#[from] crate::sparse::SparseError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    /// Base learning rate; decayed by [`step_lr`].
    pub lr: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// Adam moment coefficients.
    pub betas: [f64; 2],
    /// Decoupled L2 weight decay.
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    pub step_size: usize,
    /// Multiplicative decay per drop.
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::SgdMomentum,
            lr: 0.1,
            momentum: 0.9,
            betas: [0.9, 0.999],
            weight_decay: 1e-4,
            step_size: 100,
            gamma: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadOptimConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("betas must lie in [0, 1), got {b}"));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Stepped learning-rate schedule: `lr0 · gamma^floor(epoch / step_size)`.
pub fn step_lr(lr0: f64, gamma: f64, step_size: usize, epoch: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_size) as i32)
}

/// First-order optimizer with per-parameter state, keyed by parameter name.
/// Weight decay is decoupled: applied directly to the weights, not mixed
/// into the gradient moments.
#[derive(Debug, Clone)]
pub struct Optimizer<F: Scalar> {
    cfg: OptimConfig,
    /// SGD momentum buffers.
    velocity: FxHashMap<String, ArrayD<F>>,
    /// Adam first and second moments.
    moment1: FxHashMap<String, ArrayD<F>>,
    moment2: FxHashMap<String, ArrayD<F>>,
    /// Adam step count (shared across parameters).
    t: u64,
}

const ADAM_EPS: f64 = 1e-8;

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Default::default(),
            moment1: Default::default(),
            moment2: Default::default(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Applies one update at learning rate `lr` to every trainable
    /// parameter. Gradients are validated first: any non-finite entry
    /// aborts the step naming the offending tensor.
    pub fn step(&mut self, params: &mut [&mut Parameter<F>], lr: f64) -> Result<(), TrainError> {
        for p in params.iter().filter(|p| p.trainable()) {
            if !p.grad().iter().all(|g| g.is_finite()) {
                return Err(TrainError::Divergence(p.name().to_string()));
            }
        }

        let lr_f = F::from_f64(lr);
        let wd = F::from_f64(lr * self.cfg.weight_decay);
        if self.cfg.kind == OptimKind::Adam {
            self.t += 1;
        }
        for p in params.iter_mut().filter(|p| p.trainable()) {
            let name = p.name().to_string();
            let (data, grad) = p.data_mut_and_grad();
            if self.cfg.weight_decay != 0.0 {
                ndarray::Zip::from(&mut *data).for_each(|d| *d -= wd * *d);
            }
            match self.cfg.kind {
                OptimKind::SgdMomentum => {
                    let momentum = F::from_f64(self.cfg.momentum);
                    let buf = self
                        .velocity
                        .entry(name)
                        .or_insert_with(|| ArrayD::zeros(grad.shape()));
                    ndarray::Zip::from(&mut *buf).and(&*grad).for_each(|v, &g| {
                        *v = momentum * *v + g;
                    });
                    ndarray::Zip::from(data).and(&*buf).for_each(|d, &v| {
                        *d -= lr_f * v;
                    });
                }
                OptimKind::Adam => {
                    let [b1, b2] = self.cfg.betas.map(F::from_f64);
                    let one = F::from_f64(1.0);
                    let bias1 = F::from_f64(1.0 - self.cfg.betas[0].powi(self.t as i32));
                    let bias2 = F::from_f64(1.0 - self.cfg.betas[1].powi(self.t as i32));
                    let eps = F::from_f64(ADAM_EPS);
                    let m = self
                        .moment1
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(grad.shape()));
                    let v = self
                        .moment2
                        .entry(name)
                        .or_insert_with(|| ArrayD::zeros(grad.shape()));
                    ndarray::Zip::from(&mut *m).and(&*grad).for_each(|m, &g| {
                        *m = b1 * *m + (one - b1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(&*grad).for_each(|v, &g| {
                        *v = b2 * *v + (one - b2) * g * g;
                    });
                    ndarray::Zip::from(data)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|d, &m, &v| {
                            *d -= lr_f * (m / bias1) / ((v / bias2).sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    /// Named state buffers in sorted order, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Vec<F>, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, table) in [
            ("optim.velocity", &self.velocity),
            ("optim.m1", &self.moment1),
            ("optim.m2", &self.moment2),
        ] {
            let mut names: Vec<&String> = table.keys().collect();
            names.sort();
            for name in names {
                let arr = &table[name];
                out.push((
                    format!("{prefix}.{name}"),
                    arr.iter().copied().collect(),
                    arr.shape().to_vec(),
                ));
            }
        }
        out
    }

    /// Restores state buffers from checkpoint tensors (the inverse of
    /// [`Optimizer::state_tensors`]). Unrelated tensors are ignored.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Vec<F>, Vec<usize>)]) {
        for (name, values, shape) in tensors {
            let table = if let Some(rest) = name.strip_prefix("optim.velocity.") {
                Some((&mut self.velocity, rest))
            } else if let Some(rest) = name.strip_prefix("optim.m1.") {
                Some((&mut self.moment1, rest))
            } else {
                name.strip_prefix("optim.m2.").map(|rest| (&mut self.moment2, rest))
            };
            if let Some((table, param)) = table {
                let arr = ArrayD::from_shape_vec(shape.clone(), values.clone())
                    .expect("checkpoint reader validated shapes");
                table.insert(param.to_string(), arr);
            }
        }
    }
}
