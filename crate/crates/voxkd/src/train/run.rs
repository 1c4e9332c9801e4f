//! The training loop: supervised runs, distillation runs, and resumption.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, mix_scenes, voxelize, AugmentConfig, DatasetManifest, PointCloud, VoxelizedScene,
    IGNORE_LABEL,
};
use crate::distill::{ce_loss, total_distill_loss, DistillConfig, LossBreakdown, ProjectionLayer};
use crate::models::{ArchSpec, CoordinatePlan, Res16UNet, TapGrads};
use crate::scalar::Scalar;

use super::{
    checkpoint_load, checkpoint_save, evaluate, Checkpoint, EvalResult, OptimConfig, Optimizer,
    RngState, step_lr, TrainError,
};

/// One line of `history.jsonl`. Field order is the serialization order;
/// there are no timestamps, so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_fm_dec: f64,
    pub train_fm_enc: f64,
    pub val_miou: f64,
    pub val_macc: f64,
}

/// Per-run knobs that are not optimizer or loss hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub voxel_size: f64,
    pub augment: AugmentConfig,
    /// Mix pairs of augmented scenes into one batch by voxel union.
    pub mix3d: bool,
    /// Checkpoint every this many epochs (0 = only at the end of `run`).
    pub save_every: usize,
    /// Where checkpoints and `history.jsonl` go; `None` keeps everything
    /// in memory.
    pub out_dir: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(epochs: usize, voxel_size: f64) -> Self {
        TrainOptions {
            epochs,
            voxel_size,
            augment: AugmentConfig::default(),
            mix3d: false,
            save_every: 0,
            out_dir: None,
        }
    }
}

/// Owns a student network, its optimizer, the run's random stream, and —
/// for distillation — a frozen teacher plus the feature projections.
///
/// One ChaCha20 generator drives every stochastic choice (scene order,
/// augmentations) and is persisted in checkpoints, so an interrupted run
/// resumes the exact sequence an uninterrupted run would have produced.
#[derive(Debug)]
pub struct Trainer<F: Scalar> {
    net: Res16UNet<F>,
    teacher: Option<Res16UNet<F>>,
    proj_dec: Option<ProjectionLayer<F>>,
    proj_enc: Option<ProjectionLayer<F>>,
    distill: DistillConfig,
    optim: Optimizer<F>,
    rng: ChaCha20Rng,
    /// Completed epochs; the next epoch to run.
    epoch: usize,
}

impl<F: Scalar> Trainer<F> {
    /// A plain supervised trainer (used for teachers and CE-only baselines).
    pub fn new_supervised(
        spec: &ArchSpec,
        optim: OptimConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let net = Res16UNet::new(spec, &mut rng)?;
        let distill = DistillConfig {
            alpha: 1.0,
            lambda_dec: 0.0,
            lambda_enc: 0.0,
            ..DistillConfig::default()
        };
        Ok(Trainer {
            net,
            teacher: None,
            proj_dec: None,
            proj_enc: None,
            distill,
            optim: Optimizer::new(optim)?,
            rng,
            epoch: 0,
        })
    }

    /// A distillation trainer. The teacher is frozen on entry and never
    /// receives gradients. Projections are created only for feature terms
    /// with nonzero weight; with `alpha = 1` and both weights zero the
    /// construction consumes exactly the same random stream as
    /// [`Trainer::new_supervised`], which keeps the degeneracy bitwise.
    pub fn new_distill(
        spec: &ArchSpec,
        mut teacher: Res16UNet<F>,
        distill: DistillConfig,
        optim: OptimConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        distill.validate()?;
        if teacher.spec().num_classes != spec.num_classes {
            return Err(TrainError::TeacherClassCount {
                teacher: teacher.spec().num_classes,
                student: spec.num_classes,
            });
        }
        teacher.set_trainable(false);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let net = Res16UNet::new(spec, &mut rng)?;
        let (proj_dec, proj_enc) = if distill.is_pure_supervised() {
            (None, None)
        } else {
            let dec = (distill.lambda_dec > 0.0).then(|| {
                ProjectionLayer::new(
                    "proj_dec",
                    spec.planes[7],
                    teacher.spec().planes[7],
                    &mut rng,
                )
            });
            let enc = (distill.lambda_enc > 0.0).then(|| {
                ProjectionLayer::new(
                    "proj_enc",
                    spec.planes[3],
                    teacher.spec().planes[3],
                    &mut rng,
                )
            });
            (dec, enc)
        };
        let teacher = if distill.is_pure_supervised() { None } else { Some(teacher) };
        Ok(Trainer {
            net,
            teacher,
            proj_dec,
            proj_enc,
            distill,
            optim: Optimizer::new(optim)?,
            rng,
            epoch: 0,
        })
    }

    /// Restores a trainer from a checkpoint. A distillation checkpoint
    /// needs its teacher handed back in; weights, optimizer state, epoch
    /// counter, and the random stream all resume exactly where they were.
    pub fn resume(
        path: impl AsRef<Path>,
        teacher: Option<Res16UNet<F>>,
    ) -> Result<Self, TrainError> {
        let ckpt: Checkpoint<F> = checkpoint_load(path)?;
        let distill = ckpt.distill.unwrap_or(DistillConfig {
            alpha: 1.0,
            lambda_dec: 0.0,
            lambda_enc: 0.0,
            ..DistillConfig::default()
        });

        let net = ckpt.build_network()?;
        let tensors = ckpt.tensor_map();
        // Construction seed is irrelevant: every projection weight is
        // overwritten from the checkpoint below.
        let mut init_rng = ChaCha20Rng::seed_from_u64(0);

        let mut teacher = teacher;
        if distill.is_pure_supervised() {
            teacher = None;
        } else {
            let t = teacher
                .as_mut()
                .ok_or_else(|| TrainError::BadRunConfig(
                    "checkpoint was distilling but no teacher was supplied".into(),
                ))?;
            if t.spec().num_classes != ckpt.arch.num_classes {
                return Err(TrainError::TeacherClassCount {
                    teacher: t.spec().num_classes,
                    student: ckpt.arch.num_classes,
                });
            }
            t.set_trainable(false);
        }

        let mut load_proj = |name: &str,
                             lambda: f64,
                             planes_idx: usize|
         -> Result<Option<ProjectionLayer<F>>, TrainError> {
            if lambda == 0.0 {
                return Ok(None);
            }
            let t_spec = teacher.as_ref().expect("checked above").spec();
            let mut proj = ProjectionLayer::new(
                name,
                ckpt.arch.planes[planes_idx],
                t_spec.planes[planes_idx],
                &mut init_rng,
            );
            proj.import_tensors(&tensors)?;
            Ok(Some(proj))
        };
        let proj_dec = load_proj("proj_dec", distill.lambda_dec, 7)?;
        let proj_enc = load_proj("proj_enc", distill.lambda_enc, 3)?;

        let mut optim = Optimizer::new(ckpt.optim)?;
        optim.set_t(ckpt.optim_t);
        optim.load_state_tensors(&ckpt.tensors_with_prefix("optim."));

        Ok(Trainer {
            net,
            teacher,
            proj_dec,
            proj_enc,
            distill,
            optim,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
        })
    }

    pub fn net(&self) -> &Res16UNet<F> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Res16UNet<F> {
        &mut self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn distill_config(&self) -> &DistillConfig {
        &self.distill
    }

    /// Full training state: student weights, projections, optimizer
    /// buffers, and the RNG position.
    pub fn checkpoint(&self) -> Checkpoint<F> {
        let mut tensors = self.net.export_tensors();
        if let Some(p) = &self.proj_dec {
            tensors.extend(p.export_tensors());
        }
        if let Some(p) = &self.proj_enc {
            tensors.extend(p.export_tensors());
        }
        tensors.extend(self.optim.state_tensors());
        Checkpoint {
            epoch: self.epoch,
            arch: self.net.spec().clone(),
            distill: Some(self.distill),
            optim: *self.optim.config(),
            optim_t: self.optim.t(),
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    /// Inference artifact: the student's weights alone. Projections and
    /// optimizer state are training scaffolding and are not exported.
    pub fn export_student(&self) -> Checkpoint<F> {
        Checkpoint {
            epoch: self.epoch,
            arch: self.net.spec().clone(),
            distill: Some(self.distill),
            optim: *self.optim.config(),
            optim_t: 0,
            rng: RngState::capture(&self.rng),
            tensors: self.net.export_tensors(),
        }
    }

    /// Runs `opts.epochs` further epochs over the manifest's train split,
    /// evaluating on the val split after each. Returns one record per
    /// epoch and appends them to `history.jsonl` when an output directory
    /// is set.
    pub fn run(
        &mut self,
        manifest: &DatasetManifest,
        opts: &TrainOptions,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        self.run_with_progress(manifest, opts, |_| {})
    }

    /// [`Trainer::run`] with a callback invoked after each completed epoch,
    /// for live progress output.
    pub fn run_with_progress(
        &mut self,
        manifest: &DatasetManifest,
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>, TrainError> {
        if manifest.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if manifest.val.is_empty() {
            return Err(TrainError::EmptySplit("val"));
        }
        if manifest.num_classes != self.net.spec().num_classes {
            return Err(TrainError::ClassCount {
                dataset: manifest.num_classes,
                net: self.net.spec().num_classes,
            });
        }
        if !(opts.voxel_size > 0.0 && opts.voxel_size.is_finite()) {
            return Err(TrainError::BadRunConfig(format!(
                "voxel_size must be positive, got {}",
                opts.voxel_size
            )));
        }

        let train_clouds: Vec<PointCloud> = manifest
            .train
            .iter()
            .map(|d| d.realize())
            .collect::<Result<_, _>>()?;
        // Validation is never augmented, so voxelize it once.
        let val_scenes: Vec<VoxelizedScene<F>> = manifest
            .val
            .iter()
            .map(|d| Ok(voxelize(&d.realize()?, opts.voxel_size)?))
            .collect::<Result<_, TrainError>>()?;

        let mut history_file = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("history.jsonl"))?,
                )
            }
            None => None,
        };

        let mut history = Vec::with_capacity(opts.epochs);
        let end = self.epoch + opts.epochs;
        while self.epoch < end {
            let (record, eval) = self.train_epoch(&train_clouds, &val_scenes, opts)?;
            if let Some(f) = &mut history_file {
                let line = serde_json::to_string(&record).expect("records are plain data");
                writeln!(f, "{line}")?;
            }
            on_epoch(&record);
            history.push(record);
            if let Some(dir) = &opts.out_dir {
                // Always-current final metrics, for reports.
                let json = serde_json::to_string_pretty(&eval).expect("metrics are plain data");
                fs::write(dir.join("eval.json"), json)?;
                let due = opts.save_every > 0 && self.epoch % opts.save_every == 0;
                if due || self.epoch == end {
                    checkpoint_save(
                        dir.join(format!("epoch_{:04}.skd1", self.epoch)),
                        &self.checkpoint(),
                    )?;
                }
            }
        }
        Ok(history)
    }

    /// Evaluates the current student on already-voxelized scenes.
    pub fn evaluate(&mut self, scenes: &[VoxelizedScene<F>]) -> Result<EvalResult, TrainError> {
        evaluate(&mut self.net, scenes)
    }

    fn train_epoch(
        &mut self,
        train_clouds: &[PointCloud],
        val_scenes: &[VoxelizedScene<F>],
        opts: &TrainOptions,
    ) -> Result<(EpochRecord, EvalResult), TrainError> {
        let cfg = *self.optim.config();
        let lr = step_lr(cfg.lr, cfg.gamma, cfg.step_size, self.epoch);

        let mut order: Vec<usize> = (0..train_clouds.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = LossBreakdown {
            total: 0.0,
            ce: 0.0,
            kl: 0.0,
            ban: 0.0,
            fm_dec: 0.0,
            fm_enc: 0.0,
        };
        let mut steps = 0usize;
        let mut step = |trainer: &mut Self, scene: &VoxelizedScene<F>| -> Result<(), TrainError> {
            let breakdown = trainer.train_step(scene, lr)?;
            sums.total += breakdown.total;
            sums.ce += breakdown.ce;
            sums.kl += breakdown.kl;
            sums.ban += breakdown.ban;
            sums.fm_dec += breakdown.fm_dec;
            sums.fm_enc += breakdown.fm_enc;
            steps += 1;
            Ok(())
        };

        if opts.mix3d {
            // Pairs in shuffled order; an odd scene out trains alone.
            for pair in order.chunks(2) {
                let scene = if let [i, j] = *pair {
                    let a = self.prepare(&train_clouds[i], opts)?;
                    let b = self.prepare(&train_clouds[j], opts)?;
                    mix_scenes(&a, &b)?
                } else {
                    self.prepare(&train_clouds[pair[0]], opts)?
                };
                step(self, &scene)?;
            }
        } else {
            for &i in &order {
                let scene = self.prepare(&train_clouds[i], opts)?;
                step(self, &scene)?;
            }
        }
        drop(step);

        let n = steps as f64;
        let eval = evaluate(&mut self.net, val_scenes)?;
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_total: sums.total / n,
            train_ce: sums.ce / n,
            train_kl: sums.kl / n,
            train_fm_dec: sums.fm_dec / n,
            train_fm_enc: sums.fm_enc / n,
            val_miou: eval.miou,
            val_macc: eval.macc,
        };
        self.epoch += 1;
        Ok((record, eval))
    }

    /// Augments one cloud with a fresh seed from the run stream and
    /// voxelizes it. The seed is drawn even for identity configurations so
    /// toggling augmentation does not shift every later random choice.
    fn prepare(
        &mut self,
        cloud: &PointCloud,
        opts: &TrainOptions,
    ) -> Result<VoxelizedScene<F>, TrainError> {
        let seed: u64 = self.rng.gen();
        let augmented = augment(cloud, seed, &opts.augment);
        Ok(voxelize(&augmented, opts.voxel_size)?)
    }

    /// One optimization step on one (possibly mixed) scene.
    fn train_step(
        &mut self,
        scene: &VoxelizedScene<F>,
        lr: f64,
    ) -> Result<LossBreakdown, TrainError> {
        let plan = CoordinatePlan::build(scene.sparse.cmap.clone())?;

        self.net.zero_grad();
        if let Some(p) = &mut self.proj_dec {
            p.zero_grad();
        }
        if let Some(p) = &mut self.proj_enc {
            p.zero_grad();
        }

        let student_out = self.net.forward_tapped(&scene.sparse, &plan, true)?;

        let (breakdown, grads) = if self.teacher.is_none() {
            let (ce, g) = ce_loss(&student_out.logits.features, &scene.labels, IGNORE_LABEL)?;
            let ce = ce.to_f64();
            (
                LossBreakdown {
                    total: ce,
                    ce,
                    kl: 0.0,
                    ban: ce,
                    fm_dec: 0.0,
                    fm_enc: 0.0,
                },
                TapGrads {
                    logits: g,
                    encoder: None,
                    decoder: None,
                },
            )
        } else {
            let teacher_out = self
                .teacher
                .as_mut()
                .expect("just checked")
                .forward_tapped(&scene.sparse, &plan, false)?;
            total_distill_loss(
                &student_out,
                &teacher_out,
                &scene.labels,
                IGNORE_LABEL,
                &self.distill,
                self.proj_dec.as_mut(),
                self.proj_enc.as_mut(),
            )?
        };

        self.net.backward(&grads, &plan)?;

        let mut params = Vec::new();
        self.net.params_mut(&mut params);
        if let Some(p) = &mut self.proj_dec {
            p.params_mut(&mut params);
        }
        if let Some(p) = &mut self.proj_enc {
            p.params_mut(&mut params);
        }
        self.optim.step(&mut params, lr)?;
        Ok(breakdown)
    }
}
