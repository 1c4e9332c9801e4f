use std::path::Path;

use anyhow::{bail, Context, Result};
use voxkd::data::{load_dataset, DatasetManifest};
use voxkd::models::{ArchSpec, Res16UNet};
use voxkd::train::{
    checkpoint_load, checkpoint_peek, checkpoint_save, RunConfig, TrainOptions, Trainer,
};
use voxkd::{Dtype, Scalar};

use crate::args::{DistillArgs, DtypeArg, TrainArgs};

pub fn run_supervised(args: &TrainArgs) -> Result<()> {
    let cfg = merged_config(args, None)?;
    match args.dtype {
        DtypeArg::F32 => drive::<f32>(args, cfg, None),
        DtypeArg::F64 => drive::<f64>(args, cfg, None),
    }
}

pub fn run_distill(args: &DistillArgs) -> Result<()> {
    let cfg = merged_config(&args.train, Some(args))?;
    match args.train.dtype {
        DtypeArg::F32 => drive::<f32>(&args.train, cfg, Some(&args.teacher)),
        DtypeArg::F64 => drive::<f64>(&args.train, cfg, Some(&args.teacher)),
    }
}

/// Config file plus command-line overrides, revalidated after merging.
fn merged_config(args: &TrainArgs, distill: Option<&DistillArgs>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)
        .with_context(|| format!("run config {}", args.config.display()))?;
    let o = &args.overrides;
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.save_every {
        cfg.train.save_every = v;
    }
    if let Some(v) = o.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = o.voxel_size {
        cfg.data.voxel_size = v;
    }
    if let Some(v) = &o.arch {
        cfg.model.arch = v.clone();
    }
    if let Some(v) = o.divisor {
        cfg.model.divisor = v;
    }
    if let Some(d) = distill {
        if let Some(v) = d.alpha {
            cfg.distill.alpha = v;
        }
        if let Some(v) = d.temperature {
            cfg.distill.temperature = v;
        }
        if let Some(v) = d.lambda_dec {
            cfg.distill.lambda_dec = v;
        }
        if let Some(v) = d.lambda_enc {
            cfg.distill.lambda_enc = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_teacher<F: Scalar>(path: &Path, run_dtype: Dtype) -> Result<Res16UNet<F>> {
    let header =
        checkpoint_peek(path).with_context(|| format!("teacher checkpoint {}", path.display()))?;
    if header.dtype != run_dtype {
        bail!(
            "teacher checkpoint {} holds {:?} weights but the run uses {:?}; pass a matching --dtype",
            path.display(),
            header.dtype,
            run_dtype
        );
    }
    let ckpt = checkpoint_load::<F>(path)
        .with_context(|| format!("teacher checkpoint {}", path.display()))?;
    Ok(ckpt.build_network()?)
}

fn drive<F: Scalar>(args: &TrainArgs, mut cfg: RunConfig, teacher: Option<&Path>) -> Result<()> {
    let manifest: DatasetManifest =
        load_dataset(&args.data).with_context(|| format!("dataset {}", args.data.display()))?;
    let spec: ArchSpec = cfg.arch_spec(manifest.num_classes)?;

    let teacher_net = match teacher {
        None => None,
        Some(path) => {
            let net = load_teacher::<F>(path, args.dtype.into())?;
            if net.spec().width_divisor > spec.width_divisor {
                bail!(
                    "teacher (divisor {}) is narrower than the student (divisor {}); \
                     distillation needs a teacher at least as wide",
                    net.spec().width_divisor,
                    spec.width_divisor
                );
            }
            Some(net)
        }
    };

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let header = checkpoint_peek(ckpt_path)
                .with_context(|| format!("resume checkpoint {}", ckpt_path.display()))?;
            if header.arch != spec {
                bail!(
                    "checkpoint {} holds divisor {} with {} classes, but the config resolves \
                     to divisor {} with {} classes",
                    ckpt_path.display(),
                    header.arch.width_divisor,
                    header.arch.num_classes,
                    spec.width_divisor,
                    spec.num_classes
                );
            }
            // Hyperparameters continue from the checkpoint; record them so
            // the config written below stays truthful.
            cfg.optim = header.optim;
            if let Some(d) = header.distill {
                cfg.distill = d;
            }
            Trainer::<F>::resume(ckpt_path, teacher_net)
                .with_context(|| format!("resume checkpoint {}", ckpt_path.display()))?
        }
        None => match teacher_net {
            Some(net) => Trainer::new_distill(&spec, net, cfg.distill, cfg.optim, cfg.train.seed)?,
            None => Trainer::new_supervised(&spec, cfg.optim, cfg.train.seed)?,
        },
    };

    std::fs::create_dir_all(&args.out)?;
    cfg.save(args.out.join("config.toml"))?;
    if args.resume.is_none() {
        // A fresh run replaces whatever run lived here before; the history
        // file is append-only, so clear it explicitly.
        let history = args.out.join("history.jsonl");
        if history.exists() {
            std::fs::remove_file(&history)?;
        }
    }

    // `epochs` is the target total, so an interrupted run resumed with the
    // same config finishes at the same epoch as an uninterrupted one.
    let remaining = cfg.train.epochs.saturating_sub(trainer.epoch());
    if trainer.epoch() > 0 {
        println!(
            "resuming at epoch {}; {} of {} epochs remain",
            trainer.epoch(),
            remaining,
            cfg.train.epochs
        );
    }
    let opts = TrainOptions {
        epochs: remaining,
        voxel_size: cfg.data.voxel_size,
        augment: cfg.data.augment.clone(),
        mix3d: cfg.data.mix3d,
        save_every: cfg.train.save_every,
        out_dir: Some(args.out.clone()),
    };
    let records = trainer.run_with_progress(&manifest, &opts, |r| {
        println!(
            "epoch {:>4}  lr {:.6}  loss {:.4}  ce {:.4}  kl {:.4}  fm {:.4}/{:.4}  \
             val mIoU {:.4}  mAcc {:.4}",
            r.epoch,
            r.lr,
            r.train_total,
            r.train_ce,
            r.train_kl,
            r.train_fm_dec,
            r.train_fm_enc,
            r.val_miou,
            r.val_macc
        );
    })?;

    let weights = args.out.join("model.skd1");
    checkpoint_save(&weights, &trainer.export_student())?;
    match records.last() {
        Some(last) => println!(
            "done: {} epochs, val mIoU {:.1}%; weights at {}",
            trainer.epoch(),
            100.0 * last.val_miou,
            weights.display()
        ),
        None => println!(
            "checkpoint already at epoch {} >= target {}; re-exported weights to {}",
            trainer.epoch(),
            cfg.train.epochs,
            weights.display()
        ),
    }
    Ok(())
}
