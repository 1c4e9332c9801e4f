use anyhow::{bail, Context, Result};
use voxkd::data::{load_dataset, voxelize, DataError, Split, VoxelizedScene};
use voxkd::report::per_class_table;
use voxkd::train::{checkpoint_load, checkpoint_peek, evaluate};
use voxkd::{Dtype, Scalar};

use crate::args::EvalArgs;
use crate::threads::{par_map, thread_count};

pub fn run(args: &EvalArgs) -> Result<()> {
    let header = checkpoint_peek(&args.ckpt)
        .with_context(|| format!("checkpoint {}", args.ckpt.display()))?;
    match header.dtype {
        Dtype::F32 => drive::<f32>(args),
        Dtype::F64 => drive::<f64>(args),
    }
}

fn drive<F: Scalar>(args: &EvalArgs) -> Result<()> {
    if !(args.voxel_size > 0.0 && args.voxel_size.is_finite()) {
        bail!("--voxel-size must be positive, got {}", args.voxel_size);
    }
    let ckpt = checkpoint_load::<F>(&args.ckpt)
        .with_context(|| format!("checkpoint {}", args.ckpt.display()))?;
    let mut net = ckpt.build_network()?;
    let manifest =
        load_dataset(&args.data).with_context(|| format!("dataset {}", args.data.display()))?;
    if manifest.num_classes != net.spec().num_classes {
        bail!(
            "dataset has {} classes but the checkpoint was trained for {}",
            manifest.num_classes,
            net.spec().num_classes
        );
    }

    let split: Split = args.split.into();
    let descriptors = manifest.scenes(split);
    if descriptors.is_empty() {
        bail!("dataset has no {} scenes", split.as_str());
    }
    let scenes = par_map(descriptors.iter().collect(), thread_count()?, |d| {
        Ok::<_, DataError>(voxelize::<F>(&d.realize()?, args.voxel_size)?)
    })
    .into_iter()
    .collect::<Result<Vec<VoxelizedScene<F>>, _>>()?;

    let result = evaluate(&mut net, &scenes)?;

    let name = args
        .ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    print!("{}", per_class_table(&[(name, result.clone())]));
    println!(
        "\nmIoU {:.1}%  mAcc {:.1}%  oAcc {:.1}%  ({} scene{}, {} labeled voxels)",
        100.0 * result.miou,
        100.0 * result.macc,
        100.0 * result.oacc,
        scenes.len(),
        if scenes.len() == 1 { "" } else { "s" },
        result.confusion.total(),
    );

    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&result).expect("metrics are plain data");
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
