use std::path::Path;

use anyhow::{bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use voxkd::data::{load_dataset, occupancy_stats, DataError};
use voxkd::models::{ArchSpec, Res16UNet};
use voxkd::train::checkpoint_peek;

use super::{group_digits, resolve_arch};
use crate::args::InspectArgs;
use crate::threads::{par_map, thread_count};

pub fn run(args: &InspectArgs) -> Result<()> {
    if let Some(path) = &args.ckpt {
        let header =
            checkpoint_peek(path).with_context(|| format!("checkpoint {}", path.display()))?;
        println!("checkpoint {}", path.display());
        println!("  dtype           {:?}", header.dtype);
        println!("  epoch           {}", header.epoch);
        println!("  optimizer steps {}", header.optim_t);
        if let Some(d) = header.distill {
            println!(
                "  distill         alpha {}  T {}  lambda_dec {}  lambda_enc {}  \
                 t2_scaling {}  fm_softmax {}",
                d.alpha, d.temperature, d.lambda_dec, d.lambda_enc, d.t2_scaling, d.fm_softmax
            );
        }
        print_network(&header.arch, args.layers);
        print_ratio_table(header.arch.num_classes, header.arch.width_divisor);
    } else if let Some(name) = &args.arch {
        let spec = resolve_arch(name, args.divisor, args.classes)?;
        println!("architecture {name}");
        print_network(&spec, args.layers);
        print_ratio_table(spec.num_classes, spec.width_divisor);
    }

    if let Some(dir) = &args.data {
        print_occupancy(dir, &args.voxel_sizes)?;
    }
    Ok(())
}

/// Trainable and total element counts of a freshly built network.
fn param_counts(spec: &ArchSpec) -> (usize, usize) {
    // Seed is irrelevant: only names and shapes are read.
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let net = Res16UNet::<f32>::new(spec, &mut rng).expect("spec was validated");
    let mut params = Vec::new();
    net.params(&mut params);
    let trainable = params
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.numel())
        .sum();
    let total = params.iter().map(|p| p.numel()).sum();
    (trainable, total)
}

fn print_network(spec: &ArchSpec, layers: bool) {
    println!(
        "  divisor {}, {} classes, {} input channels",
        spec.width_divisor, spec.num_classes, spec.in_channels
    );
    println!("  planes {:?}", spec.planes);
    println!("  blocks {:?}", spec.block_counts);

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let net = Res16UNet::<f32>::new(spec, &mut rng).expect("spec was validated");
    let mut params = Vec::new();
    net.params(&mut params);
    // Everything a checkpoint stores: parameters plus batch-norm running
    // statistics, which are state but not trainable.
    let stored = net.export_tensors();
    let is_running_stat =
        |name: &str| name.ends_with(".running_mean") || name.ends_with(".running_var");

    if layers {
        let name_w = stored.iter().map(|(n, _, _)| n.len()).max().unwrap_or(6);
        println!("  {:<name_w$}  {:>12}  shape", "tensor", "elements");
        for (name, values, shape) in &stored {
            println!(
                "  {name:<name_w$}  {:>12}  {shape:?}{}",
                group_digits(values.len()),
                if is_running_stat(name) { "  (running stat)" } else { "" }
            );
        }
    } else {
        // Stage subtotals, in network order: stem, enc0..3, dec0..3, classifier.
        let mut stages: Vec<(&str, usize, usize)> = Vec::new();
        for (name, values, _) in &stored {
            let stage = name.split('.').next().expect("names are non-empty");
            if stages.last().map(|s| s.0) != Some(stage) {
                stages.push((stage, 0, 0));
            }
            let row = stages.last_mut().expect("just pushed");
            row.1 += 1;
            if !is_running_stat(name) {
                row.2 += values.len();
            }
        }
        println!("  {:<10}  {:>7}  {:>12}", "stage", "tensors", "trainable");
        for (stage, tensors, trainable) in stages {
            println!("  {stage:<10}  {tensors:>7}  {:>12}", group_digits(trainable));
        }
    }

    let trainable: usize = params
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.numel())
        .sum();
    let stored_total: usize = stored.iter().map(|(_, values, _)| values.len()).sum();
    println!(
        "  {} trainable parameters ({:.1}M); {} stored elements including running statistics",
        group_digits(trainable),
        trainable as f64 / 1e6,
        group_digits(stored_total)
    );
}

fn print_ratio_table(num_classes: usize, current_divisor: usize) {
    println!("  width scaling at {num_classes} classes:");
    println!("    {:>7}  {:>12}  {:>8}  {:>13}", "divisor", "trainable", "millions", "ratio vs full");
    let counts: Vec<(usize, usize)> = [1usize, 2, 4, 8]
        .into_iter()
        .map(|divisor| {
            let spec = ArchSpec::res16unet34c(divisor, num_classes).expect("divides all widths");
            (divisor, param_counts(&spec).0)
        })
        .collect();
    let full = counts[0].1;
    for (divisor, trainable) in counts {
        println!(
            "    {:>7}  {:>12}  {:>7.1}M  {:>13.2}{}",
            divisor,
            group_digits(trainable),
            trainable as f64 / 1e6,
            full as f64 / trainable as f64,
            if divisor == current_divisor { "  *" } else { "" }
        );
    }
}

fn print_occupancy(dir: &Path, voxel_sizes: &[f64]) -> Result<()> {
    if voxel_sizes.is_empty() {
        bail!("--voxel-sizes needs at least one value");
    }
    for &vs in voxel_sizes {
        if !(vs > 0.0 && vs.is_finite()) {
            bail!("--voxel-sizes must be positive, got {vs}");
        }
    }
    let mut sizes = voxel_sizes.to_vec();
    sizes.sort_by(|a, b| b.partial_cmp(a).expect("validated finite"));
    sizes.dedup();

    let manifest =
        load_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?;
    let descriptors: Vec<_> = manifest.train.iter().chain(&manifest.val).collect();
    if descriptors.is_empty() {
        bail!("dataset {} has no scenes", dir.display());
    }
    let sizes_ref = &sizes;
    let per_scene = par_map(descriptors, thread_count()?, |d| {
        occupancy_stats(&d.realize()?, sizes_ref)
    })
    .into_iter()
    .collect::<Result<Vec<_>, DataError>>()?;

    println!("voxel occupancy over {} scenes:", per_scene.len());
    println!("  {:>8}  {:>7}  {:>7}  {:>7}", "voxel", "mean", "min", "max");
    for (i, &vs) in sizes.iter().enumerate() {
        let fracs: Vec<f64> = per_scene.iter().map(|s| s[i].1).collect();
        let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
        let min = fracs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = fracs.iter().copied().fold(0.0f64, f64::max);
        println!(
            "  {:>7.3}m  {:>6.3}%  {:>6.3}%  {:>6.3}%",
            vs,
            100.0 * mean,
            100.0 * min,
            100.0 * max
        );
    }
    Ok(())
}
