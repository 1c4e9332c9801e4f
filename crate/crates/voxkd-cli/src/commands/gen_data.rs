use anyhow::{bail, Context, Result};
use voxkd::data::{save_ply, seeded_manifest, write_dataset, PlyFormat, SceneParams, Split};

use crate::args::GenDataArgs;
use crate::threads::{par_map, thread_count};

pub fn run(args: &GenDataArgs) -> Result<()> {
    if args.classes < 2 {
        bail!(
            "--classes must be at least 2 (a floor and walls), got {}",
            args.classes
        );
    }
    if args.scenes < 2 {
        bail!(
            "--scenes must be at least 2 (one per split), got {}",
            args.scenes
        );
    }

    let params = SceneParams {
        room_size: args.room_size,
        classes: args.classes,
        points_per_class: args.points_per_class,
        noise: args.noise,
    };
    let val = (args.scenes / 5).max(1);
    let train = args.scenes - val;
    let manifest = seeded_manifest(args.seed, &params, train, val);
    // Surface unusable scene parameters before touching the filesystem.
    manifest.train[0]
        .realize()
        .context("scene parameters are unusable")?;

    if let Ok(mut entries) = std::fs::read_dir(&args.out) {
        if entries.next().is_some() && !args.force {
            bail!(
                "{} already exists and is not empty (pass --force to write anyway)",
                args.out.display()
            );
        }
    }
    write_dataset(&args.out, &manifest)?;

    if args.ply {
        let threads = thread_count()?;
        for split in [Split::Train, Split::Val] {
            let clouds = par_map(manifest.scenes(split).iter().collect(), threads, |d| {
                d.realize().map(|pc| (d.name.as_str(), pc))
            });
            for realized in clouds {
                let (name, pc) = realized?;
                let path = args.out.join(split.as_str()).join(format!("{name}.ply"));
                save_ply(&path, &pc, PlyFormat::BinaryLittleEndian)?;
            }
        }
    }

    println!(
        "wrote {train} train + {val} val scenes ({} classes, {} points each{}) to {}",
        args.classes,
        args.classes * args.points_per_class,
        if args.ply { ", with PLY" } else { "" },
        args.out.display()
    );
    Ok(())
}
