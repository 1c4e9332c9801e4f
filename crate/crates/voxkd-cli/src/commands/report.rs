use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use voxkd::report::write_report;

use crate::args::ReportArgs;

pub fn run(args: &ReportArgs) -> Result<()> {
    let dir = &args.dir;
    let mut runs: Vec<PathBuf> = Vec::new();
    if dir.join("history.jsonl").is_file() {
        runs.push(dir.clone());
    } else if dir.is_dir() {
        for entry in
            std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?
        {
            let path = entry?.path();
            if path.join("history.jsonl").is_file() {
                runs.push(path);
            }
        }
        runs.sort();
    } else {
        bail!("{} is not a directory", dir.display());
    }
    if runs.is_empty() {
        bail!(
            "no run histories (history.jsonl) found under {}",
            dir.display()
        );
    }

    let out = args.out.clone().unwrap_or_else(|| dir.join("report"));
    let files = write_report(&runs, &out)?;
    println!(
        "rendered {} run{}",
        runs.len(),
        if runs.len() == 1 { "" } else { "s" }
    );
    println!("wrote {}", files.loss_svg.display());
    println!("wrote {}", files.miou_svg.display());
    if let Some(table) = files.table_txt {
        println!("wrote {}", table.display());
    }
    Ok(())
}
