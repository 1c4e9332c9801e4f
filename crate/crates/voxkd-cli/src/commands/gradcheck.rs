use anyhow::{bail, Result};
use voxkd::models::gradcheck;

use super::resolve_arch;
use crate::args::GradcheckArgs;

pub fn run(args: &GradcheckArgs) -> Result<()> {
    if args.sites == 0 {
        bail!("--sites must be at least 1");
    }
    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        bail!("--tolerance must be positive, got {}", args.tolerance);
    }
    let spec = resolve_arch(&args.arch, args.divisor, args.classes)?;
    println!(
        "gradcheck: divisor {} with {} classes, {} sites, {} samples per tensor, tolerance {:.0e}",
        spec.width_divisor, spec.num_classes, args.sites, args.samples, args.tolerance
    );

    let report = gradcheck(&spec, args.sites, args.samples, args.seed, args.tolerance)?;

    let name_w = report
        .per_tensor
        .iter()
        .map(|t| t.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    println!("{:<name_w$}  probes  max rel err  verdict", "layer");
    for t in &report.per_tensor {
        println!(
            "{:<name_w$}  {:>6}  {:>11.3e}  {}",
            t.name,
            t.checked,
            t.max_rel_err,
            if t.passed { "pass" } else { "FAIL" }
        );
    }
    println!("{report}");

    if !report.passed {
        for failure in &report.failures {
            println!("{failure}");
        }
        bail!(
            "gradcheck failed: {} of {} probes exceeded tolerance {:.0e}; worst {} at {:.3e}",
            report.failures.len(),
            report.checked,
            report.tolerance,
            report.worst,
            report.max_rel_err
        );
    }
    Ok(())
}
