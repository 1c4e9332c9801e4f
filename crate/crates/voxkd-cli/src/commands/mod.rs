pub mod eval;
pub mod gen_data;
pub mod gradcheck;
pub mod inspect;
pub mod report;
pub mod train;

use anyhow::Result;
use voxkd::models::ArchSpec;
use voxkd::train::{ModelSection, RunConfig};

/// Resolves an architecture name plus width divisor into a topology,
/// with the same family/variant reconciliation the run configuration uses.
fn resolve_arch(arch: &str, divisor: usize, classes: usize) -> Result<ArchSpec> {
    let cfg = RunConfig {
        model: ModelSection {
            arch: arch.to_string(),
            divisor,
        },
        ..RunConfig::default()
    };
    Ok(cfg.arch_spec(classes)?)
}

/// `1234567` -> `"1,234,567"`.
fn group_digits(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
