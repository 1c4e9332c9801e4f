//! Run reports: self-contained SVG training curves and per-class IoU
//! tables, rendered from the `history.jsonl` and `eval.json` files a
//! training run leaves in its output directory.
//!
//! Everything is rendered in memory before anything is written, so a
//! failing input never leaves a partial report behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::train::{class_names, EpochRecord, EvalResult};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no history found in {0}")]
    MissingHistory(PathBuf),
    #[error("{path}: history is empty")]
    EmptyHistory { path: PathBuf },
    #[error("{path}: line {line}: {msg}")]
    BadRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("no run directories given")]
    NoRuns,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training run's history, named after its directory.
#[derive(Debug, Clone)]
pub struct RunHistory {
    pub name: String,
    pub records: Vec<EpochRecord>,
    /// Final validation metrics, when the run directory has an `eval.json`.
    pub eval: Option<EvalResult>,
}

/// Loads `history.jsonl` (and `eval.json` if present) from one run
/// directory.
pub fn load_history(dir: impl AsRef<Path>) -> Result<RunHistory, ReportError> {
    let dir = dir.as_ref();
    let history_path = dir.join("history.jsonl");
    let text = std::fs::read_to_string(&history_path)
        .map_err(|_| ReportError::MissingHistory(dir.to_path_buf()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord =
            serde_json::from_str(line).map_err(|e| ReportError::BadRecord {
                path: history_path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(ReportError::EmptyHistory { path: history_path });
    }

    let eval_path = dir.join("eval.json");
    let eval = match std::fs::read_to_string(&eval_path) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| ReportError::BadRecord {
            path: eval_path,
            line: 1,
            msg: e.to_string(),
        })?),
        Err(_) => None,
    };

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunHistory { name, records, eval })
}

/// A named polyline for [`svg_line_chart`].
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const W: f64 = 800.0;
const H: f64 = 480.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 54.0;

/// A tick step of the form {1, 2, 5}·10^k giving at most `max_ticks`
/// intervals over `span`.
fn nice_step(span: f64, max_ticks: usize) -> f64 {
    let raw = span / max_ticks as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * mag >= raw {
            return m * mag;
        }
    }
    10.0 * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    format!("{v:.decimals$}")
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders named series as one self-contained SVG document: axes with
/// {1,2,5}-stepped ticks, one polyline per series, and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
            (lo.min(x), hi.max(x))
        });
    let (mut y_min, mut y_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
            (lo.min(y), hi.max(y))
        });
    if points.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        let pad = if y_min == 0.0 { 1.0 } else { y_min.abs() * 0.1 };
        y_min -= pad;
        y_max += pad;
    } else {
        let pad = (y_max - y_min) * 0.05;
        y_min -= pad;
        y_max += pad;
    }

    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" font-family="Helvetica, Arial, sans-serif" font-size="13">"#
    );
    let _ = write!(svg, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = write!(
        svg,
        r##"<text x="{}" y="26" text-anchor="middle" font-size="16" fill="#1a1a1a">{}</text>"##,
        MARGIN_L + plot_w / 2.0,
        escape_xml(title)
    );

    // Axes.
    let x0 = MARGIN_L;
    let y0 = MARGIN_T + plot_h;
    let _ = write!(
        svg,
        r##"<path d="M{x0} {MARGIN_T} V{y0} H{}" fill="none" stroke="#333333" stroke-width="1"/>"##,
        MARGIN_L + plot_w
    );

    // Ticks and grid.
    let x_step = nice_step(x_max - x_min, 8);
    let mut t = (x_min / x_step).ceil() * x_step;
    while t <= x_max + 1e-9 * x_step {
        let px = sx(t);
        let _ = write!(
            svg,
            r##"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="#333333"/>"##,
            y0 + 5.0
        );
        let _ = write!(
            svg,
            r##"<text x="{px}" y="{}" text-anchor="middle" fill="#333333">{}</text>"##,
            y0 + 20.0,
            fmt_tick(t, x_step)
        );
        t += x_step;
    }
    let y_step = nice_step(y_max - y_min, 6);
    let mut t = (y_min / y_step).ceil() * y_step;
    while t <= y_max + 1e-9 * y_step {
        let py = sy(t);
        let _ = write!(
            svg,
            r##"<line x1="{x0}" y1="{py}" x2="{}" y2="{py}" stroke="#e0e0e0"/>"##,
            MARGIN_L + plot_w
        );
        let _ = write!(
            svg,
            r##"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="#333333"/>"##,
            x0 - 5.0
        );
        let _ = write!(
            svg,
            r##"<text x="{}" y="{}" text-anchor="end" fill="#333333">{}</text>"##,
            x0 - 9.0,
            py + 4.0,
            fmt_tick(t, y_step)
        );
        t += y_step;
    }

    // Axis labels.
    let _ = write!(
        svg,
        r##"<text x="{}" y="{}" text-anchor="middle" fill="#1a1a1a">{}</text>"##,
        MARGIN_L + plot_w / 2.0,
        H - 14.0,
        escape_xml(x_label)
    );
    let _ = write!(
        svg,
        r##"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})" fill="#1a1a1a">{}</text>"##,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape_xml(y_label)
    );

    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        for &(x, y) in &s.points {
            let _ = write!(path, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
            path.trim_end()
        );
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        // Legend entry.
        let ly = MARGIN_T + 10.0 + i as f64 * 20.0;
        let lx = MARGIN_L + plot_w + 14.0;
        let _ = write!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        );
        let _ = write!(
            svg,
            r##"<text x="{}" y="{}" fill="#1a1a1a">{}</text>"##,
            lx + 28.0,
            ly + 4.0,
            escape_xml(&s.name)
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Training-loss curves: one `train_total` polyline per run. A lone run
/// also gets its nonzero loss components overlaid.
pub fn loss_chart(runs: &[RunHistory]) -> String {
    let mut series = Vec::new();
    for run in runs {
        series.push(Series {
            name: run.name.clone(),
            points: run
                .records
                .iter()
                .map(|r| (r.epoch as f64, r.train_total))
                .collect(),
        });
    }
    if let [run] = runs {
        let components: [(&str, fn(&EpochRecord) -> f64); 4] = [
            ("ce", |r| r.train_ce),
            ("kl", |r| r.train_kl),
            ("fm_dec", |r| r.train_fm_dec),
            ("fm_enc", |r| r.train_fm_enc),
        ];
        for (name, get) in components {
            if run.records.iter().any(|r| get(r) != 0.0) {
                series.push(Series {
                    name: name.to_string(),
                    points: run.records.iter().map(|r| (r.epoch as f64, get(r))).collect(),
                });
            }
        }
    }
    svg_line_chart("Training loss", "epoch", "loss", &series)
}

/// Validation mIoU curves, one polyline per run.
pub fn miou_chart(runs: &[RunHistory]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|run| Series {
            name: run.name.clone(),
            points: run
                .records
                .iter()
                .map(|r| (r.epoch as f64, r.val_miou))
                .collect(),
        })
        .collect();
    svg_line_chart("Validation mIoU", "epoch", "mIoU", &series)
}

/// A fixed-width per-class IoU table with one column per run, ScanNet
/// class names when the class count is 20, and `n/a` for classes absent
/// from both ground truth and predictions.
pub fn per_class_table(evals: &[(String, EvalResult)]) -> String {
    let num_classes = evals
        .iter()
        .map(|(_, e)| e.per_class_iou.len())
        .max()
        .unwrap_or(0);
    let names = class_names(num_classes);
    let name_w = names
        .iter()
        .map(|n| n.len())
        .chain(["class".len(), "mIoU".len(), "mAcc".len()])
        .max()
        .unwrap_or(5);
    let col_w = evals.iter().map(|(n, _)| n.len().max(6)).collect::<Vec<_>>();

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "class");
    for ((run, _), &w) in evals.iter().zip(&col_w) {
        let _ = write!(out, "  {run:>w$}");
    }
    out.push('\n');
    let rule_len = name_w + col_w.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for (c, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<name_w$}");
        for ((_, eval), &w) in evals.iter().zip(&col_w) {
            match eval.per_class_iou.get(c).copied().flatten() {
                Some(iou) => {
                    let _ = write!(out, "  {iou:>w$.3}");
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "n/a");
                }
            }
        }
        out.push('\n');
    }
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for (label, get) in [
        ("mIoU", (|e: &EvalResult| e.miou) as fn(&EvalResult) -> f64),
        ("mAcc", |e| e.macc),
    ] {
        let _ = write!(out, "{label:<name_w$}");
        for ((_, eval), &w) in evals.iter().zip(&col_w) {
            let _ = write!(out, "  {:>w$.3}", get(eval));
        }
        out.push('\n');
    }
    out
}

/// Paths written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub loss_svg: PathBuf,
    pub miou_svg: PathBuf,
    /// Present when at least one run carried final evaluation results.
    pub table_txt: Option<PathBuf>,
}

/// Renders a report over one or more run directories into `out_dir`:
/// `loss.svg`, `val_miou.svg`, and `per_class.txt` (when evaluation
/// results exist). All inputs are read and rendered before the first
/// write, so errors never leave partial output.
pub fn write_report(
    run_dirs: &[impl AsRef<Path>],
    out_dir: impl AsRef<Path>,
) -> Result<ReportFiles, ReportError> {
    if run_dirs.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let runs: Vec<RunHistory> = run_dirs
        .iter()
        .map(load_history)
        .collect::<Result<_, _>>()?;

    let loss = loss_chart(&runs);
    let miou = miou_chart(&runs);
    let evals: Vec<(String, EvalResult)> = runs
        .iter()
        .filter_map(|r| r.eval.clone().map(|e| (r.name.clone(), e)))
        .collect();
    let table = (!evals.is_empty()).then(|| per_class_table(&evals));

    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let loss_svg = out_dir.join("loss.svg");
    std::fs::write(&loss_svg, loss)?;
    let miou_svg = out_dir.join("val_miou.svg");
    std::fs::write(&miou_svg, miou)?;
    let table_txt = match table {
        Some(text) => {
            let path = out_dir.join("per_class.txt");
            std::fs::write(&path, text)?;
            Some(path)
        }
        None => None,
    };
    Ok(ReportFiles {
        loss_svg,
        miou_svg,
        table_txt,
    })
}
