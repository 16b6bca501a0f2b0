//! Text tables and SVG plots for evaluation and ablation results.

use std::fmt::Write as _;
use std::path::Path;

use evseg::metrics::{MetricsReport, FLOP_CONVENTION};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::train::{self, LogRow};

pub const ABLATION_FILE: &str = "ablation.json";
pub const EVAL_FILE: &str = "eval.json";

/// One trained and evaluated (arm, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub miou: Option<f64>,
    pub wiou: Option<f64>,
    pub mvc8: Option<f64>,
    pub mvc16: Option<f64>,
    pub param_count: u64,
    pub flop_estimate: u64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub miou: Option<f64>,
    pub mvc8: Option<f64>,
    pub mvc16: Option<f64>,
    pub param_count: u64,
    pub flop_estimate: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
    pub total_iters: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub flop_convention: String,
}

impl AblationReport {
    pub fn new(rows: Vec<AblationRow>, total_iters: u64, train_clips: usize, val_clips: usize) -> Self {
        let mut arms: Vec<&str> = Vec::new();
        for r in &rows {
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        let summary = arms
            .iter()
            .map(|&arm| {
                let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm).collect();
                let mean = |f: fn(&AblationRow) -> Option<f64>| {
                    let v: Option<Vec<f64>> = rs.iter().map(|r| f(r)).collect();
                    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                };
                ArmSummary {
                    arm: arm.to_string(),
                    runs: rs.len(),
                    miou: mean(|r| r.miou),
                    mvc8: mean(|r| r.mvc8),
                    mvc16: mean(|r| r.mvc16),
                    param_count: rs[0].param_count,
                    flop_estimate: rs[0].flop_estimate,
                }
            })
            .collect();
        AblationReport {
            rows,
            summary,
            total_iters,
            train_clips,
            val_clips,
            flop_convention: FLOP_CONVENTION.to_string(),
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

fn gflops(flops: u64) -> String {
    format!("{:.4}", flops as f64 / 1e9)
}

pub fn ablation_table(r: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Fusion ablation");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{} iterations per run, {} training clips, {} validation clips.",
        r.total_iters, r.train_clips, r.val_clips
    );
    let _ = writeln!(s, "{}.", r.flop_convention);
    let _ = writeln!(s);
    let _ = writeln!(s, "## Mean over seeds");
    let _ = writeln!(s);
    let _ = writeln!(s, "| arm | runs | mIoU | mVC8 | mVC16 | params | GFLOPs |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|");
    for a in &r.summary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            a.arm,
            a.runs,
            pct(a.miou),
            pct(a.mvc8),
            pct(a.mvc16),
            a.param_count,
            gflops(a.flop_estimate)
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "## Runs");
    let _ = writeln!(s);
    let _ = writeln!(s, "| arm | seed | mIoU | WIoU | mVC8 | mVC16 | final loss | params | GFLOPs |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {:.4} | {} | {} |",
            row.arm,
            row.seed,
            pct(row.miou),
            pct(row.wiou),
            pct(row.mvc8),
            pct(row.mvc16),
            row.final_loss,
            row.param_count,
            gflops(row.flop_estimate)
        );
    }
    s
}

pub fn metrics_table(m: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "Model: {} parameters, {} GFLOPs per window.",
        m.param_count,
        gflops(m.flop_estimate)
    );
    let _ = writeln!(s, "{}.", m.flop_convention);
    let _ = writeln!(s, "VC denominator: {:?}.", m.vc_denominator);
    let _ = writeln!(s);
    let _ = writeln!(s, "| metric | value |");
    let _ = writeln!(s, "|---|---:|");
    let _ = writeln!(s, "| mIoU | {} |", pct(m.miou));
    let _ = writeln!(s, "| WIoU | {} |", pct(m.wiou));
    let _ = writeln!(s, "| mVC8 | {} ({} windows) |", pct(m.mvc8), m.mvc_windows[0]);
    let _ = writeln!(s, "| mVC16 | {} ({} windows) |", pct(m.mvc16), m.mvc_windows[1]);
    let _ = writeln!(s, "| params | {} |", m.param_count);
    let _ = writeln!(s, "| GFLOPs | {} |", gflops(m.flop_estimate));
    let _ = writeln!(s);
    let _ = writeln!(s, "| class | IoU |");
    let _ = writeln!(s, "|---:|---:|");
    for (k, v) in m.per_class_iou.iter().enumerate() {
        let _ = writeln!(s, "| {k} | {} |", pct(*v));
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot frame with six labelled gridlines over `[y0, y1]`.
fn axes(s: &mut String, y0: f64, y1: f64, x_label: &str, y_label: &str) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = y0 + (y1 - y0) * i as f64 / 5.0;
        let y = TOP + ph * (1.0 - i as f64 / 5.0);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{y:.1}" dominant-baseline="hanging">{}</text>"#,
            y,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            escape(n)
        );
    }
}

/// Line chart of `(name, points)` series.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    y0 = y0.min(0.0);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut s = svg_open(title);
    axes(&mut s, y0, y1, x_label, y_label);
    for (i, (_, p)) in series.iter().enumerate() {
        let path: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    LEFT + pw * (x - x0) / (x1 - x0),
                    TOP + ph * (1.0 - (y - y0) / (y1 - y0))
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            path.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.1}">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
        H - BOTTOM + 16.0,
        format_tick(x0),
        LEFT + pw,
        H - BOTTOM + 16.0,
        format_tick(x1)
    );
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars in `[0, 1]`: one group per label, one bar per metric.
pub fn bar_plot_svg(title: &str, groups: &[(String, Vec<Option<f64>>)], metrics: &[&str]) -> String {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut s = svg_open(title);
    axes(&mut s, 0.0, 1.0, "", "value");
    let gw = pw / groups.len().max(1) as f64;
    let bw = 0.8 * gw / metrics.len().max(1) as f64;
    for (gi, (label, vals)) in groups.iter().enumerate() {
        let gx = LEFT + gi as f64 * gw + 0.1 * gw;
        for (mi, v) in vals.iter().enumerate() {
            let Some(v) = v else { continue };
            let h = ph * v.clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {:.4}</title></rect>"#,
                gx + mi as f64 * bw,
                TOP + ph - h,
                bw - 2.0,
                h,
                PALETTE[mi % PALETTE.len()],
                escape(label),
                metrics[mi],
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + 0.4 * gw,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    legend(&mut s, &metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Trailing moving average over `window` points.
pub fn smooth(rows: &[LogRow], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    let mut sum = 0.0;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            sum += r.loss;
            if i >= w {
                sum -= rows[i - w].loss;
            }
            (r.iter as f64, sum / (i + 1).min(w) as f64)
        })
        .collect()
}

/// Writes `ablation.json`, `ablation.md`, `metrics.svg` and, when run logs
/// are present under `dir/<arm>/seed_<n>/`, `loss.svg`.
pub fn write_ablation_report(dir: &Path, report: &AblationReport) -> Result<()> {
    io::write_json(&dir.join(ABLATION_FILE), report)?;
    ablation_outputs(dir, dir, report, "ablation.md")?;
    Ok(())
}

fn ablation_outputs(src: &Path, out: &Path, report: &AblationReport, table_file: &str) -> Result<String> {
    let table = ablation_table(report);
    io::write_text(&out.join(table_file), &table)?;
    let groups: Vec<(String, Vec<Option<f64>>)> = report
        .summary
        .iter()
        .map(|a| (a.arm.clone(), vec![a.miou, a.mvc8, a.mvc16]))
        .collect();
    io::write_text(
        &out.join("metrics.svg"),
        &bar_plot_svg("Fusion ablation (mean over seeds)", &groups, &["mIoU", "mVC8", "mVC16"]),
    )?;
    let mut series = Vec::new();
    for row in &report.rows {
        let log = src.join(run_dir_name(&row.arm, row.seed)).join(train::LOG_FILE);
        if log.is_file() {
            series.push((format!("{} s{}", row.arm, row.seed), smooth(&train::read_log(&log)?, 50)));
        }
    }
    if !series.is_empty() {
        io::write_text(
            &out.join("loss.svg"),
            &line_plot_svg("Training loss (50-iteration moving average)", "iteration", "loss", &series),
        )?;
    }
    Ok(table)
}

pub fn run_dir_name(arm: &str, seed: u64) -> String {
    format!("{arm}/seed_{seed}")
}

/// Renders whatever result `input` points at into `out`: an ablation
/// directory or `ablation.json`, an `eval.json`, or a training run directory.
/// Returns the rendered table.
pub fn render(input: &Path, out: &Path) -> Result<String> {
    io::create_dir(out)?;
    let file = |name: &str| {
        if input.is_dir() {
            input.join(name)
        } else {
            input.to_path_buf()
        }
    };
    let ablation = file(ABLATION_FILE);
    if ablation.is_file() && ablation.file_name().is_some_and(|n| n == ABLATION_FILE) {
        let report: AblationReport = io::read_json(&ablation)?;
        let src = ablation.parent().unwrap_or(Path::new("."));
        let table = ablation_outputs(src, out, &report, "report.md")?;
        io::write_json(&out.join("report.json"), &report)?;
        return Ok(table);
    }
    let eval = file(EVAL_FILE);
    if eval.is_file() {
        let m: MetricsReport = io::read_json(&eval)?;
        let mut table = metrics_table(&m);
        let log = eval.parent().unwrap_or(Path::new(".")).join(train::LOG_FILE);
        if log.is_file() {
            let rows = train::read_log(&log)?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                let _ = writeln!(
                    table,
                    "\nTraining: {} iterations, loss {:.4} -> {:.4}.",
                    rows.len(),
                    first.loss,
                    last.loss
                );
            }
            io::write_text(
                &out.join("loss.svg"),
                &line_plot_svg("Training loss", "iteration", "loss", &[("loss".into(), smooth(&rows, 50))]),
            )?;
        }
        io::write_text(&out.join("report.md"), &table)?;
        io::write_json(&out.join("report.json"), &m)?;
        let per_class: Vec<(String, Vec<Option<f64>>)> = m
            .per_class_iou
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("class {k}"), vec![*v]))
            .collect();
        io::write_text(&out.join("metrics.svg"), &bar_plot_svg("Per-class IoU", &per_class, &["IoU"]))?;
        return Ok(table);
    }
    Err(Error::Data(format!(
        "{}: expected an {ABLATION_FILE} or {EVAL_FILE}",
        input.display()
    )))
}
