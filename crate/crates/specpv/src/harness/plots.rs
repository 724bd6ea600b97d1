//! Self-contained SVG line charts for bench reports.
//!
//! Output bytes are deterministic for a fixed report: floats are printed
//! with fixed precision and series are ordered by method name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::RunReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn series_key(method: &str, budget: Option<usize>) -> String {
    match budget {
        Some(b) => format!("{method}-{b}"),
        None => method.to_string(),
    }
}

fn collect_series(
    report: &RunReport,
    value: impl Fn(&crate::harness::CellReport) -> Option<f64>,
) -> Vec<Series> {
    let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for cell in &report.cells {
        if cell.status != "ok" {
            continue;
        }
        if let Some(v) = value(cell) {
            map.entry(series_key(&cell.method, cell.budget))
                .or_default()
                .push((cell.context_len as f64, v));
        }
    }
    map.into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

fn render_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x_min, x_max) = bounds(all.iter().map(|p| p.0));
    let (y_min, y_max) = bounds(all.iter().map(|p| p.1));
    let y_min = y_min.min(0.0);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| {
        if x_max > x_min {
            MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w
        } else {
            MARGIN_L + plot_w / 2.0
        }
    };
    let sy = |y: f64| {
        if y_max > y_min {
            MARGIN_T + plot_h - (y - y_min) / (y_max - y_min) * plot_h
        } else {
            MARGIN_T + plot_h / 2.0
        }
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        MARGIN_L + plot_w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L:.1}\" y1=\"{MARGIN_T:.1}\" x2=\"{MARGIN_L:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h
    ));
    // axis labels and extent ticks
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">context length</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{y_label}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));
    for (v, x, y, anchor) in [
        (x_min, sx(x_min), MARGIN_T + plot_h + 16.0, "middle"),
        (x_max, sx(x_max), MARGIN_T + plot_h + 16.0, "middle"),
    ] {
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.0}</text>\n"
        ));
    }
    for v in [y_min, y_max] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>\n",
            MARGIN_L - 6.0,
            sy(v) + 4.0
        ));
    }
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        let ly = MARGIN_T + 14.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            WIDTH - MARGIN_R + 8.0,
            ly - 9.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R + 22.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() {
        (0.0, 1.0)
    } else {
        (min, max)
    }
}

/// Write speedup-vs-context and tau-vs-context charts. An empty sweep
/// produces no files and succeeds.
pub fn emit_plots(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let speedup = collect_series(report, |c| c.alpha_measured.or(c.alpha_modeled));
    let tau = collect_series(report, |c| c.tau);
    let mut written = Vec::new();
    if speedup.is_empty() && tau.is_empty() {
        return Ok(written);
    }
    std::fs::create_dir_all(out_dir)?;
    if !speedup.is_empty() {
        let path = out_dir.join("speedup_vs_context.svg");
        std::fs::write(&path, render_chart("Decoding speedup", "speedup", &speedup))?;
        written.push(path);
    }
    if !tau.is_empty() {
        let path = out_dir.join("tau_vs_context.svg");
        std::fs::write(&path, render_chart("Draft accept length", "tau", &tau))?;
        written.push(path);
    }
    Ok(written)
}
