//! Evaluation report files (canonical JSON) and the PR-curve SVG plot.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use shipdet_core::eval::{format_report, EvalReport, ReportStyle};

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, format_report(report, ReportStyle::Json))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid report", path.display()))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Renders precision-recall curves for every (report, threshold) pair as a
/// standalone SVG. Purely textual output, deterministic for fixed inputs.
pub fn pr_curves_svg(reports: &[EvalReport]) -> String {
    let (w, h) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let x = |recall: f64| ml + recall * plot_w;
    let y = |precision: f64| mt + (1.0 - precision) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for tick in 0..=5 {
        let f = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{f:.1}</text>\n",
            x(f),
            mt + plot_h + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{f:.1}</text>\n",
            ml - 8.0,
            y(f) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">recall</text>\n",
        ml + plot_w / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {})\">precision</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    let mut color_idx = 0usize;
    let mut legend_y = mt + 16.0;
    for report in reports {
        for entry in &report.entries {
            let color = PALETTE[color_idx % PALETTE.len()];
            color_idx += 1;
            let mut points = String::new();
            points.push_str(&format!("{:.2},{:.2} ", x(0.0), y(1.0)));
            for p in &entry.curve.points {
                points.push_str(&format!("{:.2},{:.2} ", x(p.recall), y(p.precision)));
            }
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>\n",
                points.trim_end()
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{legend_y}\" font-size=\"12\" fill=\"{color}\">\
                 {} AP@{:.0} = {:.2}</text>\n",
                ml + plot_w - 190.0,
                report.method,
                entry.iou_threshold * 100.0,
                entry.ap * 100.0
            ));
            legend_y += 16.0;
        }
    }
    svg.push_str("</svg>\n");
    svg
}
