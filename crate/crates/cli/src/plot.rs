use std::path::Path;

use geoshift::mean_teacher::TraceRecord;
use plotters::prelude::*;

use crate::error::{CliError, Result};
use crate::stages::SweepSummary;

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Line chart of named series over `x`.
fn line_chart(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Loss curves plus one chart per homography parameter. Returns the written file names.
pub fn plot_trace(trace: &[TraceRecord], dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let pick = |f: fn(&TraceRecord) -> f64| trace.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    line_chart(
        &dir.join("loss.svg"),
        "adaptation losses",
        "step",
        &[
            ("source cls".into(), pick(|r| r.loss_src_cls)),
            ("source reg".into(), pick(|r| r.loss_src_reg)),
            ("target cls".into(), pick(|r| r.loss_tgt_cls)),
        ],
    )?;
    written.push("loss.svg".into());
    let n = trace.first().map_or(0, |r| r.transforms.len());
    for (k, name) in ["sx", "sy", "lx", "ly"].iter().enumerate() {
        if n == 0 {
            break;
        }
        let series: Vec<(String, Vec<(f64, f64)>)> = (0..n)
            .map(|j| {
                let pts = trace
                    .iter()
                    .filter_map(|r| r.transforms.get(j).map(|t| (r.step as f64, t[k])))
                    .collect();
                (format!("T{}", j + 1), pts)
            })
            .collect();
        let file = format!("T_{name}.svg");
        line_chart(&dir.join(&file), &format!("student {name} per homography"), "step", &series)?;
        written.push(file);
    }
    let ap: Vec<(f64, f64)> = trace
        .iter()
        .filter_map(|r| r.target_ap.map(|a| (r.step as f64, a)))
        .collect();
    if !ap.is_empty() {
        line_chart(&dir.join("target_ap.svg"), "teacher target AP50", "step", &[("AP50".into(), ap)])?;
        written.push("target_ap.svg".into());
    }
    Ok(written)
}

/// Mean target AP against the swept value, with per-seed points.
pub fn plot_sweep(summary: &SweepSummary, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (x0, x1) = bounds(summary.rows.iter().map(|r| r.value));
    let (y0, y1) = bounds(summary.rows.iter().flat_map(|r| r.target_ap50.iter().copied()));
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("target AP50 vs {}", summary.param.name()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(summary.param.name())
        .y_desc("AP50")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            summary.rows.iter().map(|r| (r.value, r.mean)),
            PALETTE[0].stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(summary.rows.iter().flat_map(|r| {
            r.target_ap50
                .iter()
                .map(move |&a| Circle::new((r.value, a), 3, PALETTE[1].filled()))
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
