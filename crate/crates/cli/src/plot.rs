//! Static SVG plots: loss curves of a run and AP per ablation arm.

use std::path::Path;

use plotters::prelude::*;
use uniquery::trainer::MetricsRecord;

use crate::ablation::AblationReport;
use crate::error::{CliError, CliResult};

fn plot_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |message| CliError::Plot {
        path: path.to_path_buf(),
        message,
    }
}

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
];

/// One line per loss component against the step index.
pub fn loss_curves(records: &[MetricsRecord], path: &Path) -> CliResult<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (900, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let xmax = records.last().map_or(1, |r| r.step + 1) as f64;
    let ymax = records
        .iter()
        .flat_map(|r| r.loss.components().map(|(_, v)| v))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..xmax, 0.0..ymax)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    let names = records.first().map(|r| r.loss.components().map(|(n, _)| n));
    for (i, name) in names.into_iter().flatten().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points = records
            .iter()
            .map(|r| (r.step as f64, r.loss.components()[i].1));
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Bars at the median AP of each arm, one dot per seed.
pub fn ablation_bars(report: &AblationReport, path: &Path) -> CliResult<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let n = report.arms.len();
    let ymax = report
        .runs
        .iter()
        .map(|r| 100.0 * r.report.ap)
        .fold(1.0f64, f64::max)
        * 1.15;
    let labels: Vec<&str> = report.arms.iter().map(|a| a.arm.label()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("mask AP per arm (median over seeds)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..n as f64, 0.0..ymax)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < labels.len() {
                labels[i].to_string()
            } else {
                String::new()
            }
        })
        .y_desc("AP")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, arm) in report.arms.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = i as f64;
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x + 0.2, 0.0), (x + 0.8, 100.0 * arm.median.ap)],
                color.mix(0.6).filled(),
            )))
            .map_err(|e| err(e.to_string()))?;
        let dots = report
            .runs
            .iter()
            .filter(|r| r.arm == arm.arm)
            .map(|r| Circle::new((x + 0.5, 100.0 * r.report.ap), 4, BLACK.filled()));
        chart.draw_series(dots).map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}
