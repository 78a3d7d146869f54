//! Report files: JSON, CSV tables and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::train::StepRecord;

use super::harness::{EvalReport, SweepPoint};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn ber_csv(report: &EvalReport) -> String {
    let mut s = String::from("distortion,ber,bits,realigned,skipped\n");
    for r in &report.ber_table {
        let ber = r.ber.map(|b| b.to_string()).unwrap_or_default();
        let skipped = r.skipped.as_deref().unwrap_or("").replace([',', '\n'], " ");
        writeln!(s, "{},{},{},{},{}", r.distortion, ber, r.bits, r.realigned, skipped).expect("string write");
    }
    s
}

pub fn sweep_csv(sweep: &[SweepPoint]) -> String {
    let mut s = String::from("ratio,mean_z,tpr,mean_snr_db\n");
    for p in sweep {
        writeln!(s, "{},{},{},{}", p.ratio, p.mean_z, p.tpr, p.mean_snr_db).expect("string write");
    }
    s
}

/// Writes `report.json`, plus `ber.csv`, `sweep.csv` and `tradeoff.svg` when the
/// report has the corresponding sections. Returns the paths written.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>, threshold: f64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    written.push(json);
    if !report.ber_table.is_empty() {
        let p = dir.join("ber.csv");
        std::fs::write(&p, ber_csv(report))?;
        written.push(p);
    }
    if !report.sweep.is_empty() {
        let p = dir.join("sweep.csv");
        std::fs::write(&p, sweep_csv(&report.sweep))?;
        written.push(p);
        let p = dir.join("tradeoff.svg");
        plot_tradeoff(&report.sweep, threshold, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Mean Z-statistic against watermark ratio, with the decision threshold dashed.
pub fn plot_tradeoff(sweep: &[SweepPoint], threshold: f64, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = sweep.iter().map(|p| p.ratio).fold(0.0, f64::max).max(0.05) * 1.05;
    let y_max = sweep.iter().map(|p| p.mean_z).fold(threshold, f64::max) * 1.1;
    let y_min = sweep.iter().map(|p| p.mean_z).fold(0.0, f64::min);
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, y_min..y_max)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("watermark ratio m").y_desc("mean z").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(sweep.iter().map(|p| (p.ratio, p.mean_z)), BLUE.stroke_width(2)))
        .map_err(plot_err)?;
    chart
        .draw_series(sweep.iter().map(|p| Circle::new((p.ratio, p.mean_z), 3, BLUE.filled())))
        .map_err(plot_err)?;
    let dashes = (0..40).map(|i| {
        let a = x_max * i as f64 / 40.0;
        PathElement::new(vec![(a, threshold), (a + x_max / 80.0, threshold)], RED.stroke_width(1))
    });
    chart.draw_series(dashes).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Total loss per step, one line per stage present in `records`.
pub fn plot_loss(records: &[StepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no loss records to plot".into()));
    }
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = records.iter().map(|r| r.step).max().unwrap_or(1).max(2) as f64;
    let finite = records.iter().map(|r| r.total).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(1.0..x_max, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("total loss").draw().map_err(plot_err)?;
    for (stage, color) in [(1u8, BLUE), (2u8, GREEN)] {
        let pts: Vec<(f64, f64)> =
            records.iter().filter(|r| r.stage == stage).map(|r| (r.step as f64, r.total)).collect();
        if !pts.is_empty() {
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(1)))
                .map_err(plot_err)?
                .label(format!("stage {stage}"))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
