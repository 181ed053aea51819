//! Files written by `evaluate`, `histogram` and `compare`: CSV tables,
//! histogram dumps and SVG plots.

use std::path::Path;

use colourgan::metrics::{format_db, EvalReport, Histogram};
use colourgan::training::EpochSummary;
use plotters::prelude::*;

use crate::error::CliError;

pub const EVAL_HEADER: [&str; 6] = ["label", "l1_ab", "psnr_db", "l_perc", "intersection_a", "intersection_b"];

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Run(colourgan::Error::Data(format!("{}: {e}", path.display())))
}

fn plot_err<E: std::fmt::Display>(path: &Path, e: E) -> CliError {
    CliError::Run(colourgan::Error::Data(format!("cannot draw {}: {e}", path.display())))
}

/// One table row per labelled report, in the given order.
pub fn write_eval_csv(path: &Path, rows: &[(String, EvalReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(EVAL_HEADER).map_err(|e| csv_err(path, e))?;
    for (label, r) in rows {
        w.write_record([
            label.clone(),
            format!("{:.6}", r.l1_ab),
            format_db(r.psnr_db),
            format!("{:.6}", r.l_perc),
            format!("{:.6}", r.intersection_a),
            format!("{:.6}", r.intersection_b),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed row of an evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub l1_ab: f64,
    pub psnr_db: f64,
    pub l_perc: f64,
    pub intersection_a: f64,
    pub intersection_b: f64,
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != EVAL_HEADER {
        return Err(CliError::Usage(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec[i]
                .parse()
                .map_err(|_| CliError::Usage(format!("{}: bad number '{}'", path.display(), &rec[i])))
        };
        rows.push(EvalRow {
            label: rec[0].to_string(),
            l1_ab: num(1)?,
            psnr_db: num(2)?,
            l_perc: num(3)?,
            intersection_a: num(4)?,
            intersection_b: num(5)?,
        });
    }
    Ok(rows)
}

/// `bin_edge,mass` pairs, one per bin (left edge).
pub fn write_histogram(path: &Path, h: &Histogram) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["bin_edge", "mass"]).map_err(|e| csv_err(path, e))?;
    for (edge, mass) in h.bin_edges().iter().zip(h.normalized()) {
        w.write_record([format!("{edge}"), format!("{mass:e}")])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Log-scale overlay of chrominance histograms, one panel per channel.
/// Each series is `(name, hist_a, hist_b)`.
pub fn plot_histograms(path: &Path, series: &[(&str, &Histogram, &Histogram)]) -> Result<(), CliError> {
    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let panels = root.split_evenly((1, 2));
    let floor = 1e-6f64;
    for (ch, panel) in panels.iter().enumerate() {
        let mut chart = ChartBuilder::on(panel)
            .caption(if ch == 0 { "a" } else { "b" }, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(-110f64..110f64, (floor..1f64).log_scale())
            .map_err(|e| plot_err(path, e))?;
        chart
            .configure_mesh()
            .y_desc("mass")
            .draw()
            .map_err(|e| plot_err(path, e))?;
        for (i, (name, ha, hb)) in series.iter().enumerate() {
            let h = if ch == 0 { ha } else { hb };
            let w = h.bin_width();
            let pts: Vec<(f64, f64)> = h
                .bin_edges()
                .iter()
                .zip(h.normalized())
                .map(|(&e, m)| (e + w / 2.0, m.max(floor)))
                .collect();
            let colour = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts, colour.stroke_width(2)))
                .map_err(|e| plot_err(path, e))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// Generator L1 and adversarial curves of several runs, overlaid.
pub fn plot_curves(path: &Path, runs: &[(String, Vec<EpochSummary>)]) -> Result<(), CliError> {
    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let panels = root.split_evenly((1, 2));
    let max_epoch = runs
        .iter()
        .flat_map(|(_, c)| c.iter().map(|s| s.epoch))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let metrics: [(&str, fn(&EpochSummary) -> f64); 2] = [("g_l1", |s| s.g_l1), ("g_adv", |s| s.g_adv)];
    for (panel, (title, get)) in panels.iter().zip(metrics) {
        let top = runs
            .iter()
            .flat_map(|(_, c)| c.iter().map(get))
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-3)
            * 1.1;
        let mut chart = ChartBuilder::on(panel)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..max_epoch, 0f64..top)
            .map_err(|e| plot_err(path, e))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .draw()
            .map_err(|e| plot_err(path, e))?;
        for (i, (label, curve)) in runs.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    curve.iter().map(|s| (s.epoch as f64, get(s))),
                    colour.stroke_width(2),
                ))
                .map_err(|e| plot_err(path, e))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}
