//! SVG line chart of a sweep.

use std::path::Path;

use cada::{CadaError, Result};
use plotters::prelude::*;

fn plot_err(e: impl std::fmt::Display) -> CadaError {
    CadaError::Validation(format!("plot: {e}"))
}

/// Rank-1 against sweep settings, one point per setting in order.
pub fn rank1_chart(path: &Path, title: &str, x_label: &str, points: &[(String, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = points.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..1f64)
        .map_err(plot_err)?;
    let labels: Vec<String> = points.iter().map(|(s, _)| s.clone()).collect();
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("Rank-1")
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    let series: Vec<(f64, f64)> = points.iter().enumerate().map(|(i, (_, y))| (i as f64, *y)).collect();
    chart.draw_series(LineSeries::new(series.clone(), &BLUE)).map_err(plot_err)?;
    chart
        .draw_series(series.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
