use std::path::Path;

use flowcast::metrics::ErrorHistogram;
use plotters::prelude::*;

use crate::CliError;

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("plot {}: {e}", path.display()))
}

/// Per-timestep MSE of one or more forecasts.
pub fn mse_curve(path: &Path, curves: &[(&str, &[f64])]) -> Result<(), CliError> {
    let err = plot_err(path);
    let len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    let ymax = curves
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.05;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MSE per forecast step", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(1f64..len as f64, 0f64..ymax)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("forecast step")
        .y_desc("MSE")
        .draw()
        .map_err(&err)?;
    let colors = [BLUE, RED, GREEN, MAGENTA];
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        chart
            .draw_series(LineSeries::new(
                curve.iter().enumerate().map(|(t, &v)| ((t + 1) as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(&err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Histogram of absolute point-wise errors.
pub fn error_histogram(path: &Path, hist: &ErrorHistogram) -> Result<(), CliError> {
    let err = plot_err(path);
    let xmax = hist.edges.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let ymax = hist.counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.05;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("|error|: mean {:.3e}, std {:.3e}", hist.mean, hist.std),
            ("sans-serif", 20),
        )
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..xmax, 0f64..ymax)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("absolute error")
        .y_desc("count")
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(hist.counts.iter().enumerate().map(|(i, &c)| {
            Rectangle::new([(hist.edges[i], 0.0), (hist.edges[i + 1], c as f64)], BLUE.mix(0.6).filled())
        }))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}
