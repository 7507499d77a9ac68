//! Static SVG figures: cumulative value paths and rolling score series.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use plotters::prelude::*;

use crate::error::{Error, Result};

const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

fn year_fraction(d: NaiveDate) -> f64 {
    d.year() as f64 + (d.ordinal0() as f64) / 366.0
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn draw_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Format(format!("plot: {e:?}"))
}

/// One named line; `x` in fractional years.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

impl<'a> Series<'a> {
    /// Value path `V_0 = 1, V_1, …` drawn against the dates of `V_1, …`.
    pub fn value_path(name: &'a str, dates: &[NaiveDate], path: &[f64]) -> Self {
        let points = dates.iter().zip(&path[1..]).map(|(d, v)| (year_fraction(*d), *v)).collect();
        Self { name, points }
    }

    /// Values keyed by the last year of a rolling window.
    pub fn yearly(name: &'a str, rows: &[(i32, f64)]) -> Self {
        Self {
            name,
            points: rows.iter().map(|(y, v)| (*y as f64 + 1.0, *v)).collect(),
        }
    }
}

/// Line chart with a legend, written as SVG.
pub fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series<'_>]) -> Result<()> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("year")
        .y_desc(y_label)
        .x_label_formatter(&|x| format!("{x:.0}"))
        .draw()
        .map_err(draw_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(s.name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperLeft)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
