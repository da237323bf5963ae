use std::path::Path;

use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::run::write_atomic;

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }
}

/// Long-format CSV: `series,<x_label>,<y_label>`.
pub fn series_csv(series: &[Series], x_label: &str, y_label: &str) -> String {
    let mut s = format!("series,{x_label},{y_label}\n");
    for ser in series {
        for (x, y) in &ser.points {
            s.push_str(&format!("{},{x},{y:.6}\n", ser.name));
        }
    }
    s
}

/// Writes `<stem>.svg` and `<stem>.csv`.
pub fn line_chart(stem: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: (f64, f64)) -> Result<()> {
    let csv = stem.with_extension("csv");
    write_atomic(&csv, series_csv(series, x_label, y_label).as_bytes())?;
    let svg_path = stem.with_extension("svg");
    let (mut x0, mut x1) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        let plot_err = |e: &dyn std::fmt::Display| HarnessError::Plot(e.to_string());
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, y_range.0..y_range.1)
            .map_err(|e| plot_err(&e))?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| plot_err(&e))?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        if !series.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| plot_err(&e))?;
        }
        root.present().map_err(|e| plot_err(&e))?;
    }
    write_atomic(&svg_path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("curve");
        let s = vec![Series::new("student", vec![(0.0, 0.1), (10.0, 0.5)]), Series::new("teacher", vec![(0.0, 0.3)])];
        line_chart(&stem, "t", "step", "mAP", &s, (0.0, 1.0)).unwrap();
        let svg = std::fs::read_to_string(stem.with_extension("svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("student"));
        let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(2).unwrap(), "student,10,0.500000");
    }
}
