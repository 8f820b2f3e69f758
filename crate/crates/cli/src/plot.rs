use std::path::Path;

use plotters::prelude::*;
use update_core::dataset::CurveCondition;
use update_core::eval::CurveTable;

use crate::CliError;

/// Changed-partition accuracy against V2 training size, one line per
/// condition, averaged over updates.
pub(crate) fn curve_svg(table: &CurveTable, path: &Path) -> Result<(), CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let sizes = table.sizes();
    let series: Vec<(CurveCondition, Vec<(f64, f64)>)> = CurveCondition::ALL
        .into_iter()
        .map(|c| {
            let pts = sizes.iter().filter_map(|&s| table.average(s, c).map(|a| (s as f64, 100.0 * a))).collect();
            (c, pts)
        })
        .collect();
    let x_max = sizes.last().copied().unwrap_or(1) as f64 * 1.05;

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Changed-partition accuracy vs. V2 training size", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..x_max, 0.0..100.0)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("V2 training examples")
        .y_desc("accuracy on changed (%)")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (condition, pts)) in series.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let label = match condition {
            CurveCondition::Conflicting => "with conflicting V1 data",
            CurveCondition::OracleRemoved => "conflicting V1 data removed",
        };
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}
