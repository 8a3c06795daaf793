//! Line charts from the TSV tables the harness commands write.

use std::path::Path;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use crate::UsageError;

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

/// Reads `columns` of a TSV as numbers, one vector per column.
fn read_columns(path: &Path, x: Option<&str>, ys: &[String]) -> Result<(String, Vec<f64>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| UsageError(format!("{} has no column {name:?}", path.display())))
    };
    let x_name = x.map(str::to_string).unwrap_or_else(|| headers.get(0).unwrap_or_default().to_string());
    let xi = find(&x_name)?;
    let yi: Vec<usize> = ys.iter().map(|y| find(y)).collect::<Result<_, _>>()?;
    let mut xs = Vec::new();
    let mut cols = vec![Vec::new(); yi.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let v = rec.get(i).unwrap_or_default();
            v.parse().map_err(|_| UsageError(format!("{}: {v:?} is not a number", path.display())).into())
        };
        xs.push(num(xi)?);
        for (c, &i) in cols.iter_mut().zip(&yi) {
            c.push(num(i)?);
        }
    }
    Ok((x_name, xs, cols))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

pub fn plot_tsv(input: &Path, out: &Path, x: Option<&str>, ys: &[String]) -> Result<()> {
    if ys.is_empty() || ys.len() > PALETTE.len() {
        bail!(UsageError(format!("plot draws between 1 and {} columns", PALETTE.len())));
    }
    let (x_name, xs, cols) = read_columns(input, x, ys)?;
    if xs.is_empty() {
        bail!(UsageError(format!("{} has no rows", input.display())));
    }
    let fold = |v: &mut dyn Iterator<Item = f64>| v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x0, x1) = padded(fold(&mut xs.iter().copied()).0, fold(&mut xs.iter().copied()).1);
    let (y0, y1) = {
        let (a, b) = fold(&mut cols.iter().flatten().copied());
        padded(a, b)
    };
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let root = SVGBackend::new(out, (640, 420)).into_drawing_area();
    let draw = || -> Result<(), Box<dyn std::error::Error + '_>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_name.as_str()).draw()?;
        for ((name, col), color) in ys.iter().zip(&cols).zip(PALETTE) {
            let pts: Vec<(f64, f64)> = xs.iter().copied().zip(col.iter().copied()).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow::anyhow!("drawing {}: {e}", out.display()))
}
