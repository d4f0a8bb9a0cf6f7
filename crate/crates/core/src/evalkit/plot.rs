use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::mean_stderr;
use crate::error::{Error, Result};

/// A numeric CSV: header names and one row per line, blank or
/// non-numeric cells read as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub path: PathBuf,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Validation(format!("{}: missing column {name:?}", self.path.display())))?;
        Ok(self.rows.iter().map(|r| r.get(idx).copied().flatten()).collect())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: "empty CSV".into() })?;
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 2,
                msg: format!("expected {} cells, found {}", columns.len(), cells.len()),
            });
        }
        rows.push(cells.iter().map(|c| c.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: path.into(), line: 2, msg: "CSV has no data rows".into() });
    }
    Ok(MetricsTable { path: path.into(), columns, rows })
}

/// Mean and standard error per row index over the series that have a value there.
fn banded(series: &[Vec<Option<f64>>]) -> Vec<Option<(f64, f64)>> {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = series.iter().filter_map(|s| s.get(i).copied().flatten()).collect();
            (!vals.is_empty()).then(|| mean_stderr(&vals))
        })
        .collect()
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const MAX_POINTS: usize = 500;

/// Renders one panel per metric into a standalone SVG: the mean curve over
/// all input files with a shaded ± standard-error band. The x axis is the
/// `episode` column when present, otherwise the row index.
pub fn emit_plots(inputs: &[PathBuf], metrics: &[&str], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("no metrics files to plot".into()));
    }
    if metrics.is_empty() {
        return Err(Error::Config("no metric columns requested".into()));
    }
    let tables = inputs.iter().map(|p| read_metrics_csv(p)).collect::<Result<Vec<_>>>()?;
    let longest = tables.iter().max_by_key(|t| t.rows.len()).expect("nonempty");
    let xs: Vec<f64> = match longest.column("episode") {
        Ok(col) => col.iter().enumerate().map(|(i, v)| v.unwrap_or(i as f64)).collect(),
        Err(_) => (0..longest.rows.len()).map(|i| i as f64).collect(),
    };

    let height = metrics.len() as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}" font-family="sans-serif" font-size="12">"#,
        w = PANEL_W + 2.0 * MARGIN
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, metric) in metrics.iter().enumerate() {
        let series = tables.iter().map(|t| t.column(metric)).collect::<Result<Vec<_>>>()?;
        let band = banded(&series);
        let top = MARGIN + k as f64 * (PANEL_H + MARGIN);
        panel(&mut svg, metric, tables.len(), &xs, &band, top);
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}

fn panel(svg: &mut String, title: &str, n_files: usize, xs: &[f64], band: &[Option<(f64, f64)>], top: f64) {
    let stride = band.len().div_ceil(MAX_POINTS).max(1);
    let pts: Vec<(f64, f64, f64)> = band
        .iter()
        .enumerate()
        .step_by(stride)
        .filter_map(|(i, b)| b.map(|(m, se)| (xs.get(i).copied().unwrap_or(i as f64), m, se)))
        .collect();
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}">{} (mean ± s.e., {} run(s))</text>"#, top - 8.0, title, n_files);
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
    );
    if pts.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}">no data</text>"#, MARGIN + 10.0, top + 20.0);
        return;
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) =
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1 - p.2), b.max(p.1 + p.2)));
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + if x1 > x0 { (x - x0) / (x1 - x0) * PANEL_W } else { PANEL_W / 2.0 };
    let sy = |y: f64| top + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;

    let mut poly = String::new();
    for p in &pts {
        let _ = write!(poly, "{:.2},{:.2} ", sx(p.0), sy(p.1 + p.2));
    }
    for p in pts.iter().rev() {
        let _ = write!(poly, "{:.2},{:.2} ", sx(p.0), sy(p.1 - p.2));
    }
    let _ = writeln!(svg, r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##, poly.trim_end());
    let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
    let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##, line.join(" "));
    for (v, y) in [(y0, top + PANEL_H), (y1, top + 10.0)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="{anchor}">{v}</text>"#, sx(v), top + PANEL_H + 14.0);
    }
}
