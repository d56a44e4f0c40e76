//! Minimal SVG line plots rendered from CSV columns.

use crate::error::{CliError, CliResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Parsed numeric CSV with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Format { what: "csv".into(), msg: "empty".into() })?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let row: Result<Vec<f64>, _> = l.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| CliError::Format { what: format!("csv row {}", i + 2), msg: e.to_string() })?;
            if row.len() != header.len() {
                return Err(CliError::Format { what: format!("csv row {}", i + 2), msg: "column count".into() });
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> CliResult<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("no column `{name}` (have {})", self.header.join(", "))))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Line plot of `ys` columns against `x`.
pub fn line_plot(table: &Table, x: &str, ys: &[&str], title: &str) -> CliResult<String> {
    let xv = table.column(x)?;
    let series: Vec<Vec<f64>> = ys.iter().map(|y| table.column(y)).collect::<CliResult<_>>()?;
    let (x0, x1) = bounds(xv.iter().copied());
    let (y0, y1) = bounds(series.iter().flatten().copied());
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
    svg.push_str(&format!(
        "<path d=\"M{m} {b} H{r} M{m} {b} V{m}\" stroke=\"black\" fill=\"none\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    for (v, anchor_y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        svg.push_str(&format!("<text x=\"{}\" y=\"{anchor_y:.1}\" text-anchor=\"end\">{}</text>\n", MARGIN - 4.0, fmt_tick(v)));
    }
    for (v, anchor_x) in [(x0, MARGIN), (x1, WIDTH - MARGIN)] {
        svg.push_str(&format!("<text x=\"{anchor_x:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", HEIGHT - MARGIN + 16.0, fmt_tick(v)));
    }
    svg.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", WIDTH / 2.0, HEIGHT - 8.0, escape(x)));
    for (k, (name, ys)) in ys.iter().zip(&series).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (i, (a, b)) in xv.iter().zip(ys).filter(|(a, b)| a.is_finite() && b.is_finite()).enumerate() {
            d.push_str(&format!("{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, sx(*a), sy(*b)));
        }
        svg.push_str(&format!("<path d=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"1.5\"/>\n", d.trim_end()));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * k as f64,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
