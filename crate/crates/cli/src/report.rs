//! Tabular and plotted outputs: full-precision CSV, JSON, SVG scatter plots
//! and optimization traces.

use std::fmt::Write as _;

use anyhow::{bail, ensure, Result};
use embinvert_core::decoder::{MetricsRow, ScatterReport};
use embinvert_core::invert::TraceRecord;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// A CSV cell. Floats are written in shortest round-trip form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            // Display for f64 prints the shortest string that parses back
            // to the same value
            Cell::Float(v) => write!(f, "{v}"),
            Cell::Text(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        ensure!(row.len() == self.columns.len(), "row has {} cells for {} columns", row.len(), self.columns.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(ToString::to_string))?;
        }
        Ok(w.into_inner()?)
    }

    /// Rows as objects keyed by column name, in column order.
    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = Map::new();
                for (c, v) in self.columns.iter().zip(r) {
                    m.insert(c.clone(), serde_json::to_value(v).expect("cells serialize"));
                }
                Value::Object(m)
            })
            .collect();
        Value::Array(rows)
    }
}

/// `⟨𝓛⟩`, `⟨‖e₁−e₂‖²⟩`, `⟨ẽ₁·ẽ₂⟩` per configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<(String, MetricsRow)>,
}

pub const METRICS_COLUMNS: [&str; 5] = ["config", "count", "mean_loss", "mean_l2", "mean_cos"];

impl MetricsTable {
    pub fn push(&mut self, key: impl Into<String>, row: MetricsRow) -> Result<()> {
        let key = key.into();
        ensure!(
            row.mean_loss.is_finite() && row.mean_l2.is_finite() && row.mean_cos.is_finite(),
            "non-finite metrics for {key}"
        );
        ensure!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&row.mean_cos), "cosine {} out of range for {key}", row.mean_cos);
        self.rows.push((key, row));
        Ok(())
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&METRICS_COLUMNS);
        for (k, r) in &self.rows {
            t.rows.push(vec![
                k.as_str().into(),
                r.count.into(),
                r.mean_loss.into(),
                r.mean_l2.into(),
                r.mean_cos.into(),
            ]);
        }
        t
    }
}

/// Plot geometry shared by the SVG writer and its tests.
pub struct ScatterFrame {
    pub size: f64,
    pub margin: f64,
    pub max: f64,
}

impl ScatterFrame {
    pub fn for_report(r: &ScatterReport) -> Self {
        let max = r.points.iter().flat_map(|p| [p.feed_forward, p.iterative]).fold(0.0, f64::max);
        Self { size: 400.0, margin: 40.0, max: if max > 0.0 { max * 1.05 } else { 1.0 } }
    }

    /// SVG coordinates of the data point `(x, y)`.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let span = self.size - 2.0 * self.margin;
        (self.margin + span * x / self.max, self.size - self.margin - span * y / self.max)
    }
}

/// Iterative loss (y) against feed-forward loss (x) with the `y = x` line.
pub fn scatter_svg(r: &ScatterReport) -> Result<String> {
    if r.points.is_empty() {
        bail!("scatter plot needs at least one point");
    }
    let f = ScatterFrame::for_report(r);
    let (x0, y0) = f.map(0.0, 0.0);
    let (x1, y1) = f.map(f.max, f.max);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#, f.size)?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(s, r#"<line class="axis" x1="{x0:.3}" y1="{y0:.3}" x2="{x1:.3}" y2="{y0:.3}" stroke="black"/>"#)?;
    writeln!(s, r#"<line class="axis" x1="{x0:.3}" y1="{y0:.3}" x2="{x0:.3}" y2="{y1:.3}" stroke="black"/>"#)?;
    writeln!(
        s,
        r#"<line class="identity" x1="{x0:.3}" y1="{y0:.3}" x2="{x1:.3}" y2="{y1:.3}" stroke="gray" stroke-dasharray="4"/>"#
    )?;
    for p in &r.points {
        let (cx, cy) = f.map(p.feed_forward, p.iterative);
        writeln!(s, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="3" fill="steelblue"/>"#)?;
    }
    let mid = f.size / 2.0;
    writeln!(
        s,
        r#"<text x="{mid}" y="{}" text-anchor="middle" font-size="12">feed-forward loss</text>"#,
        f.size - 10.0
    )?;
    writeln!(
        s,
        r#"<text x="12" y="{mid}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {mid})">iterative loss</text>"#
    )?;
    writeln!(s, r#"<text x="{x1:.3}" y="{}" text-anchor="end" font-size="10">{:.4e}</text>"#, y0 + 14.0, f.max)?;
    s.push_str("</svg>\n");
    Ok(s)
}

/// Trace records as `{iter, loss, terms: {name: value}, l2_to_target, cos_to_target}`.
pub fn trace_json(trace: &[TraceRecord]) -> Value {
    Value::Array(
        trace
            .iter()
            .map(|t| {
                let terms: Map<String, Value> = t.terms.iter().map(|x| (x.name.clone(), json!(x.value))).collect();
                json!({
                    "iter": t.iter,
                    "loss": t.loss,
                    "terms": terms,
                    "weights": t.weights,
                    "step_size": t.step_size,
                    "l2_to_target": t.l2_to_target,
                    "cos_to_target": t.cos_to_target,
                })
            })
            .collect(),
    )
}

pub fn pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use embinvert_core::decoder::ScatterPoint;

    fn row(loss: f64) -> MetricsRow {
        MetricsRow { count: 3, mean_loss: loss, mean_l2: 0.1 + loss, mean_cos: 0.3 }
    }

    #[test]
    fn singleton_table_has_one_data_row() {
        let mut m = MetricsTable::default();
        m.push("filters=8", row(1.0)).unwrap();
        let csv = String::from_utf8(m.table().to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    }

    #[test]
    fn csv_reparses_to_the_source_values() {
        let mut m = MetricsTable::default();
        let values = [0.1 + 0.2, 1.0 / 3.0, 2.5e-17, 123456.789e10];
        for (i, v) in values.iter().enumerate() {
            m.push(format!("c{i}"), row(*v)).unwrap();
        }
        let bytes = m.table().to_csv().unwrap();
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        for (rec, v) in r.records().zip(values) {
            let rec = rec.unwrap();
            let back: f64 = rec[2].parse().unwrap();
            assert!((back - v).abs() <= 1e-12 * v.abs());
            assert_eq!(back, v);
        }
    }

    #[test]
    fn invalid_rows_are_refused() {
        let mut m = MetricsTable::default();
        assert!(m.push("nan", row(f64::NAN)).is_err());
        let mut r = row(1.0);
        r.mean_cos = 1.5;
        assert!(m.push("cos", r).is_err());
        assert!(Table::new(&["a", "b"]).push(vec![1.0.into()]).is_err());
    }

    #[test]
    fn points_on_the_diagonal_lie_on_the_identity_line() {
        let points: Vec<ScatterPoint> =
            [0.5, 1.0, 2.0].iter().map(|&v| ScatterPoint { feed_forward: v, iterative: v }).collect();
        let report = ScatterReport::from_points(points).unwrap();
        let svg = scatter_svg(&report).unwrap();
        let f = ScatterFrame::for_report(&report);
        let (x0, y0) = f.map(0.0, 0.0);
        let (x1, y1) = f.map(f.max, f.max);
        let circles: Vec<(f64, f64)> = svg
            .lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| {
                let attr = |name: &str| -> f64 {
                    let start = l.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
                    l[start..].split('"').next().unwrap().parse().unwrap()
                };
                (attr("cx"), attr("cy"))
            })
            .collect();
        assert_eq!(circles.len(), 3);
        for (cx, cy) in circles {
            // collinear with the identity segment, up to the 3-decimal rounding
            let cross = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0);
            assert!(cross.abs() < 1e-3 * (x1 - x0), "{cross}");
        }
        assert!(svg.contains("class=\"identity\""));
    }
}
