//! CSV artifacts with matching readers, and hand-written SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::interpret::CuiCurve;
use crate::train::EpochStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl From<&EpochStats> for HistoryRow {
    fn from(e: &EpochStats) -> Self {
        Self {
            epoch: e.epoch,
            loss: e.loss,
            accuracy: e.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuiRow {
    pub layer_index: usize,
    pub layer_name: String,
    pub cui_value: f64,
    /// `general` or `class:<id>`.
    pub scope: String,
    pub reduction: String,
}

pub fn cui_rows(curve: &CuiCurve, scope: &str) -> Vec<CuiRow> {
    curve
        .layers
        .iter()
        .zip(&curve.layer_names)
        .zip(&curve.values)
        .map(|((&layer_index, name), &cui_value)| CuiRow {
            layer_index,
            layer_name: name.clone(),
            cui_value,
            scope: scope.to_string(),
            reduction: curve.reduction.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeRow {
    pub layer_index: usize,
    pub layer_name: String,
    pub output_elements: usize,
    pub cde_candidate: bool,
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
    fs::write(path, bytes)
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> io::Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(io::Error::other)?;
    r.deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerShape {
    Circle,
    Square,
    Star,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
}

#[derive(Debug, Clone)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub shape: MarkerShape,
    pub color: &'static str,
}

#[derive(Debug, Clone, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
    /// Tick labels at integer x positions.
    pub x_ticks: Vec<(f64, String)>,
    /// Horizontal reference lines `(y, label)`.
    pub references: Vec<(f64, String)>,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(self.markers.iter().map(|m| m.x));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.markers.iter().map(|m| m.y))
            .chain(self.references.iter().map(|r| r.0));
        let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        y0 = y0.min(0.0);
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0, y1 + 0.05 * (y1 - y0))
    }

    /// Deterministic SVG text.
    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{:.1},{:.1} V{:.1} H{:.1}" stroke="black" fill="none"/>"#,
            LEFT,
            TOP,
            TOP + ph,
            LEFT + pw
        );
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let y = sy(v);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                LEFT,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        for (x, label) in &self.x_ticks {
            let px = sx(*x);
            let _ = writeln!(
                s,
                r#"<text x="{px:.1}" y="{:.1}" text-anchor="end" transform="rotate(-45 {px:.1} {:.1})">{}</text>"#,
                TOP + ph + 14.0,
                TOP + ph + 14.0,
                escape(label)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 8.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (y, label) in &self.references {
            let py = sy(*y);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#888" stroke-dasharray="2,3"/><text x="{:.1}" y="{:.1}">{}</text>"##,
                LEFT,
                LEFT + pw,
                LEFT + pw + 4.0,
                py + 4.0,
                escape(label)
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let dash = if series.dashed { r#" stroke-dasharray="6,4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                pts.join(" "),
                series.color
            );
            let ly = TOP + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                LEFT + pw + 10.0,
                LEFT + pw + 30.0,
                series.color,
                LEFT + pw + 34.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        for m in &self.markers {
            let (px, py) = (sx(m.x), sy(m.y));
            let _ = match m.shape {
                MarkerShape::Circle => writeln!(
                    s,
                    r#"<circle cx="{px:.1}" cy="{py:.1}" r="5" fill="none" stroke="{}" stroke-width="2"/>"#,
                    m.color
                ),
                MarkerShape::Square => writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="none" stroke="{}" stroke-width="2"/>"#,
                    px - 5.0,
                    py - 5.0,
                    m.color
                ),
                MarkerShape::Star => {
                    let pts: Vec<String> = (0..10)
                        .map(|k| {
                            let r = if k % 2 == 0 { 8.0 } else { 3.5 };
                            let a = std::f64::consts::PI * k as f64 / 5.0 - std::f64::consts::FRAC_PI_2;
                            format!("{:.1},{:.1}", px + r * a.cos(), py + r * a.sin())
                        })
                        .collect();
                    writeln!(s, r#"<polygon points="{}" fill="{}"/>"#, pts.join(" "), m.color)
                }
            };
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let rows = vec![
            HistoryRow {
                epoch: 0,
                loss: 0.1 + 0.2,
                accuracy: None,
            },
            HistoryRow {
                epoch: 1,
                loss: 1e-300,
                accuracy: Some(0.5),
            },
        ];
        write_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss,accuracy\n0,0.30000000000000004,\n"));
        assert_eq!(read_csv::<HistoryRow>(&path).unwrap(), rows);
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let chart = Chart {
            title: "a < b".into(),
            series: vec![Series {
                label: "cui".into(),
                points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
                color: "black",
                dashed: true,
            }],
            markers: vec![Marker {
                x: 1.0,
                y: 3.0,
                shape: MarkerShape::Star,
                color: "red",
            }],
            ..Chart::default()
        };
        let svg = chart.to_svg();
        assert_eq!(svg, chart.to_svg());
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("stroke-dasharray=\"6,4\""));
        assert!(svg.contains("<polygon"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
