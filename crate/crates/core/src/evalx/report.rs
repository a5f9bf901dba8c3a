use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::error::{OceanError, Result};

pub const METRICS_COLUMNS: [&str; 8] = [
    "dataset",
    "config",
    "consensus",
    "accuracy",
    "f1_score",
    "game_length",
    "empty_slot",
    "slot_unique",
];

/// A named series for a learning-curve plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Writes `metrics.csv` and one `<curve>.svg` per curve into `out_dir`.
pub fn emit_report(reports: &[MetricsReport], curves: &[Curve], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(OceanError::invalid("report needs at least one metrics row"));
    }
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut written = vec![csv_path];
    for c in curves {
        let p = out_dir.join(format!("{}.svg", c.name));
        fs::write(&p, curve_svg(c))?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(OceanError::invalid(format!("unexpected metrics columns {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsReport>, _>>()?)
}

fn curve_svg(c: &Curve) -> String {
    let (w, h, m) = (480.0, 300.0, 40.0);
    let finite: Vec<(f64, f64)> = c.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let lo = |f: fn(&(f64, f64)) -> f64| finite.iter().map(f).fold(f64::INFINITY, f64::min);
    let hi = |f: fn(&(f64, f64)) -> f64| finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(|p| p.0), hi(|p| p.0), lo(|p| p.1), hi(|p| p.1));
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{m}\" y=\"20\">{}</text>", c.name);
    let _ = writeln!(
        s,
        "<path d=\"M{m} {m} V{} H{}\" fill=\"none\" stroke=\"black\"/>",
        h - m,
        w - m
    );
    if !finite.is_empty() {
        let pts: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">{y1:.4}</text>", m + 4.0);
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">{y0:.4}</text>", h - m);
        let _ = writeln!(s, "<text x=\"{m}\" y=\"{}\">{x0}</text>", h - m + 16.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{x1}</text>", w - m - 20.0, h - m + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
