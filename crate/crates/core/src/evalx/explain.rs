use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpisodeLog, MaskBox};
use crate::error::{OceanError, Result};
use crate::game::{ClaimView, EndStatus};
use crate::numcore::Tensor;
use crate::scenegen::Dataset;

pub const EXPLANANDUM_SCHEMA: &str = "ocean-explanandum/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub step: usize,
    pub player: usize,
    pub slot: usize,
    pub claim: usize,
    pub confidence: f64,
    pub mask_box: MaskBox,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalBlock {
    pub claims: [ClaimView; 2],
    pub prediction: usize,
    pub status: EndStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub schema: String,
    pub scene_id: u64,
    pub label: usize,
    pub class_names: Vec<String>,
    pub turns: Vec<TurnRecord>,
    #[serde(rename = "final")]
    pub final_block: FinalBlock,
}

impl ExplanationRecord {
    pub fn from_log(log: &EpisodeLog, class_names: &[String]) -> Self {
        ExplanationRecord {
            schema: EXPLANANDUM_SCHEMA.to_string(),
            scene_id: log.scene_id,
            label: log.label,
            class_names: class_names.to_vec(),
            turns: log
                .arguments
                .iter()
                .map(|a| TurnRecord {
                    step: a.step,
                    player: a.player,
                    slot: a.slot,
                    claim: a.claim,
                    confidence: a.confidence,
                    mask_box: a.mask_box,
                    empty: a.empty,
                })
                .collect(),
            final_block: FinalBlock {
                claims: log.final_claims,
                prediction: log.prediction,
                status: log.status,
            },
        }
    }

    fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"))
    }
}

/// Writes `explanandum_<id>.json` and `explanandum_<id>.svg` into `out_dir`.
pub fn export_explanation(log: &EpisodeLog, ds: &Dataset, class_names: &[String], out_dir: &Path) -> Result<(ExplanationRecord, PathBuf, PathBuf)> {
    let idx = ds
        .scenes
        .iter()
        .position(|s| s.id == log.scene_id)
        .ok_or_else(|| OceanError::invalid(format!("scene {} is not in the dataset", log.scene_id)))?;
    let record = ExplanationRecord::from_log(log, class_names);
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join(format!("explanandum_{}.json", log.scene_id));
    fs::write(&json, serde_json::to_string_pretty(&record)?)?;
    let svg = out_dir.join(format!("explanandum_{}.svg", log.scene_id));
    fs::write(&svg, composite_svg(&record, &ds.images[idx]))?;
    Ok((record, json, svg))
}

pub fn read_explanation(path: &Path) -> Result<ExplanationRecord> {
    let rec: ExplanationRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
    if rec.schema != EXPLANANDUM_SCHEMA {
        return Err(OceanError::invalid(format!("unknown explanation schema `{}`", rec.schema)));
    }
    Ok(rec)
}

const PANEL: usize = 160;
const GAP: usize = 12;
const CAPTION: usize = 40;

fn image_group(image: &Tensor<f32>, x: usize, y: usize, out: &mut String) {
    let r = image.dim(1);
    let px = PANEL as f64 / r as f64;
    let d = image.data();
    let _ = writeln!(out, "<g transform=\"translate({x},{y}) scale({px:.4})\" shape-rendering=\"crispEdges\">");
    for row in 0..r {
        for col in 0..r {
            let c = |ch: usize| (d[ch * r * r + row * r + col].clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(out, "<rect x=\"{col}\" y=\"{row}\" width=\"1\" height=\"1\" fill=\"#{:02x}{:02x}{:02x}\"/>", c(0), c(1), c(2));
        }
    }
    out.push_str("</g>\n");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per argument with the selected slot boxed, the dialogue as
/// captions, and the outcome underneath.
fn composite_svg(rec: &ExplanationRecord, image: &Tensor<f32>) -> String {
    let r = image.dim(1) as f64;
    let k = rec.turns.len().max(1);
    let width = k * (PANEL + GAP) + GAP;
    let height = PANEL + 2 * CAPTION + 2 * GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">"
    );
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    let colors = ["#d62728", "#1f77b4"];
    for (i, t) in rec.turns.iter().enumerate() {
        let x = GAP + i * (PANEL + GAP);
        image_group(image, x, GAP, &mut s);
        let scale = PANEL as f64 / r;
        let b = t.mask_box;
        let dash = if t.empty { " stroke-dasharray=\"4 3\"" } else { "" };
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{dash}/>",
            x as f64 + b.x0 as f64 * scale,
            GAP as f64 + b.y0 as f64 * scale,
            (b.x1 - b.x0) as f64 * scale,
            (b.y1 - b.y0) as f64 * scale,
            colors[t.player % 2]
        );
        let empty = if t.empty { " (empty)" } else { "" };
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" fill=\"{}\">P{} slot {}{empty}</text>",
            PANEL + GAP + 14,
            colors[t.player % 2],
            t.player + 1,
            t.slot
        );
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\">{} {:.2}</text>",
            PANEL + GAP + 28,
            escape(&rec.class_name(t.claim)),
            t.confidence
        );
    }
    let f = &rec.final_block;
    let _ = writeln!(
        s,
        "<text x=\"{GAP}\" y=\"{}\">prediction: {} ({:?}); label: {}</text>",
        height - GAP,
        escape(&rec.class_name(f.prediction)),
        f.status,
        escape(&rec.class_name(rec.label))
    );
    s.push_str("</svg>\n");
    s
}
