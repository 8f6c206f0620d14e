//! Result tables and plots.
//!
//! A [`Report`] is a list of titled sections, each holding rows with the
//! fixed column order **CLIP, PSNR, SSIM, MSSSIM, FID, IS**. Reports render
//! to CSV, JSON, and Markdown, and parse back from all three (CSV carries
//! no plan hash; the other two do). Markdown bolds the best value per
//! column within each section, judged over attack rows only — the `Benign`
//! and `Gaussian` baseline rows never compete. "Best" follows the
//! attack-goal convention: the lowest CLIP, PSNR, SSIM, MSSSIM, and IS,
//! and the highest FID.
//!
//! Loss traces render as small deterministic PNG line plots: the same
//! trace always produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use ldmrb_core::metrics::psnr_serde;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, IoError};

/// Errors from report rendering and parsing.
#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report is empty")]
    Empty,
    #[error("row `{label}` column {column} is not a number")]
    NonFinite { label: String, column: &'static str },
    #[error("report {format}: line {line}: {detail}")]
    Malformed {
        format: &'static str,
        line: usize,
        detail: String,
    },
}

/// Column labels in render order.
pub const COLUMNS: [&str; 6] = ["CLIP", "PSNR", "SSIM", "MSSSIM", "FID", "IS"];

/// Row labels that never compete for bolding.
pub fn is_baseline_label(label: &str) -> bool {
    label == "Benign" || label == "Gaussian"
}

/// One table row: a condition label and its six metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub condition: String,
    pub clip: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub msssim: f64,
    pub fid: f64,
    #[serde(rename = "is")]
    pub is_score: f64,
}

impl ReportRow {
    fn values(&self) -> [f64; 6] {
        [
            self.clip,
            self.psnr,
            self.ssim,
            self.msssim,
            self.fid,
            self.is_score,
        ]
    }
}

/// A titled group of rows (one experiment condition family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

impl ReportSection {
    /// Per column: the best attack value among non-baseline rows, or None
    /// when the section has no finite attack value in that column.
    /// FID is best-maximal, every other column best-minimal.
    fn best_values(&self) -> [Option<f64>; 6] {
        let mut best: [Option<f64>; 6] = [None; 6];
        for row in &self.rows {
            if is_baseline_label(&row.condition) {
                continue;
            }
            for (i, value) in row.values().into_iter().enumerate() {
                if value.is_nan() {
                    continue;
                }
                best[i] = Some(match best[i] {
                    None => value,
                    // FID is a distance from the reference set: larger
                    // means a stronger attack. All others are similarity
                    // or quality scores: smaller means stronger.
                    Some(b) if i == 4 => b.max(value),
                    Some(b) => b.min(value),
                });
            }
        }
        best
    }
}

/// A full report: optional plan hash plus sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_hash: Option<String>,
    pub sections: Vec<ReportSection>,
}

impl Report {
    #[must_use]
    pub fn new(plan_hash: Option<String>) -> Self {
        Self {
            plan_hash,
            sections: Vec::new(),
        }
    }

    /// Rejects empty reports, NaN cells, and labels that would corrupt the
    /// table syntax.
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.sections.is_empty() || self.sections.iter().all(|s| s.rows.is_empty()) {
            return Err(ReportError::Empty);
        }
        for section in &self.sections {
            for row in &section.rows {
                for (i, value) in row.values().into_iter().enumerate() {
                    if value.is_nan() {
                        return Err(ReportError::NonFinite {
                            label: row.condition.clone(),
                            column: COLUMNS[i],
                        });
                    }
                }
                if row.condition.contains('|') || row.condition.contains('\n') {
                    return Err(ReportError::Malformed {
                        format: "label",
                        line: 0,
                        detail: format!("condition `{}` contains table syntax", row.condition),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Formats one value the way every renderer and parser agrees on:
/// shortest-roundtrip decimal, with `inf` for infinity.
fn format_value(value: f64) -> String {
    format!("{value}")
}

fn parse_value(text: &str) -> Option<f64> {
    match text {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        other => other.parse().ok().filter(|v: &f64| !v.is_nan()),
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

const CSV_HEADER: &str = "section,condition,CLIP,PSNR,SSIM,MSSSIM,FID,IS";

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Renders the report as CSV (the plan hash is not part of this format).
pub fn render_csv(report: &Report) -> Result<String, ReportError> {
    report.validate()?;
    let mut out = String::new();
    if let Some(hash) = &report.plan_hash {
        let _ = writeln!(out, "# plan: {hash}");
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for section in &report.sections {
        for row in &section.rows {
            let _ = write!(
                out,
                "{},{}",
                csv_escape(&section.title),
                csv_escape(&row.condition)
            );
            for value in row.values() {
                let _ = write!(out, ",{}", format_value(value));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        if quoted {
            match c {
                '"' if chars.peek() == Some(&'"') => {
                    chars.next();
                    current.push('"');
                }
                '"' => quoted = false,
                other => current.push(other),
            }
        } else {
            match c {
                '"' => quoted = true,
                ',' => fields.push(std::mem::take(&mut current)),
                other => current.push(other),
            }
        }
    }
    fields.push(current);
    fields
}

/// Parses [`render_csv`] output back into a report; a leading `# plan:`
/// comment line restores the plan hash.
pub fn parse_csv(text: &str) -> Result<Report, ReportError> {
    let mut lines = text.lines().enumerate().peekable();
    let mut plan_hash = None;
    if let Some((_, line)) = lines.peek() {
        if let Some(hash) = line.strip_prefix("# plan: ") {
            plan_hash = Some(hash.trim().to_string());
            lines.next();
        }
    }
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        other => {
            return Err(ReportError::Malformed {
                format: "csv",
                line: 1,
                detail: format!(
                    "expected header `{CSV_HEADER}`, got `{}`",
                    other.map(|(_, l)| l).unwrap_or_default()
                ),
            })
        }
    }
    let mut report = Report::new(plan_hash);
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 8 {
            return Err(ReportError::Malformed {
                format: "csv",
                line: idx + 1,
                detail: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut values = [0f64; 6];
        for (i, field) in fields[2..].iter().enumerate() {
            values[i] = parse_value(field).ok_or_else(|| ReportError::Malformed {
                format: "csv",
                line: idx + 1,
                detail: format!("bad {} value `{field}`", COLUMNS[i]),
            })?;
        }
        let row = ReportRow {
            condition: fields[1].clone(),
            clip: values[0],
            psnr: values[1],
            ssim: values[2],
            msssim: values[3],
            fid: values[4],
            is_score: values[5],
        };
        match report.sections.last_mut() {
            Some(section) if section.title == fields[0] => section.rows.push(row),
            _ => report.sections.push(ReportSection {
                title: fields[0].clone(),
                rows: vec![row],
            }),
        }
    }
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Markdown
// ---------------------------------------------------------------------------

/// Renders the report as Markdown with per-section best-value bolding.
pub fn render_markdown(report: &Report) -> Result<String, ReportError> {
    report.validate()?;
    let mut out = String::new();
    if let Some(hash) = &report.plan_hash {
        let _ = writeln!(out, "Plan: {hash}\n");
    }
    for section in &report.sections {
        let _ = writeln!(out, "## {}\n", section.title);
        let _ = writeln!(out, "| Condition | {} |", COLUMNS.join(" | "));
        let _ = writeln!(out, "| --- | {} |", vec!["---"; COLUMNS.len()].join(" | "));
        let best = section.best_values();
        for row in &section.rows {
            let _ = write!(out, "| {} |", row.condition);
            let competes = !is_baseline_label(&row.condition);
            for (i, value) in row.values().into_iter().enumerate() {
                let text = format_value(value);
                if competes && best[i] == Some(value) {
                    let _ = write!(out, " **{text}** |");
                } else {
                    let _ = write!(out, " {text} |");
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses [`render_markdown`] output (bolding is stripped, not preserved).
pub fn parse_markdown(text: &str) -> Result<Report, ReportError> {
    let mut report = Report::new(None);
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(hash) = line.strip_prefix("Plan: ") {
            report.plan_hash = Some(hash.to_string());
            continue;
        }
        if let Some(title) = line.strip_prefix("## ") {
            report.sections.push(ReportSection {
                title: title.to_string(),
                rows: Vec::new(),
            });
            continue;
        }
        if !line.starts_with('|') {
            continue;
        }
        let cells: Vec<&str> = line
            .trim_matches('|')
            .split('|')
            .map(str::trim)
            .collect();
        if cells.len() != 7 {
            return Err(ReportError::Malformed {
                format: "markdown",
                line: idx + 1,
                detail: format!("expected 7 cells, got {}", cells.len()),
            });
        }
        if cells[0] == "Condition" || cells.iter().all(|c| c.chars().all(|ch| ch == '-')) {
            continue;
        }
        let section = report.sections.last_mut().ok_or(ReportError::Malformed {
            format: "markdown",
            line: idx + 1,
            detail: "table row before any section heading".to_string(),
        })?;
        let mut values = [0f64; 6];
        for (i, cell) in cells[1..].iter().enumerate() {
            let stripped = cell.trim_matches('*');
            values[i] = parse_value(stripped).ok_or_else(|| ReportError::Malformed {
                format: "markdown",
                line: idx + 1,
                detail: format!("bad {} value `{cell}`", COLUMNS[i]),
            })?;
        }
        section.rows.push(ReportRow {
            condition: cells[0].to_string(),
            clip: values[0],
            psnr: values[1],
            ssim: values[2],
            msssim: values[3],
            fid: values[4],
            is_score: values[5],
        });
    }
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// Renders the report as pretty JSON.
pub fn render_json(report: &Report) -> Result<String, ReportError> {
    report.validate()?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Parses [`render_json`] output.
pub fn parse_json(text: &str) -> Result<Report, ReportError> {
    let report: Report = serde_json::from_str(text)?;
    report.validate()?;
    Ok(report)
}

/// Writes `report.csv`, `report.json`, and `report.md` under `dir`.
pub fn render_report(dir: &Path, report: &Report) -> Result<(), ReportError> {
    let csv = render_csv(report)?;
    let json = render_json(report)?;
    let markdown = render_markdown(report)?;
    for (name, content) in [
        ("report.csv", csv),
        ("report.json", json),
        ("report.md", markdown),
    ] {
        let path = dir.join(name);
        imageio::ensure_parent(&path)?;
        std::fs::write(&path, content).map_err(|e| IoError::file(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss plots
// ---------------------------------------------------------------------------

const PLOT_WIDTH: usize = 360;
const PLOT_HEIGHT: usize = 220;
const PLOT_MARGIN: usize = 24;

struct Canvas {
    pixels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            pixels: vec![255; PLOT_WIDTH * PLOT_HEIGHT * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if (0..PLOT_WIDTH as i64).contains(&x) && (0..PLOT_HEIGHT as i64).contains(&y) {
            let base = (y as usize * PLOT_WIDTH + x as usize) * 3;
            self.pixels[base..base + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

/// Draws a loss trace as a fixed-size line plot and writes it as a PNG.
/// Purely a function of `losses`: identical traces give identical bytes.
pub fn write_loss_plot(path: &Path, losses: &[f64]) -> Result<(), ReportError> {
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return Err(ReportError::Malformed {
            format: "plot",
            line: 0,
            detail: "loss trace must be non-empty and finite".to_string(),
        });
    }
    let mut canvas = Canvas::new();
    let axis = [120u8, 120, 120];
    let trace = [31u8, 80, 154];
    let left = PLOT_MARGIN as i64;
    let bottom = (PLOT_HEIGHT - PLOT_MARGIN) as i64;
    let right = (PLOT_WIDTH - PLOT_MARGIN) as i64;
    let top = PLOT_MARGIN as i64;
    canvas.line((left, top), (left, bottom), axis);
    canvas.line((left, bottom), (right, bottom), axis);

    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let point = |i: usize, v: f64| -> (i64, i64) {
        let fx = if losses.len() > 1 {
            i as f64 / (losses.len() - 1) as f64
        } else {
            0.5
        };
        let fy = (v - lo) / span;
        (
            left + (fx * (right - left) as f64).round() as i64,
            bottom - (fy * (bottom - top) as f64).round() as i64,
        )
    };
    let mut previous: Option<(i64, i64)> = None;
    for (i, &v) in losses.iter().enumerate() {
        let p = point(i, v);
        if let Some(q) = previous {
            canvas.line(q, p, trace);
        } else {
            canvas.set(p.0, p.1, trace);
        }
        previous = Some(p);
    }

    imageio::ensure_parent(path)?;
    let buffer: image::RgbImage =
        image::ImageBuffer::from_raw(PLOT_WIDTH as u32, PLOT_HEIGHT as u32, canvas.pixels)
            .expect("buffer matches dimensions");
    buffer
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| {
            IoError::Codec {
                path: path.display().to_string(),
                source: e,
            }
            .into()
        })
}
