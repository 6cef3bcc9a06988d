use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{normalize_columns, LossMatrix};
use crate::{Error, Result};

const CELL_W: usize = 64;
const CELL_H: usize = 28;
const LEFT: usize = 72;
const TOP: usize = 48;
// normalized values at or above this get the darkest color
const SATURATE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub raw_csv: PathBuf,
    pub normalized_csv: PathBuf,
    pub svg: PathBuf,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn color(v: f64) -> String {
    if !v.is_finite() {
        return "#cccccc".into();
    }
    let t = ((v - 1.0) / (SATURATE - 1.0)).clamp(0.0, 1.0);
    let lo = [255.0, 247.0, 236.0];
    let hi = [179.0, 0.0, 0.0];
    let c: Vec<u8> = (0..3).map(|i| (lo[i] + t * (hi[i] - lo[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Standalone SVG of an already normalized matrix.
pub fn heatmap_svg(normalized: &LossMatrix) -> String {
    let w = LEFT + CELL_W * normalized.columns.len() + 8;
    let h = TOP + CELL_H * normalized.rows.len() + 8;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (j, c) in normalized.columns.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 10, c.name()).unwrap();
    }
    for (i, (r, vals)) in normalized.rows.iter().zip(&normalized.values).enumerate() {
        let y = TOP + i * CELL_H;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4,
            escape(r)
        )
        .unwrap();
        for (j, &v) in vals.iter().enumerate() {
            let x = LEFT + j * CELL_W;
            writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="white"/>"#,
                color(v)
            )
            .unwrap();
            let label = if v.is_finite() { format!("{v:.2}") } else { "-".into() };
            let ink = if v.is_finite() && v >= 1.6 { "white" } else { "black" };
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{label}</text>"#,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `raw.csv`, `normalized.csv` and `heatmap.svg` into `dir`.
pub fn emit_heatmap(matrix: &LossMatrix, dir: &Path) -> Result<HeatmapFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let normalized = normalize_columns(matrix)?;
    let files = HeatmapFiles {
        raw_csv: dir.join("raw.csv"),
        normalized_csv: dir.join("normalized.csv"),
        svg: dir.join("heatmap.svg"),
    };
    matrix.write_csv(&files.raw_csv)?;
    normalized.write_csv(&files.normalized_csv)?;
    std::fs::write(&files.svg, heatmap_svg(&normalized)).map_err(|e| Error::io(&files.svg, e))?;
    Ok(files)
}
