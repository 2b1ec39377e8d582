//! Deterministic plot rendering: per-model score histograms and adversarial
//! example grids, drawn pixel-by-pixel so output bytes are stable across
//! platforms.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::harness::records::{Provenance, ReportBundle};
use crate::tensor::{save_png, Image};

const PLOT_W: u32 = 560;
const PLOT_H: u32 = 360;
const MARGIN_L: u32 = 42;
const MARGIN_B: u32 = 28;
const MARGIN_T: u32 = 12;
const MARGIN_R: u32 = 12;
const BINS: usize = 40;

fn group_color(p: Provenance) -> Rgb<u8> {
    match p {
        Provenance::CleanId => Rgb([70, 110, 220]),
        Provenance::AdvId => Rgb([220, 70, 70]),
        Provenance::Distal => Rgb([230, 140, 40]),
        Provenance::NaturalOod => Rgb([60, 160, 90]),
        Provenance::NoiseId => Rgb([130, 130, 130]),
    }
}

fn blend(img: &mut RgbImage, x: u32, y: u32, c: Rgb<u8>) {
    if x < img.width() && y < img.height() {
        let p = img.get_pixel_mut(x, y);
        for k in 0..3 {
            p.0[k] = ((p.0[k] as u16 + c.0[k] as u16) / 2) as u8;
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Render one score histogram per pool model into `dir`, overlaying every
/// provenance group present in the records and the model's threshold as a
/// dashed vertical line. Returns the written paths.
pub fn render_histograms(report: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut model_ids: Vec<&str> = Vec::new();
    for rec in &report.records {
        if !model_ids.contains(&rec.model_id.as_str()) {
            model_ids.push(&rec.model_id);
        }
    }
    if model_ids.is_empty() {
        eprintln!("warning: no records to render histograms from");
        return Ok(Vec::new());
    }

    let groups = [
        Provenance::CleanId,
        Provenance::AdvId,
        Provenance::Distal,
        Provenance::NaturalOod,
        Provenance::NoiseId,
    ];
    let plot_w = PLOT_W - MARGIN_L - MARGIN_R;
    let plot_h = PLOT_H - MARGIN_T - MARGIN_B;
    let mut written = Vec::new();

    for model_id in model_ids {
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));

        // axes
        for x in MARGIN_L..PLOT_W - MARGIN_R {
            img.put_pixel(x, PLOT_H - MARGIN_B, Rgb([0, 0, 0]));
        }
        for y in MARGIN_T..=PLOT_H - MARGIN_B {
            img.put_pixel(MARGIN_L, y, Rgb([0, 0, 0]));
        }
        // x-axis ticks at 0, 0.25, ..., 1.0
        for t in 0..=4 {
            let x = MARGIN_L + plot_w * t / 4;
            for dy in 1..=4 {
                img.put_pixel(x, PLOT_H - MARGIN_B + dy, Rgb([0, 0, 0]));
            }
        }

        let mut peak = 0usize;
        let mut histograms = Vec::new();
        for prov in groups {
            let scores: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.model_id == model_id && r.provenance == prov)
                .map(|r| r.ood_score)
                .collect();
            if scores.is_empty() {
                continue;
            }
            let mut bins = vec![0usize; BINS];
            for s in scores {
                let b = ((s.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
                bins[b] += 1;
            }
            peak = peak.max(*bins.iter().max().unwrap());
            histograms.push((prov, bins));
        }
        if histograms.is_empty() {
            continue;
        }

        for (prov, bins) in &histograms {
            let color = group_color(*prov);
            for (b, &count) in bins.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let x0 = MARGIN_L + 1 + (plot_w - 1) * b as u32 / BINS as u32;
                let x1 = MARGIN_L + 1 + (plot_w - 1) * (b + 1) as u32 / BINS as u32;
                let h = ((count as f64 / peak as f64) * (plot_h - 2) as f64).round() as u32;
                for x in x0..x1.max(x0 + 1) {
                    for dy in 0..h {
                        blend(&mut img, x, PLOT_H - MARGIN_B - 1 - dy, color);
                    }
                }
            }
        }

        // threshold: dashed vertical line
        if let Some(t) = report.thresholds.iter().find(|t| t.model_id == model_id) {
            let x = MARGIN_L + 1
                + ((t.tau.clamp(0.0, 1.0)) * (plot_w - 1) as f64).round() as u32;
            for y in (MARGIN_T..PLOT_H - MARGIN_B).step_by(6) {
                for dy in 0..3 {
                    if y + dy < PLOT_H - MARGIN_B {
                        img.put_pixel(x.min(PLOT_W - 1), y + dy, Rgb([0, 0, 0]));
                    }
                }
            }
        }

        // legend swatches, top-left, one per plotted group
        for (gi, (prov, _)) in histograms.iter().enumerate() {
            let y0 = MARGIN_T + 4 + gi as u32 * 8;
            for dx in 0..12 {
                for dy in 0..5 {
                    img.put_pixel(MARGIN_L + 6 + dx, y0 + dy, group_color(*prov));
                }
            }
        }

        let path = dir.join(format!("{}_hist.png", sanitize(model_id)));
        img.save(&path).map_err(|e| Error::Serialization(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}

/// Tile adversarial examples into one PNG grid with white gutters.
pub fn render_adv_grid(examples: &[(String, Image)], cols: usize, path: &Path) -> Result<()> {
    if examples.is_empty() || cols == 0 {
        return Err(Error::Validation("nothing to render into a grid".into()));
    }
    let (c, h, w) = examples[0].1.dim();
    for (_, img) in examples {
        if img.dim() != (c, h, w) {
            return Err(Error::Validation("grid images have mixed shapes".into()));
        }
    }
    let rows = examples.len().div_ceil(cols);
    let gut = 2usize;
    let big_h = rows * h + (rows + 1) * gut;
    let big_w = cols * w + (cols + 1) * gut;
    let mut big = Array3::from_elem((c, big_h, big_w), 1.0);
    for (i, (_, img)) in examples.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        let oy = gut + r * (h + gut);
        let ox = gut + col * (w + gut);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    big[[ch, oy + y, ox + x]] = img[[ch, y, x]];
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_png(&big, path)
}
