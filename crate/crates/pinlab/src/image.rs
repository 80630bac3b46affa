//! Binary PPM (P6) and PGM (P5) writers, 8 bits per sample.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use pinlab_core::dissect::{magnitude_map, ArtifactReport};
use pinlab_core::generator::{Stage, SynthesisTrace};
use pinlab_core::Tensor;

use crate::report::NormalizationRecord;

/// `[-1,1] -> 0..=255` via `(v+1)/2*255`, clamped and rounded.
pub fn to_byte(v: f32) -> u8 {
    let s = ((v as f64 + 1.0) * 0.5 * 255.0).round();
    if s.is_nan() {
        0
    } else {
        s.clamp(0.0, 255.0) as u8
    }
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        bail!("PPM needs 3 channels, got {c}");
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(image.channel(ch)[p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(pixels: &[u8], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width, "PGM pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

/// Grid of `cols` columns holding every channel of a `[C,H,W]` map, with
/// a one pixel gap. Each channel is scaled by its own min/max; a constant
/// channel renders as 0.
pub fn tile_channels(map: &Tensor<f32>) -> Result<(Vec<u8>, usize, usize, Vec<(f64, f64)>)> {
    let (c, h, w) = map.chw()?;
    let cols = (c as f64).sqrt().ceil().max(1.0) as usize;
    let rows = c.div_ceil(cols);
    let (ph, pw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut px = vec![0u8; ph * pw];
    let mut ranges = Vec::with_capacity(c);
    for ch in 0..c {
        let data = map.channel(ch);
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        ranges.push((lo, hi));
        let (r0, c0) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = data[y * w + x] as f64;
                let s = if hi > lo { (v - lo) / (hi - lo) * 255.0 } else { 0.0 };
                px[(r0 + y) * pw + c0 + x] = s.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok((px, ph, pw, ranges))
}

/// One PGM per site and stage, named `trace_s{site}_{stage}.pgm`, plus the
/// per-channel ranges for `normalization.csv`.
pub fn save_trace_panels(dir: &Path, trace: &SynthesisTrace<f32>) -> Result<Vec<NormalizationRecord>> {
    let mut rows = Vec::new();
    for rec in &trace.records {
        let (px, h, w, ranges) = tile_channels(&rec.map)?;
        let name = format!("trace_s{}_{}.pgm", rec.site, rec.stage.name());
        write_file(&dir.join(name), &encode_pgm(&px, h, w))?;
        rows.extend(ranges.into_iter().enumerate().map(|(ch, (min, max))| NormalizationRecord {
            site: rec.site,
            stage: rec.stage.name(),
            channel: ch,
            min,
            max,
        }));
    }
    Ok(rows)
}

/// Cross-channel mean magnitude at the report's site scaled to `0..=191`,
/// with every flagged pixel set to 255.
pub fn region_overlay(trace: &SynthesisTrace<f32>, report: &ArtifactReport) -> Result<(Vec<u8>, usize, usize)> {
    let (mag, h, w) = magnitude_map(trace.get(report.site, Stage::PostNorm)?)?;
    let hi = mag.iter().copied().fold(0.0, f64::max);
    let mut px: Vec<u8> = mag
        .iter()
        .map(|&m| if hi > 0.0 { (m / hi * 191.0).round() as u8 } else { 0 })
        .collect();
    for r in &report.regions {
        for &(y, x) in &r.pixels {
            px[y * w + x] = 255;
        }
    }
    Ok((px, h, w))
}
