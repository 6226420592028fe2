//! PNG, NPY and SVG writers.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use distillbev::harness::EpochMetrics;

use crate::Failure;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Grayscale PNG, each cell repeated `scale×scale` times.
pub fn write_png(
    path: &Path,
    pixels: &[u8],
    height: usize,
    width: usize,
    scale: usize,
) -> Result<(), Failure> {
    let (h, w) = (height * scale, width * scale);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(pixels[(r / scale) * width + c / scale]);
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| io_err(path, e))?;
    writer
        .write_image_data(&data)
        .map_err(|e| io_err(path, e))?;
    writer.finish().map_err(|e| io_err(path, e))
}

/// Min-max scaling to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Element type of an NPY array.
pub enum NpyData<'a> {
    U8(&'a [u8]),
    F64(&'a [f64]),
}

/// NPY version 1.0, C order, little endian.
pub fn write_npy(path: &Path, data: NpyData<'_>, shape: &[usize]) -> Result<(), Failure> {
    let descr = match data {
        NpyData::U8(_) => "|u1",
        NpyData::F64(_) => "<f8",
    };
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

type Metric = (&'static str, fn(&EpochMetrics) -> f64);

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

/// Learning curves of several runs, one panel per metric.
pub fn curves_svg(runs: &[(&str, &[EpochMetrics])]) -> String {
    let metrics: [Metric; 4] = [
        ("det_loss", |m| m.det_loss),
        ("l_dist", |m| m.l_dist),
        ("feature_mse_to_teacher", |m| m.feature_mse_to_teacher),
        ("synthetic_ap", |m| m.synthetic_ap),
    ];
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let (cols, rows) = (2.0, 2.0);
    let (w, h) = (
        cols * (PANEL_W + MARGIN) + MARGIN,
        rows * (PANEL_H + MARGIN) + MARGIN + 24.0,
    );
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, (name, _)) in runs.iter().enumerate() {
        let x = MARGIN + 140.0 * k as f64;
        let c = colors[k % colors.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="16" x2="{}" y2="16" stroke="{c}" stroke-width="2"/><text x="{}" y="20">{name}</text>"#,
            x + 20.0,
            x + 26.0
        );
    }
    for (p, (metric, get)) in metrics.iter().enumerate() {
        let ox = MARGIN + (p % 2) as f64 * (PANEL_W + MARGIN);
        let oy = 24.0 + MARGIN + (p / 2) as f64 * (PANEL_H + MARGIN);
        let values: Vec<f64> = runs.iter().flat_map(|(_, r)| r.iter().map(get)).collect();
        let epochs = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
        let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            (lo, hi) = (0.0, 1.0);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        let sx = |e: usize| ox + PANEL_W * e as f64 / (epochs.max(2) - 1) as f64;
        let sy = |v: f64| oy + PANEL_H * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            s,
            r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(s, r#"<text x="{ox}" y="{}">{metric}</text>"#, oy - 6.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#,
            ox - 4.0,
            oy + 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#,
            ox - 4.0,
            oy + PANEL_H
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">epoch {}</text>"#,
            ox + PANEL_W,
            oy + PANEL_H + 14.0,
            epochs.saturating_sub(1)
        );
        for (k, (_, rows)) in runs.iter().enumerate() {
            let pts: Vec<String> = rows
                .iter()
                .enumerate()
                .map(|(e, m)| format!("{:.2},{:.2}", sx(e), sy(get(m))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                colors[k % colors.len()],
                pts.join(" ")
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
