//! Minimal SVG scatter plots: predicted-vs-true volumes and the 2D latent
//! PCA projection. Hand-rolled so reports have no plotting dependency.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn around(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in it {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() || lo == hi {
                (lo - 1.0, lo + 1.0)
            } else {
                let pad = (hi - lo) * 0.05;
                (lo - pad, hi + pad)
            }
        };
        let (xmin, xmax) = span(&mut xs.clone());
        let (ymin, ymax) = span(&mut ys.clone());
        Self { xmin, xmax, ymin, ymax }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.xmin) / (self.xmax - self.xmin) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.ymin) / (self.ymax - self.ymin) * (H - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<rect x="{MARGIN}" y="{MARGIN}" width="{iw}" height="{ih}" fill="none" stroke="#444"/>
<text x="{cx}" y="28" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>
<text x="{cx}" y="{bly}" text-anchor="middle" font-family="sans-serif" font-size="13">{xlabel}</text>
<text x="18" y="{cy}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {cy})">{ylabel}</text>
"##,
        iw = W - 2.0 * MARGIN,
        ih = H - 2.0 * MARGIN,
        cx = W / 2.0,
        cy = H / 2.0,
        bly = H - 18.0,
    );
    s
}

fn axis_ticks(s: &mut String, frame: &Frame) {
    for i in 0..=4 {
        let fx = frame.xmin + (frame.xmax - frame.xmin) * i as f64 / 4.0;
        let fy = frame.ymin + (frame.ymax - frame.ymin) * i as f64 / 4.0;
        let _ = write!(
            s,
            r##"<text x="{px}" y="{ty}" text-anchor="middle" font-family="sans-serif" font-size="11">{fx:.0}</text>
<text x="{tx}" y="{py}" text-anchor="end" font-family="sans-serif" font-size="11">{fy:.0}</text>
"##,
            px = frame.px(fx),
            ty = H - MARGIN + 18.0,
            tx = MARGIN - 6.0,
            py = frame.py(fy) + 4.0,
        );
    }
}

/// Predicted-vs-true scatter with the identity line.
pub fn scatter_predicted_vs_true(path: &Path, points: &[(f64, f64)], title: &str) -> Result<()> {
    let lo = points.iter().flat_map(|&(t, p)| [t, p]).fold(f64::INFINITY, f64::min);
    let hi = points.iter().flat_map(|&(t, p)| [t, p]).fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame::around([lo, hi].into_iter(), [lo, hi].into_iter());
    let mut s = svg_open(title, "true volume (mL)", "predicted volume (mL)");
    axis_ticks(&mut s, &frame);
    let _ = write!(
        s,
        r##"<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="#999" stroke-dasharray="5 4"/>
"##,
        x1 = frame.px(frame.xmin),
        y1 = frame.py(frame.xmin),
        x2 = frame.px(frame.xmax),
        y2 = frame.py(frame.xmax),
    );
    for &(t, p) in points {
        let _ = write!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#1f77b4" fill-opacity="0.7"/>
"##,
            frame.px(t),
            frame.py(p),
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn volume_color(vol: f64, lo: f64, hi: f64) -> String {
    // blue (small) -> red (large)
    let t = if hi > lo { ((vol - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    format!("rgb({},60,{})", (40.0 + 200.0 * t) as u8, (240.0 - 200.0 * t) as u8)
}

/// Latent PCA scatter: dots for normal cases, crosses for splenomegaly,
/// colored from blue (small volume) to red (large).
pub fn scatter_latent_pca(
    path: &Path,
    coords: &[[f64; 2]],
    volumes: &[f64],
    splenomegaly: &[bool],
    title: &str,
) -> Result<()> {
    let frame =
        Frame::around(coords.iter().map(|c| c[0]), coords.iter().map(|c| c[1]));
    let lo = volumes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = volumes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = svg_open(title, "PC 1", "PC 2");
    axis_ticks(&mut s, &frame);
    for ((c, &vol), &spleno) in coords.iter().zip(volumes).zip(splenomegaly) {
        let (x, y) = (frame.px(c[0]), frame.py(c[1]));
        let color = volume_color(vol, lo, hi);
        if spleno {
            let _ = write!(
                s,
                r##"<path d="M {x0:.1} {y0:.1} L {x1:.1} {y1:.1} M {x0:.1} {y1:.1} L {x1:.1} {y0:.1}" stroke="{color}" stroke-width="2"/>
"##,
                x0 = x - 4.0,
                y0 = y - 4.0,
                x1 = x + 4.0,
                y1 = y + 4.0,
            );
        } else {
            let _ = write!(
                s,
                r##"<circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}" fill-opacity="0.8"/>
"##,
            );
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}
