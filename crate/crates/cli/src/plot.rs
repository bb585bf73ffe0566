//! Deterministic SVG plots: per-run scatter colored by description-length
//! level, binned median curve with an IQR band, and DL isolines.

use crate::binning::{adaptive_bin_summary, Bin};
use crate::sweep::SweepRow;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Test loss vs model byte size.
    LossVsBytes,
    /// Description length (bytes) vs regularization strength.
    DlVsAlpha,
}

/// Description-length level of one run in bytes: model bytes plus data
/// bits at 8 bits per byte. Two runs with equal description length map
/// to the same isoline level by construction.
pub fn isoline_level(model_bytes: f64, data_nll_bits: f64) -> f64 {
    model_bytes + data_nll_bits / 8.0
}

/// Linear blue-to-red color ramp over [0,1].
fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 200.0 * t).round() as u8;
    let g = (60.0 + 40.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    let b = (220.0 - 180.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Color for a DL level given the observed level range; equal levels get
/// equal colors regardless of the rest of the data.
pub fn level_color(level: f64, lo: f64, hi: f64) -> String {
    if !(hi > lo) {
        return ramp_color(0.5);
    }
    ramp_color((level - lo) / (hi - lo))
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

const W: f64 = 800.0;
const H: f64 = 600.0;
const MARGIN: f64 = 60.0;

impl Frame {
    fn from_points(pts: &[(f64, f64)]) -> Frame {
        let mut f = Frame {
            x_lo: f64::INFINITY,
            x_hi: f64::NEG_INFINITY,
            y_lo: f64::INFINITY,
            y_hi: f64::NEG_INFINITY,
        };
        for &(x, y) in pts {
            f.x_lo = f.x_lo.min(x);
            f.x_hi = f.x_hi.max(x);
            f.y_lo = f.y_lo.min(y);
            f.y_hi = f.y_hi.max(y);
        }
        // Degenerate ranges (single point) get a symmetric pad.
        if !(f.x_hi > f.x_lo) {
            f.x_lo -= 0.5;
            f.x_hi += 0.5;
        }
        if !(f.y_hi > f.y_lo) {
            f.y_lo -= 0.5;
            f.y_hi += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_lo) / (self.x_hi - self.x_lo) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y_lo) / (self.y_hi - self.y_lo) * (H - 2.0 * MARGIN)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders the SVG document for the given rows. Failed rows (non-finite
/// metrics) are skipped. Output is a deterministic function of the input.
pub fn render_plot(rows: &[SweepRow], kind: PlotKind) -> String {
    // Coordinates on log10 axes; x must be positive for both kinds.
    let mut pts: Vec<(f64, f64, f64)> = Vec::new(); // (x, y, dl_level)
    for row in rows {
        let level = isoline_level(row.model_bytes as f64, row.data_nll_bits);
        let (x, y) = match kind {
            PlotKind::LossVsBytes => (row.model_bytes as f64, row.test_loss),
            PlotKind::DlVsAlpha => (row.alpha, row.description_length_bytes),
        };
        if x > 0.0 && x.is_finite() && y.is_finite() && y > 0.0 && level.is_finite() {
            pts.push((x.log10(), y.log10(), level));
        }
    }
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();

    if pts.is_empty() {
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">no plottable rows</text>"#, W / 2.0, H / 2.0).unwrap();
        writeln!(svg, "</svg>").unwrap();
        return svg;
    }

    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
    let frame = Frame::from_points(&xy);
    let lvl_lo = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let lvl_hi = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);

    // Axes.
    writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    )
    .unwrap();
    let (x_label, y_label) = match kind {
        PlotKind::LossVsBytes => ("log10 model bytes", "log10 test loss"),
        PlotKind::DlVsAlpha => ("log10 alpha", "log10 description length (bytes)"),
    };
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{x_label}</text>"#, W / 2.0, H - 15.0).unwrap();
    writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 18 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    for (lo, hi, horizontal) in [(frame.x_lo, frame.x_hi, true), (frame.y_lo, frame.y_hi, false)] {
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            if horizontal {
                writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, frame.px(v), H - MARGIN + 18.0, fmt_f(v)).unwrap();
            } else {
                writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#, MARGIN - 6.0, frame.py(v) + 4.0, fmt_f(v)).unwrap();
            }
        }
    }

    // DL isolines for the loss-vs-bytes view: straight level sets of
    // bytes + n*bits(y)/8 are curves in (log bytes, log loss); drawn as
    // polylines over an x-grid at five levels spanning the data.
    if kind == PlotKind::LossVsBytes && lvl_hi > lvl_lo {
        let n = rows.iter().map(|r| r.dataset_size).max().unwrap_or(0).max(1) as f64;
        for k in 0..5 {
            let level = lvl_lo + (lvl_hi - lvl_lo) * (k as f64 + 0.5) / 5.0;
            let mut path = Vec::new();
            for step in 0..=60 {
                let lx = frame.x_lo + (frame.x_hi - frame.x_lo) * step as f64 / 60.0;
                let bytes = 10f64.powf(lx);
                // level = bytes + n*bits/8 with bits = 0.5*log2(2*pi*e*y)
                let bits = 8.0 * (level - bytes) / n;
                let y = 2f64.powf(2.0 * bits) / (std::f64::consts::TAU * std::f64::consts::E);
                if y > 0.0 && y.is_finite() {
                    let ly = y.log10();
                    if ly >= frame.y_lo && ly <= frame.y_hi {
                        path.push(format!("{},{}", frame.px(lx), frame.py(ly)));
                    }
                }
            }
            if path.len() >= 2 {
                writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1" opacity="0.4"/>"#,
                    path.join(" "),
                    level_color(level, lvl_lo, lvl_hi)
                )
                .unwrap();
            }
        }
    }

    // Binned median curve with IQR band (log-space y like the scatter).
    let bin_input: Vec<(f64, f64)> =
        pts.iter().map(|p| (10f64.powf(p.0), 10f64.powf(p.1))).collect();
    let bins: Vec<Bin> = adaptive_bin_summary(&bin_input, 10, 0.1);
    if bins.len() >= 2 {
        let mut upper = Vec::new();
        let mut lower = Vec::new();
        let mut mid = Vec::new();
        for bin in &bins {
            let bx = frame.px(bin.x_median.log10());
            if bin.q1 > 0.0 && bin.q3 > 0.0 && bin.median > 0.0 {
                upper.push(format!("{},{}", bx, frame.py(bin.q3.log10())));
                lower.push(format!("{},{}", bx, frame.py(bin.q1.log10())));
                mid.push(format!("{},{}", bx, frame.py(bin.median.log10())));
            }
        }
        if mid.len() >= 2 {
            lower.reverse();
            writeln!(
                svg,
                r#"<polygon points="{} {}" fill="gray" opacity="0.25"/>"#,
                upper.join(" "),
                lower.join(" ")
            )
            .unwrap();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
                mid.join(" ")
            )
            .unwrap();
        }
    }

    // Scatter, colored by DL level.
    for (lx, ly, level) in &pts {
        writeln!(
            svg,
            r#"<circle cx="{}" cy="{}" r="4" fill="{}" opacity="0.8"/>"#,
            frame.px(*lx),
            frame.py(*ly),
            level_color(*level, lvl_lo, lvl_hi)
        )
        .unwrap();
    }
    writeln!(svg, "</svg>").unwrap();
    svg
}

pub fn emit_plot(rows: &[SweepRow], kind: PlotKind, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, render_plot(rows, kind))
}
