//! Static SVG line plots for per-channel diagnostics.

use cats_core::error::Result;
use std::path::Path;

pub struct Trace<'a> {
    pub label: &'a str,
    pub color: &'a str,
    /// (x, y) points on the shared time axis.
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 900.0;
const H: f64 = 360.0;
const MARGIN: f64 = 45.0;

/// Write one channel's traces; `kept_region` marks the input span that
/// survives the temporal cutoff.
pub fn write_channel_svg(
    path: &Path,
    title: &str,
    traces: &[Trace],
    kept_region: Option<(f64, f64)>,
    input_len: f64,
) -> Result<()> {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in traces {
        for &(x, y) in &t.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y_min) / (y_max - y_min) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    if let Some((a, b)) = kept_region {
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"#ccffcc\" stroke=\"green\" stroke-width=\"1\" opacity=\"0.5\"/>\n",
            sx(a),
            sx(b) - sx(a),
            H - 2.0 * MARGIN
        ));
    }
    // input/forecast divider
    svg.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{MARGIN}\" x2=\"{0:.1}\" y2=\"{1:.1}\" \
         stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
        sx(input_len),
        H - MARGIN
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\n",
        H - MARGIN,
        W - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{0:.1}\" stroke=\"black\"/>\n",
        H - MARGIN
    ));
    for t in traces {
        if t.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = t
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            t.color,
            pts.join(" ")
        ));
    }
    // legend
    let mut lx = MARGIN + 8.0;
    for t in traces {
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"10\" width=\"12\" height=\"12\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"20\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            t.color,
            lx + 16.0,
            t.label
        ));
        lx += 16.0 + 8.0 * t.label.len() as f64 + 24.0;
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" font-family=\"sans-serif\" \
         text-anchor=\"middle\">{title}</text>\n</svg>\n",
        W / 2.0,
        H - 8.0
    ));
    std::fs::write(path, svg)?;
    Ok(())
}
