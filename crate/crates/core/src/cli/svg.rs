//! Minimal SVG 1.1 charts: histograms and grouped error bars.

use std::fmt::Write;

use crate::analysis::Histogram;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>
"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Histogram with an optional shaded band and a vertical marker, both in
/// data coordinates.
pub fn histogram(title: &str, x_label: &str, h: &Histogram, band: Option<(f64, f64)>, marker: Option<f64>) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (lo, hi) = (h.edges[0], h.edges[h.edges.len() - 1]);
    let (lo, hi) = match (band, marker) {
        (Some((a, b)), _) => (lo.min(a), hi.max(b)),
        (None, Some(m)) => (lo.min(m), hi.max(m)),
        _ => (lo, hi),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |v: f64| LEFT + (v - lo) / span * plot_w;
    let y_max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    axes(&mut out, x_label, "drivers", y_max);
    if let Some((a, b)) = band {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{TOP}" width="{:.1}" height="{plot_h}" fill="#e24a33" fill-opacity="0.2"/>"##,
            x(a),
            (x(b) - x(a)).max(1.0)
        );
    }
    for (i, &c) in h.counts.iter().enumerate() {
        let bar_h = c as f64 / y_max * plot_h;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}" stroke="white"/>"#,
            x(h.edges[i]),
            HEIGHT - BOTTOM - bar_h,
            (x(h.edges[i + 1]) - x(h.edges[i])).max(0.5),
            bar_h,
            PALETTE[0]
        );
    }
    if let Some(m) = marker {
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{TOP}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            x(m),
            x(m),
            HEIGHT - BOTTOM
        );
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(v),
            HEIGHT - BOTTOM + 16.0,
            tick(v)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub struct Series<'a> {
    pub name: &'a str,
    /// (mean, standard error) per group.
    pub points: Vec<(f64, f64)>,
}

/// Means with one-standard-error bars, one cluster per group.
pub fn error_bars(title: &str, y_label: &str, groups: &[String], series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|(m, e)| m + e))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    axes(&mut out, "pooled frames per driver", y_label, y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| HEIGHT - BOTTOM - v / y_max * plot_h;
    let slot = plot_w / groups.len().max(1) as f64;
    for (g, label) in groups.iter().enumerate() {
        let centre = LEFT + slot * (g as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{centre:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 16.0,
            escape(label)
        );
        for (k, s) in series.iter().enumerate() {
            let Some(&(m, e)) = s.points.get(g) else { continue };
            let cx = centre + (k as f64 - (series.len() as f64 - 1.0) / 2.0) * 18.0;
            let colour = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{colour}" stroke-width="2"/>"#,
                y(m - e),
                y(m + e)
            );
            let _ = writeln!(out, r#"<circle cx="{cx:.1}" cy="{:.1}" r="4" fill="{colour}"/>"#, y(m));
        }
    }
    for (k, s) in series.iter().enumerate() {
        let ly = TOP + 4.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{ly:.1}" r="4" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - RIGHT - 150.0,
            PALETTE[k % PALETTE.len()],
            WIDTH - RIGHT - 140.0,
            ly + 4.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}
