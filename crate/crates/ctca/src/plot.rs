//! Minimal SVG line charts for metrics and sweep CSVs.

use std::fmt::Write as _;

use anyhow::{ensure, Context};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

/// Plots `columns` (all but the first when empty) against the first column.
/// NaN cells are skipped.
pub fn line_chart(header: &[String], rows: &[Vec<f64>], columns: &[String], title: &str) -> anyhow::Result<String> {
    ensure!(header.len() >= 2, "need an x column and at least one y column");
    let ys: Vec<usize> = if columns.is_empty() {
        (1..header.len()).collect()
    } else {
        columns
            .iter()
            .map(|c| header.iter().position(|h| h == c).with_context(|| format!("no column named {c:?}")))
            .collect::<anyhow::Result<_>>()?
    };
    let points = |j: usize| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r[0].is_finite() && r[j].is_finite()).map(|r| (r[0], r[j])).collect()
    };
    let all: Vec<(f64, f64)> = ys.iter().flat_map(|&j| points(j)).collect();
    ensure!(!all.is_empty(), "no finite points to plot");
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), b + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(&header[0]));
    for (k, &j) in ys.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts = points(j);
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = t + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#, r - 110.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, r - 94.0, ly, escape(&header[j]));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
