// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal standalone SVG bar charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Vertical bars scaled to the largest absolute value. Non-finite values
/// are drawn as zero-height bars.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let n = values.len().max(1) as f64;
    let max = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 {
        (HEIGHT - 2.0 * MARGIN) / max
    } else {
        0.0
    };
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let base = HEIGHT - MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        MARGIN / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = if v.is_finite() { v.abs() * scale } else { 0.0 };
        let x = MARGIN + i as f64 * slot + slot * 0.1;
        let w = slot * 0.8;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="#4a78b0"/>"##,
            base - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            x + w / 2.0,
            base + 14.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="9">{v:.4}</text>"#,
            x + w / 2.0,
            base - h - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
