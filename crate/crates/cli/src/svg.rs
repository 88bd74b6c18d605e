//! Minimal static bar chart for part attention weights.

use std::fmt::Write;

const BAR_WIDTH: usize = 36;
const GAP: usize = 12;
const HEIGHT: usize = 200;
const MARGIN: usize = 40;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One bar per part, heights proportional to the weight on a `[0, 1]` axis.
pub fn attention_bar_chart(title: &str, names: &[String], weights: &[f64]) -> String {
    let width = 2 * MARGIN + weights.len() * (BAR_WIDTH + GAP);
    let total_h = HEIGHT + 3 * MARGIN + 60;
    let base = MARGIN + HEIGHT + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - MARGIN
    );
    for (i, (&w, name)) in weights.iter().zip(names).enumerate() {
        let h = (w.clamp(0.0, 1.0) * HEIGHT as f64).round() as usize;
        let x = MARGIN + i * (BAR_WIDTH + GAP) + GAP / 2;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{BAR_WIDTH}" height="{h}" fill="#4c72b0"/>"##,
            base - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{w:.3}</text>"#,
            x + BAR_WIDTH / 2,
            base - h - 4
        );
        let (tx, ty) = (x + BAR_WIDTH / 2, base + 12);
        let _ = writeln!(
            s,
            r#"<text x="{tx}" y="{ty}" transform="rotate(45 {tx} {ty})">{}</text>"#,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
