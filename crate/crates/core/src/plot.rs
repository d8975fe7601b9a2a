// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG charts: line plots, bar charts and tables.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Points are drawn in increasing `x` order.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (y0, y1) = range(pts.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title, W, H);
    let _ = writeln!(
        out,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label:.3}</text>"#, sx(v), H - MARGIN + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    if pts.len() > 1 {
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, d.join(" "));
    }
    for &(x, y) in &pts {
        let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, sx(x), sy(y));
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per entry, in the given order.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let n = bars.len().max(1) as f64;
    let width = (MARGIN * 2.0 + 40.0 * n).max(W);
    let (_, y1) = range(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let slot = (width - 2.0 * MARGIN) / n;
    let mut out = String::new();
    header(&mut out, title, width, H);
    let base = H - MARGIN;
    let _ = writeln!(out, r#"<path d="M{MARGIN} {MARGIN} V{base} H{}" fill="none" stroke="black"/>"#, width - MARGIN);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = if y1 > 0.0 { v.max(0.0) / y1 * (H - 2.0 * MARGIN) } else { 0.0 };
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let _ = writeln!(
            out,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#2ca02c"/>"##,
            base - h,
            slot * 0.7
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            base + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn table(title: &str, columns: &[&str], rows: &[Vec<String>]) -> String {
    let row_h = 18.0;
    let col_w = 120.0;
    let width = (col_w * columns.len() as f64 + 20.0).max(200.0);
    let height = 40.0 + row_h * (rows.len() + 1) as f64;
    let mut out = String::new();
    header(&mut out, title, width, height);
    for (r, cells) in std::iter::once(columns.iter().map(|c| c.to_string()).collect::<Vec<_>>())
        .chain(rows.iter().cloned())
        .enumerate()
    {
        let y = 40.0 + r as f64 * row_h;
        for (c, cell) in cells.iter().enumerate() {
            let weight = if r == 0 { r#" font-weight="bold""# } else { "" };
            let _ = writeln!(out, r#"<text x="{}" y="{y}"{weight}>{}</text>"#, 10.0 + c as f64 * col_w, escape(cell));
        }
    }
    out.push_str("</svg>\n");
    out
}
