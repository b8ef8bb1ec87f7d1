//! Static exports of an enforcement report: histogram CSV and a plain SVG.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use attnlens_core::enforcement::{EnforcementReport, PairedHistogram};

pub fn histogram_csv(h: &PairedHistogram, path: &Path) -> Result<()> {
    let mut out = String::from("bin_start,bin_end,before,after\n");
    for (i, w) in h.edges.windows(2).enumerate() {
        writeln!(out, "{},{},{},{}", w[0], w[1], h.before[i], h.after[i])?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const BEFORE: &str = "#9e9e9e";
const AFTER: &str = "#1f77b4";

/// Paired bars per MAE bin, before in grey and after in blue.
pub fn histogram_svg(report: &EnforcementReport) -> String {
    let h = &report.histogram;
    let bins = h.before.len().max(1);
    let peak = h.before.iter().chain(&h.after).copied().max().unwrap_or(0).max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_w / bins as f64;
    let bar = slot * 0.4;
    let base = HEIGHT - MARGIN;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">Target MAE at {} min, {} roads (mean shift {:+.3})</text>"#,
        WIDTH / 2.0,
        report.horizon.minutes(),
        report.targets.len(),
        h.mean_shift
    );
    for (i, (&b, &a)) in h.before.iter().zip(&h.after).enumerate() {
        let x = MARGIN + i as f64 * slot + slot * 0.1;
        for (k, (count, color)) in [(b, BEFORE), (a, AFTER)].into_iter().enumerate() {
            let hgt = count as f64 / peak * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                x + k as f64 * bar,
                base - hgt,
                bar,
                hgt
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#);
    for (i, e) in h.edges.iter().enumerate() {
        if bins > 10 && i % (bins / 5) != 0 && i != bins {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{e:.2}</text>"#,
            MARGIN + i as f64 * slot,
            base + 14.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">MAE</text>"#, WIDTH / 2.0, HEIGHT - 10.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4.0, MARGIN + 4.0, peak);
    let _ = writeln!(s, r#"<text x="{}" y="{base}" text-anchor="end">0</text>"#, MARGIN - 4.0);
    let legend_x = WIDTH - MARGIN - 120.0;
    for (k, (label, color)) in [("before", BEFORE), ("after", AFTER)].into_iter().enumerate() {
        let y = MARGIN + k as f64 * 16.0;
        let _ = writeln!(s, r#"<rect x="{legend_x}" y="{y}" width="10" height="10" fill="{color}"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, legend_x + 14.0, y + 9.0);
    }
    s.push_str("</svg>\n");
    s
}
