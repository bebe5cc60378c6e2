//! Minimal deterministic SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x: &'a [f64],
    pub series: &'a [Vec<f64>],
    pub labels: &'a [String],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Render to SVG text. Non-finite points are skipped.
pub fn render_svg(p: &Plot) -> Result<String> {
    if p.series.is_empty() || p.x.is_empty() {
        return Err(Error::EmptySeries);
    }
    for s in p.series {
        crate::error::check_dim(p.x.len(), s.len())?;
    }
    crate::error::check_dim(p.series.len(), p.labels.len())?;
    let (x0, x1) = bounds(p.x.iter().copied());
    let (y0, y1) = bounds(p.series.iter().flatten().copied());
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(p.title)
    );
    let _ =
        writeln!(s, r#"<path d="M{LEFT:.1} {TOP:.1} V{:.1} H{:.1}" stroke="black" fill="none"/>"#, TOP + ph, LEFT + pw);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#,
            TOP + ph,
            TOP + ph + 4.0
        );
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, TOP + ph + 18.0);
        let _ =
            writeln!(s, r#"<line x1="{:.1}" y1="{py:.1}" x2="{LEFT:.1}" y2="{py:.1}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, LEFT - 6.0, py + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(p.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(p.y_label)
    );
    for (i, (series, label)) in p.series.iter().zip(p.labels).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> =
            p.x.iter()
                .zip(series)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| (sx(x), sy(y)))
                .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "));
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Render and write; nothing is written on error.
pub fn emit_plot(p: &Plot, path: &Path) -> Result<()> {
    let svg = render_svg(p)?;
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot<'a>(x: &'a [f64], series: &'a [Vec<f64>], labels: &'a [String]) -> Plot<'a> {
        Plot { title: "t", x_label: "x", y_label: "y", x, series, labels }
    }

    #[test]
    fn one_series_seven_points() {
        let x: Vec<f64> = (0..7).map(f64::from).collect();
        let s = vec![x.iter().map(|v| v * v).collect()];
        let labels = vec!["sq".to_string()];
        let svg = render_svg(&plot(&x, &s, &labels)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 7);
        assert_eq!(svg, render_svg(&plot(&x, &s, &labels)).unwrap());
    }

    #[test]
    fn two_series_two_legend_entries() {
        let x = [0.0, 1.0];
        let s = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let labels = vec!["a".to_string(), "b".to_string()];
        let svg = render_svg(&plot(&x, &s, &labels)).unwrap();
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
    }

    #[test]
    fn empty_series_writes_nothing() {
        let dir = std::env::temp_dir().join(format!("editedid-plot-{}", std::process::id()));
        let path = dir.with_extension("svg");
        let labels: Vec<String> = Vec::new();
        assert_eq!(emit_plot(&plot(&[], &[], &labels), &path), Err(Error::EmptySeries));
        assert!(!path.exists());
    }
}
