//! Minimal SVG line and scatter charts.

use std::fmt::Write as _;

const COLORS: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];
const W: f64 = 520.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

fn bounds(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn frame(title: &str, x: (f64, f64), y: (f64, f64)) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<text x="{PAD}" y="20">{title}</text>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>
<text x="{PAD}" y="{}">{:.3}</text><text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="4" y="{}">{:.3}</text><text x="4" y="{PAD}">{:.3}</text>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        H - PAD + 15.0,
        x.0,
        W - PAD,
        H - PAD + 15.0,
        x.1,
        H - PAD,
        y.0,
        y.1
    );
    s
}

fn project(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// One polyline per named series.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xr = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)).collect::<Vec<_>>().into_iter());
    let yr = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)).collect::<Vec<_>>().into_iter());
    let mut s = frame(title, xr, yr);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    project(x, xr, PAD, W - PAD),
                    project(y, yr, H - PAD, PAD)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 120.0,
            PAD + 14.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Points coloured by label.
pub fn scatter(title: &str, points: &[(f64, f64, usize)]) -> String {
    let xr = bounds(points.iter().map(|p| p.0));
    let yr = bounds(points.iter().map(|p| p.1));
    let mut s = frame(title, xr, yr);
    for &(x, y, label) in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}"/>"#,
            project(x, xr, PAD, W - PAD),
            project(y, yr, H - PAD, PAD),
            COLORS[label % COLORS.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}
