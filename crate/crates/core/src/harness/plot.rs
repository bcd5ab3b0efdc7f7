//! Minimal SVG line charts of a sweep report.

use std::fmt::Write as _;

use super::eval::EvalRow;

const W: f64 = 360.0;
const H: f64 = 240.0;
const PAD: f64 = 40.0;

fn panel(out: &mut String, x0: f64, title: &str, series: &str, pts: &[(f64, f64)]) {
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let sx = |x: f64| x0 + PAD + (x - xmin) / xspan * (W - 2.0 * PAD);
    // both quantities live in [0, 1]
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let _ = writeln!(out, r#"<g id="{series}">"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-size="14">{title}</text>"#, x0 + PAD);
    let _ = writeln!(
        out,
        r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}" stroke="black"/>"#,
        l = x0 + PAD,
        r = x0 + W - PAD,
        t = PAD,
        b = H - PAD
    );
    for (v, label) in [(0.0, "0"), (1.0, "1")] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{label}</text>"#, x0 + PAD - 14.0, sy(v) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{xmin}</text>"#, sx(xmin), H - PAD + 14.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10">{xmax}</text>"#, sx(xmax) - 20.0, H - PAD + 14.0);
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="steelblue" points="{}"/>"#, path.join(" "));
    for &(x, y) in pts {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue" data-series="{series}" data-x="{x}" data-y="{y}"/>"#,
            sx(x),
            sy(y)
        );
    }
    let _ = writeln!(out, "</g>");
}

/// Two panels: mean τ against the knob and accuracy against the knob. Each
/// point carries its exact values in `data-x`/`data-y` attributes.
pub fn render_sweep_svg(rows: &[EvalRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}">"#, 2.0 * W);
    let tau: Vec<(f64, f64)> = rows.iter().map(|r| (r.knob, r.point.mean_tau)).collect();
    let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.knob, r.point.accuracy)).collect();
    if !rows.is_empty() {
        panel(&mut out, 0.0, "token ratio vs p", "tau", &tau);
        panel(&mut out, W, "accuracy vs p", "accuracy", &acc);
    }
    out.push_str("</svg>\n");
    out
}

/// Reads back `(series, x, y)` for every data point in an SVG produced by
/// [`render_sweep_svg`].
pub fn parse_svg_points(svg: &str) -> Vec<(String, f64, f64)> {
    let attr = |tag: &str, name: &str| -> Option<String> {
        let key = format!(r#"{name}=""#);
        let start = tag.find(&key)? + key.len();
        let end = tag[start..].find('"')? + start;
        Some(tag[start..end].to_string())
    };
    svg.lines()
        .filter(|l| l.trim_start().starts_with("<circle"))
        .filter_map(|l| {
            Some((attr(l, "data-series")?, attr(l, "data-x")?.parse().ok()?, attr(l, "data-y")?.parse().ok()?))
        })
        .collect()
}
