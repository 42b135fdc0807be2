//! Small SVG line/scatter panels and gnuplot data blocks.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    Line,
    /// Markers with vertical error bars.
    Dots,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub style: Style,
    /// `(x, y, error)`.
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 420.0;
const H: f64 = 320.0;
const ML: f64 = 60.0;
const MR: f64 = 15.0;
const MT: f64 = 30.0;
const MB: f64 = 45.0;

/// Colour of a series, shared by every series with the same label prefix
/// before `" ("`, so theory and simulation of one activation match.
fn colour(label: &str, keys: &mut Vec<String>) -> &'static str {
    let key = label.split(" (").next().unwrap_or(label).to_string();
    let i = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
        keys.push(key);
        keys.len() - 1
    });
    PALETTE[i % PALETTE.len()]
}

fn range(panel: &Panel) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in &panel.series {
        for &(x, y, e) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            let e = if e.is_finite() { e } else { 0.0 };
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y - e);
            y1 = y1.max(y + e);
        }
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        let w = if b > a { b - a } else { a.abs().max(1.0) };
        (a - 0.05 * w, b + 0.05 * w)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn panel_svg(out: &mut String, p: &Panel, ox: f64) {
    let ((x0, x1), (y0, y1)) = range(p);
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let sx = |x: f64| ox + ML + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MT + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let _ = writeln!(out, r#"<rect x="{:.1}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#, ox + ML);
    for t in ticks(x0, x1) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            sx(t),
            MT + ph + 15.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
            ox + ML - 5.0,
            sy(t) + 4.0,
            fmt_tick(t)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            ox + ML,
            sy(t),
            ox + ML + pw,
            sy(t)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="18" font-size="13" text-anchor="middle">{}</text>"#, ox + ML + pw / 2.0, esc(&p.title));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
        ox + ML + pw / 2.0,
        H - 8.0,
        esc(&p.xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        ox + 14.0,
        MT + ph / 2.0,
        ox + 14.0,
        MT + ph / 2.0,
        esc(&p.ylabel)
    );
    let mut keys = Vec::new();
    for (k, s) in p.series.iter().enumerate() {
        let c = colour(&s.label, &mut keys);
        let pts: Vec<_> = s.points.iter().filter(|(x, y, _)| x.is_finite() && y.is_finite()).collect();
        match s.style {
            Style::Line => {
                let path: Vec<String> = pts.iter().map(|(x, y, _)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
                let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.8"/>"#, path.join(" "));
            }
            Style::Dots => {
                for (x, y, e) in pts {
                    if e.is_finite() && *e > 0.0 {
                        let _ = writeln!(
                            out,
                            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{c}"/>"#,
                            sx(*x),
                            sy(y - e),
                            sy(y + e)
                        );
                    }
                    let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, sx(*x), sy(*y));
                }
            }
        }
        let ly = MT + 14.0 + 14.0 * k as f64;
        let lx = ox + ML + pw - 130.0;
        match s.style {
            Style::Line => {
                let _ = writeln!(out, r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="1.8"/>"#, ly - 4.0, lx + 16.0, ly - 4.0);
            }
            Style::Dots => {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, lx + 8.0, ly - 4.0);
            }
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{ly:.1}" font-size="10">{}</text>"#, lx + 20.0, esc(&s.label));
    }
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{:.3}", t);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Panels side by side in one SVG document.
pub fn svg(panels: &[Panel]) -> String {
    let mut out = String::new();
    let total = W * panels.len() as f64;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{H}" viewBox="0 0 {total} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        panel_svg(&mut out, p, i as f64 * W);
    }
    out.push_str("</svg>\n");
    out
}

/// gnuplot data: one indexed block per series, `x y err`.
pub fn gnuplot_data(panel: &Panel) -> String {
    let mut out = format!("# {}\n# x: {}  y: {}\n", panel.title, panel.xlabel, panel.ylabel);
    for (i, s) in panel.series.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# index {i}: {}", s.label);
        for &(x, y, e) in &s.points {
            let _ = writeln!(out, "{x} {y} {}", if e.is_finite() { e } else { 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel() -> Panel {
        Panel {
            title: "t".into(),
            xlabel: "α".into(),
            ylabel: "θ".into(),
            series: vec![
                Series { label: "relu (theory)".into(), style: Style::Line, points: vec![(1.0, 0.0, 0.0), (2.0, 0.5, 0.0)] },
                Series { label: "relu (sim)".into(), style: Style::Dots, points: vec![(1.0, 0.1, 0.05), (2.0, f64::NAN, 0.0)] },
            ],
        }
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg(&[panel(), panel()]);
        assert!(s.starts_with("<svg"));
        assert!(s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(!s.contains("NaN"));
        // theory and simulation of one activation share a colour
        assert!(s.contains(PALETTE[0]));
        assert!(!s.contains(PALETTE[1]));
    }

    #[test]
    fn gnuplot_blocks() {
        let g = gnuplot_data(&panel());
        assert_eq!(g.matches("# index").count(), 2);
        assert!(g.contains("\n\n\n# index 1"));
    }

    #[test]
    fn tick_steps() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(fmt_tick(0.6000000000000001), "0.6");
    }
}
