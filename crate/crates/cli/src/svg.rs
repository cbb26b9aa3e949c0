//! Minimal SVG output: line charts and map overlays.

use std::fmt::Write as _;

use wsiseg::aggregation::ProbMap;
use wsiseg::synthwsi::SyntheticSlide;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Polyline chart of `points` on `[0, x_max] x [0, 1]`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    x_max: f64,
    points: &[(f64, f64)],
) -> String {
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + pw * (x / x_max).clamp(0.0, 1.0);
    let sy = |y: f64| H - MARGIN - ph * y.clamp(0.0, 1.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(f * x_max),
            H - MARGIN + 16.0,
            trim(f * x_max)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            sy(f) + 4.0,
            trim(f)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="crimson" stroke-width="2" points="{}"/>"#,
        coords.join(" ")
    );
    out.push_str("</svg>\n");
    out
}

/// Blue-to-red colour for a probability.
pub fn heat(q: f64) -> [f64; 3] {
    let q = q.clamp(0.0, 1.0);
    [255.0 * q, 0.0, 255.0 * (1.0 - q)]
}

/// Tissue image with the probability map blended on top and the truth mask
/// outlined in white, one `scale`-pixel square per slide pixel.
pub fn overlay(slide: &SyntheticSlide, map: &ProbMap, scale: usize) -> String {
    let (h, w) = (slide.height, slide.width);
    let s = scale as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" shape-rendering="crispEdges">"#,
        w * scale,
        h * scale
    );
    for y in 0..h {
        for x in 0..w {
            let tissue: [f64; 3] = if slide.channels >= 3 {
                [0, 1, 2].map(|c| 255.0 * slide.pixel(c, y, x) as f64)
            } else {
                [255.0 * slide.pixel(0, y, x) as f64; 3]
            };
            let hot = heat(map.get(y, x));
            let c: Vec<u8> = (0..3)
                .map(|k| (0.5 * tissue[k] + 0.5 * hot[k]).round() as u8)
                .collect();
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{s}\" height=\"{s}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                x * scale,
                y * scale,
                c[0],
                c[1],
                c[2]
            );
        }
    }
    let inside = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && slide.truth_mask[y as usize * w + x as usize] != 0
    };
    let mut path = String::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(y, x) {
                continue;
            }
            let (px, py) = (x as f64 * s, y as f64 * s);
            if !inside(y - 1, x) {
                let _ = write!(path, "M{px} {py}h{s}");
            }
            if !inside(y + 1, x) {
                let _ = write!(path, "M{px} {}h{s}", py + s);
            }
            if !inside(y, x - 1) {
                let _ = write!(path, "M{px} {py}v{s}");
            }
            if !inside(y, x + 1) {
                let _ = write!(path, "M{} {py}v{s}", px + s);
            }
        }
    }
    if !path.is_empty() {
        let _ = writeln!(
            out,
            r#"<path d="{path}" stroke="white" stroke-width="1" fill="none"/>"#
        );
    }
    out.push_str("</svg>\n");
    out
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
