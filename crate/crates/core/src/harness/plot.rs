//! Minimal SVG renderer for learning curves.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// One curve: mean per iteration with a ±2 std band.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub iterations: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Curve {
    /// Drops non-finite points.
    pub fn finite(&self) -> Curve {
        let keep: Vec<usize> = (0..self.mean.len())
            .filter(|&i| self.iterations[i].is_finite() && self.mean[i].is_finite() && self.std[i].is_finite())
            .collect();
        Curve {
            iterations: keep.iter().map(|&i| self.iterations[i]).collect(),
            mean: keep.iter().map(|&i| self.mean[i]).collect(),
            std: keep.iter().map(|&i| self.std[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotOptions {
    pub title: String,
    /// Horizontal dashed line, e.g. the random-policy return.
    pub baseline: Option<f64>,
}

struct Scale {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.1;
        (lo - pad, hi + pad)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn path(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.enumerate() {
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
    }
    d.trim_end().to_string()
}

/// Renders the curve as a standalone SVG document.
pub fn learning_curve_svg(curve: &Curve, opts: &PlotOptions) -> String {
    let c = curve.finite();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, s) in c.mean.iter().zip(&c.std) {
        lo = lo.min(m - 2.0 * s);
        hi = hi.max(m + 2.0 * s);
    }
    if let Some(b) = opts.baseline.filter(|b| b.is_finite()) {
        lo = lo.min(b);
        hi = hi.max(b);
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let (y0, y1) = padded(lo, hi);
    let (x0, x1) = match (c.iterations.first(), c.iterations.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let s = Scale { x0, x1, y0, y1 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&opts.title));

    // axes
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = s.y(v);
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, left - 6.0, y + 4.0);
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#eeeeee"/>"##);
    }
    for &it in &c.iterations {
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{it}</text>"#, s.x(it), bottom + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">return</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    if !c.mean.is_empty() {
        let upper = c.iterations.iter().zip(c.mean.iter().zip(&c.std)).map(|(&x, (m, sd))| (s.x(x), s.y(m + 2.0 * sd)));
        let lower: Vec<(f64, f64)> = c.iterations.iter().zip(c.mean.iter().zip(&c.std)).map(|(&x, (m, sd))| (s.x(x), s.y(m - 2.0 * sd))).collect();
        let band = format!("{} {} Z", path(upper), path(lower.into_iter().rev()).replacen('M', "L", 1));
        let _ = writeln!(svg, r##"<path class="band" d="{band}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##);
        let line = path(c.iterations.iter().zip(&c.mean).map(|(&x, &m)| (s.x(x), s.y(m))));
        let _ = writeln!(svg, r##"<path class="mean" d="{line}" stroke="#1f77b4" stroke-width="2" fill="none"/>"##);
        for (&x, &m) in c.iterations.iter().zip(&c.mean) {
            let _ = writeln!(svg, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, s.x(x), s.y(m));
        }
    }
    if let Some(b) = opts.baseline.filter(|b| b.is_finite()) {
        let y = s.y(b);
        let _ = writeln!(
            svg,
            r##"<line class="baseline" x1="{left}" y1="{y:.2}" x2="{right}" y2="{y:.2}" stroke="#d62728" stroke-width="2" stroke-dasharray="6,4"/>"##
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
