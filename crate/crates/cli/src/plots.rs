//! Self-contained SVG charts. Output is a pure function of the inputs.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
pub const COLORS: [&str; 2] = ["#8c8c8c", "#c0392b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Svg { body: String::new(), width, height };
        s.text(width / 2.0, 22.0, title, "middle", 15.0);
        s
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#, w.max(0.0), h.max(0.0));
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#);
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.1}" fill="{fill}" fill-opacity="0.6"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, s: &str, anchor: &str, size: f64) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            esc(s)
        );
    }

    fn rotated_text(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="end" transform="rotate(-45 {x:.2} {y:.2})">{}</text>"#,
            esc(s)
        );
    }

    fn legend(&mut self, labels: &[String; 2]) {
        for (i, label) in labels.iter().enumerate() {
            let x = self.width - RIGHT - 150.0;
            let y = TOP + 4.0 + 16.0 * i as f64;
            self.rect(x, y, 10.0, 10.0, COLORS[i]);
            self.text(x + 14.0, y + 9.0, label, "start", 11.0);
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Linear map from data range to pixel range.
#[derive(Clone, Copy)]
struct Scale {
    d0: f64,
    d1: f64,
    p0: f64,
    p1: f64,
}

impl Scale {
    fn new(d0: f64, d1: f64, p0: f64, p1: f64) -> Self {
        let (d0, d1) = if (d1 - d0).abs() < 1e-12 { (d0 - 0.5, d1 + 0.5) } else { (d0, d1) };
        Scale { d0, d1, p0, p1 }
    }

    fn at(&self, v: f64) -> f64 {
        self.p0 + (v - self.d0) / (self.d1 - self.d0) * (self.p1 - self.p0)
    }
}

fn y_axis(svg: &mut Svg, ys: Scale, label: &str, x0: f64) {
    svg.line(x0, ys.p0, x0, ys.p1, "#000");
    for i in 0..=4 {
        let v = ys.d0 + (ys.d1 - ys.d0) * i as f64 / 4.0;
        let y = ys.at(v);
        svg.line(x0 - 4.0, y, x0, y, "#000");
        svg.text(x0 - 6.0, y + 4.0, &format!("{v:.2}"), "end", 10.0);
    }
    svg.rotated_text(14.0, (ys.p0 + ys.p1) / 2.0 - 20.0, label);
}

/// Grouped bars, two per group, with optional error bars.
pub fn grouped_bars(title: &str, y_label: &str, groups: &[String], values: [&[Option<f64>]; 2], errors: Option<[&[f64]; 2]>, labels: &[String; 2], y_range: (f64, f64)) -> String {
    let width = (LEFT + RIGHT + 50.0 * groups.len() as f64).max(W);
    let mut svg = Svg::new(width, H, title);
    let ys = Scale::new(y_range.0, y_range.1, H - BOTTOM, TOP);
    y_axis(&mut svg, ys, y_label, LEFT);
    svg.line(LEFT, H - BOTTOM, width - RIGHT, H - BOTTOM, "#000");
    let slot = (width - LEFT - RIGHT) / groups.len().max(1) as f64;
    let bar = slot * 0.35;
    for (g, name) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.15;
        for e in 0..2 {
            let Some(v) = values[e].get(g).copied().flatten() else { continue };
            let x = x0 + bar * e as f64;
            let y = ys.at(v.clamp(y_range.0, y_range.1));
            svg.rect(x, y, bar, ys.p0 - y, COLORS[e]);
            if let Some(err) = errors {
                let s = err[e].get(g).copied().unwrap_or(0.0);
                let (lo, hi) = (ys.at((v - s).max(y_range.0)), ys.at((v + s).min(y_range.1)));
                svg.line(x + bar / 2.0, lo, x + bar / 2.0, hi, "#000");
            }
        }
        svg.rotated_text(x0 + bar, H - BOTTOM + 14.0, name);
    }
    svg.legend(labels);
    svg.finish()
}

/// Histogram of values over `bins` equal-width bins spanning their range.
pub fn histogram(title: &str, x_label: &str, values: &[f64], bins: usize) -> String {
    let mut svg = Svg::new(W, H, title);
    let bins = bins.max(1);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if values.is_empty() { (-1.0, 1.0) } else if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let xs = Scale::new(lo, hi, LEFT, W - RIGHT);
    let ys = Scale::new(0.0, max, H - BOTTOM, TOP);
    y_axis(&mut svg, ys, "genes", LEFT);
    svg.line(LEFT, H - BOTTOM, W - RIGHT, H - BOTTOM, "#000");
    let width = (hi - lo) / bins as f64;
    for (b, &c) in counts.iter().enumerate() {
        let x = xs.at(lo + width * b as f64);
        let y = ys.at(c as f64);
        svg.rect(x + 0.5, y, xs.at(lo + width) - xs.at(lo) - 1.0, ys.p0 - y, COLORS[1]);
    }
    if lo < 0.0 && hi > 0.0 {
        svg.line(xs.at(0.0), TOP, xs.at(0.0), H - BOTTOM, "#444");
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        svg.text(xs.at(v), H - BOTTOM + 16.0, &format!("{v:.3}"), "middle", 10.0);
    }
    svg.text(W / 2.0, H - 20.0, x_label, "middle", 12.0);
    svg.finish()
}

/// Panel name, observed values, and both extractors' predictions.
pub type ScatterPanel = (String, Vec<f64>, [Vec<f64>; 2]);

/// One scatter panel per series: observed on x, both extractors' predictions on y.
pub fn scatter_panels(title: &str, panels: &[ScatterPanel], labels: &[String; 2]) -> String {
    let side = 260.0;
    let n = panels.len().max(1);
    let cols = n.min(2);
    let rows_n = n.div_ceil(cols);
    let width = cols as f64 * (side + 80.0) + 20.0;
    let height = rows_n as f64 * (side + 70.0) + 60.0;
    let mut svg = Svg::new(width, height, title);
    for (i, (name, obs, pred)) in panels.iter().enumerate() {
        let ox = 70.0 + (i % cols) as f64 * (side + 80.0);
        let oy = 60.0 + (i / cols) as f64 * (side + 70.0);
        let all = obs.iter().chain(&pred[0]).chain(&pred[1]);
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
        let xs = Scale::new(lo, hi, ox, ox + side);
        let ys = Scale::new(lo, hi, oy + side, oy);
        svg.line(ox, oy + side, ox + side, oy + side, "#000");
        svg.line(ox, oy, ox, oy + side, "#000");
        svg.line(xs.at(lo), ys.at(lo), xs.at(hi), ys.at(hi), "#bbb");
        for e in 0..2 {
            for (o, p) in obs.iter().zip(&pred[e]) {
                svg.circle(xs.at(*o), ys.at(*p), 2.5, COLORS[e]);
            }
        }
        svg.text(ox + side / 2.0, oy - 6.0, name, "middle", 12.0);
        svg.text(ox + side / 2.0, oy + side + 28.0, "observed ln(1 + x)", "middle", 10.0);
        svg.text(ox, oy + side + 14.0, &format!("{lo:.2}"), "middle", 9.0);
        svg.text(ox + side, oy + side + 14.0, &format!("{hi:.2}"), "middle", 9.0);
    }
    svg.legend(labels);
    svg.finish()
}
