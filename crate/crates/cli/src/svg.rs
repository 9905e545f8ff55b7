//! Minimal SVG plotting: linear axes, lines, points, horizontal interval
//! bars, filled cells and labelled category axes. Enough for the report
//! figures and nothing more.

use std::fmt::Write as _;

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
enum Mark {
    Line {
        pts: Vec<(f64, f64)>,
        color: String,
        dashed: bool,
        label: Option<String>,
    },
    Points {
        pts: Vec<(f64, f64)>,
        color: String,
    },
    Interval {
        y: f64,
        lo: f64,
        hi: f64,
        color: String,
    },
    HRule {
        y: f64,
    },
    VRule {
        x: f64,
    },
    Cell {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        fill: String,
    },
    Segment {
        a: (f64, f64),
        b: (f64, f64),
        color: String,
    },
}

#[derive(Debug, Clone)]
pub struct Figure {
    title: String,
    xlabel: String,
    ylabel: String,
    x: (f64, f64),
    y: (f64, f64),
    y_categories: Vec<(f64, String)>,
    marks: Vec<Mark>,
}

impl Figure {
    pub fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Self {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            x: (f64::INFINITY, f64::NEG_INFINITY),
            y: (f64::INFINITY, f64::NEG_INFINITY),
            y_categories: Vec::new(),
            marks: Vec::new(),
        }
    }

    fn grow(&mut self, x: f64, y: f64) {
        if x.is_finite() {
            self.x = (self.x.0.min(x), self.x.1.max(x));
        }
        if y.is_finite() {
            self.y = (self.y.0.min(y), self.y.1.max(y));
        }
    }

    pub fn line(&mut self, pts: Vec<(f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        pts.iter().for_each(|&(x, y)| self.grow(x, y));
        self.marks.push(Mark::Line {
            pts,
            color: color.into(),
            dashed: false,
            label: label.map(Into::into),
        });
        self
    }

    pub fn dashed(&mut self, pts: Vec<(f64, f64)>, color: &str, label: Option<&str>) -> &mut Self {
        pts.iter().for_each(|&(x, y)| self.grow(x, y));
        self.marks.push(Mark::Line {
            pts,
            color: color.into(),
            dashed: true,
            label: label.map(Into::into),
        });
        self
    }

    pub fn points(&mut self, pts: Vec<(f64, f64)>, color: &str) -> &mut Self {
        pts.iter().for_each(|&(x, y)| self.grow(x, y));
        self.marks.push(Mark::Points {
            pts,
            color: color.into(),
        });
        self
    }

    /// Horizontal interval `[lo, hi]` at height `y`.
    pub fn interval(&mut self, y: f64, lo: f64, hi: f64, color: &str) -> &mut Self {
        self.grow(lo, y);
        self.grow(hi, y);
        self.marks.push(Mark::Interval {
            y,
            lo,
            hi,
            color: color.into(),
        });
        self
    }

    pub fn hrule(&mut self, y: f64) -> &mut Self {
        self.grow(f64::NAN, y);
        self.marks.push(Mark::HRule { y });
        self
    }

    pub fn vrule(&mut self, x: f64) -> &mut Self {
        self.grow(x, f64::NAN);
        self.marks.push(Mark::VRule { x });
        self
    }

    pub fn cell(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, fill: String) -> &mut Self {
        self.grow(x0, y0);
        self.grow(x1, y1);
        self.marks.push(Mark::Cell { x0, y0, x1, y1, fill });
        self
    }

    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: &str) -> &mut Self {
        self.marks.push(Mark::Segment {
            a,
            b,
            color: color.into(),
        });
        self
    }

    /// Replaces the numeric y axis with labels at the given positions.
    pub fn y_categories(&mut self, labels: Vec<(f64, String)>) -> &mut Self {
        for (y, _) in &labels {
            self.grow(f64::NAN, *y);
        }
        self.y_categories = labels;
        self
    }

    pub fn render(&self) -> String {
        let left = self
            .y_categories
            .iter()
            .map(|(_, l)| l.len() as f64 * 6.0 + 16.0)
            .fold(LEFT, f64::max);
        let (x0, x1) = padded(self.x);
        let (y0, y1) = if self.y_categories.is_empty() {
            padded(self.y)
        } else {
            (self.y.0 - 0.75, self.y.1 + 0.75)
        };
        let px = |x: f64| left + (x - x0) / (x1 - x0) * (W - left - RIGHT);
        let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="28" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            esc(&self.title)
        );
        for m in &self.marks {
            if let Mark::Cell {
                x0: a,
                y0: b,
                x1: c,
                y1: d,
                fill,
            } = m
            {
                let (l, r) = (px(*a).min(px(*c)), px(*a).max(px(*c)));
                let (t, btm) = (py(*b).min(py(*d)), py(*b).max(py(*d)));
                let _ = writeln!(
                    s,
                    r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                    r - l,
                    btm - t
                );
            }
        }
        // axes
        let _ = writeln!(
            s,
            r#"<path d="M{:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
            left,
            TOP,
            H - BOTTOM,
            W - RIGHT
        );
        for t in ticks(x0, x1) {
            let x = px(t);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                H - BOTTOM,
                H - BOTTOM + 5.0,
                H - BOTTOM + 18.0,
                tick_label(t)
            );
        }
        if self.y_categories.is_empty() {
            for t in ticks(y0, y1) {
                let y = py(t);
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                    left - 5.0,
                    left - 8.0,
                    y + 4.0,
                    tick_label(t)
                );
            }
        } else {
            for (v, label) in &self.y_categories {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                    left - 6.0,
                    py(*v) + 3.0,
                    esc(label)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (left + W - RIGHT) / 2.0,
            H - 18.0,
            esc(&self.xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(18,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            esc(&self.ylabel)
        );
        let mut legend = 0;
        for m in &self.marks {
            match m {
                Mark::Line {
                    pts,
                    color,
                    dashed,
                    label,
                } => {
                    let d: Vec<String> = pts
                        .iter()
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                        .collect();
                    if d.is_empty() {
                        continue;
                    }
                    let dash = if *dashed { r#" stroke-dasharray="6,4""# } else { "" };
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>"#,
                        d.join(" ")
                    );
                    if let Some(l) = label {
                        let ly = TOP + 8.0 + 16.0 * legend as f64;
                        let _ = writeln!(
                            s,
                            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.8"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                            W - RIGHT - 150.0,
                            W - RIGHT - 125.0,
                            W - RIGHT - 120.0,
                            ly + 4.0,
                            esc(l)
                        );
                        legend += 1;
                    }
                }
                Mark::Points { pts, color } => {
                    for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                            px(x),
                            py(y)
                        );
                    }
                }
                Mark::Interval { y, lo, hi, color } => {
                    if lo.is_finite() && hi.is_finite() {
                        let _ = writeln!(
                            s,
                            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5"/>"#,
                            px(*lo),
                            py(*y),
                            px(*hi),
                            py(*y)
                        );
                    }
                }
                Mark::HRule { y } => {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="3,3"/>"#,
                        py(*y),
                        W - RIGHT,
                        py(*y)
                    );
                }
                Mark::VRule { x } => {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{:.2}" y1="{TOP}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="3,3"/>"#,
                        px(*x),
                        px(*x),
                        H - BOTTOM
                    );
                }
                Mark::Segment { a, b, color } => {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5"/>"#,
                        px(a.0),
                        py(a.1),
                        px(b.0),
                        py(b.1)
                    );
                }
                Mark::Cell { .. } => {}
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let w = lo.abs().max(1.0) * 0.1;
        return (lo - w, hi + w);
    }
    let w = 0.05 * (hi - lo);
    (lo - w, hi + w)
}

/// Roughly six ticks on a 1-2-5 step.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Diverging blue-white-red fill for `v` in `[-1, 1]`.
pub fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("rgb({},{},{})", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Marching squares: segments of the `level` set of `z[i][j]` sampled at
/// `(xs[i], ys[j])`, with linear interpolation along cell edges.
pub fn contour_segments(xs: &[f64], ys: &[f64], z: &[Vec<f64>], level: f64) -> Vec<((f64, f64), (f64, f64))> {
    let mut out = Vec::new();
    for i in 0..xs.len().saturating_sub(1) {
        for j in 0..ys.len().saturating_sub(1) {
            let corners = [
                (xs[i], ys[j], z[i][j]),
                (xs[i + 1], ys[j], z[i + 1][j]),
                (xs[i + 1], ys[j + 1], z[i + 1][j + 1]),
                (xs[i], ys[j + 1], z[i][j + 1]),
            ];
            if corners.iter().any(|c| !c.2.is_finite()) {
                continue;
            }
            let mut hits = Vec::new();
            for e in 0..4 {
                let (xa, ya, za) = corners[e];
                let (xb, yb, zb) = corners[(e + 1) % 4];
                if (za - level) * (zb - level) < 0.0 || (za == level && zb != level) {
                    let f = (level - za) / (zb - za);
                    hits.push((xa + f * (xb - xa), ya + f * (yb - ya)));
                }
            }
            match hits.len() {
                2 => out.push((hits[0], hits[1])),
                4 => {
                    out.push((hits[0], hits[1]));
                    out.push((hits[2], hits[3]));
                }
                _ => {}
            }
        }
    }
    out
}
