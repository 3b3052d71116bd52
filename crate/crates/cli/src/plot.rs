//! Hand-written SVG figures: throughput bars, stacked rollout/actor time
//! bars, and throughput-vs-envs lines.
//!
//! Output is a pure function of the input values; numbers are printed with
//! fixed precision so re-plotting the same file is byte-identical.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 72.0;
const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Throughput,
    Breakdown,
    Scaling,
}

impl std::str::FromStr for PlotKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "throughput" => Ok(Self::Throughput),
            "breakdown" => Ok(Self::Breakdown),
            "scaling" => Ok(Self::Scaling),
            other => Err(format!(
                "unknown plot kind {other:?} (throughput|breakdown|scaling)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tick step of 1, 2 or 5 times a power of ten giving about five ticks.
fn nice_step(max: f64) -> f64 {
    if max.is_nan() || max <= 0.0 {
        return 1.0;
    }
    let raw = max / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    format!("{v:.decimals$}")
}

struct Frame {
    out: String,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, y_label: &str, data_max: f64) -> Self {
        let step = nice_step(data_max);
        let y_max = (data_max / step).ceil().max(1.0) * step;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            esc(y_label)
        );
        let mut f = Self { out, y_max };
        let mut v = 0.0;
        while v <= y_max + step * 1e-9 {
            let y = f.y(v);
            let _ = writeln!(
                f.out,
                r##"<line x1="{LEFT:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#dddddd"/>"##,
                W - RIGHT
            );
            let _ = writeln!(
                f.out,
                r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                tick_label(v, step)
            );
            v += step;
        }
        let _ = writeln!(
            f.out,
            r#"<line x1="{LEFT:.1}" y1="{TOP:.1}" x2="{LEFT:.1}" y2="{:.1}" stroke="black"/>"#,
            H - BOTTOM
        );
        let _ = writeln!(
            f.out,
            r#"<line x1="{LEFT:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            H - BOTTOM,
            W - RIGHT,
            H - BOTTOM
        );
        f
    }

    fn y(&self, v: f64) -> f64 {
        H - BOTTOM - (v / self.y_max) * (H - TOP - BOTTOM)
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let x = LEFT + 12.0 + 140.0 * i as f64;
            let _ = writeln!(
                self.out,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
                TOP - 14.0,
                PALETTE[i % PALETTE.len()]
            );
            let _ = writeln!(
                self.out,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                x + 14.0,
                TOP - 5.0,
                esc(name)
            );
        }
    }

    fn x_label(&mut self, x: f64, text: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            esc(text)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn slot_width(n: usize) -> f64 {
    (W - LEFT - RIGHT) / n.max(1) as f64
}

/// One bar per labeled value.
pub fn bars_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let mut f = Frame::new(title, y_label, max);
    let slot = slot_width(bars.len());
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let y = f.y(*v);
        let _ = writeln!(
            f.out,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.6,
            f.y(0.0) - y,
            PALETTE[0]
        );
        let _ = writeln!(
            f.out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#,
            x + slot * 0.3,
            y - 4.0
        );
        f.x_label(x + slot * 0.3, label);
    }
    f.finish()
}

/// Stacked bars; `parts` names the stacked components bottom-up.
pub fn stacked_svg(
    title: &str,
    y_label: &str,
    parts: &[&str],
    bars: &[(String, Vec<f64>)],
) -> String {
    let max = bars
        .iter()
        .map(|b| b.1.iter().sum::<f64>())
        .fold(0.0, f64::max);
    let mut f = Frame::new(title, y_label, max);
    f.legend(parts);
    let slot = slot_width(bars.len());
    for (i, (label, values)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let mut base = 0.0;
        for (k, v) in values.iter().enumerate() {
            let (y0, y1) = (f.y(base), f.y(base + v));
            let _ = writeln!(
                f.out,
                r#"<rect x="{x:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                slot * 0.6,
                y0 - y1,
                PALETTE[k % PALETTE.len()]
            );
            base += v;
        }
        f.x_label(x + slot * 0.3, label);
    }
    f.finish()
}

/// Lines over a shared numeric x axis.
pub fn lines_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| &s.points);
    let y_max = all.clone().map(|p| p.1).fold(0.0, f64::max);
    let (x_lo, x_hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (x_lo, x_hi) = if x_lo.is_finite() && x_hi > x_lo {
        (x_lo, x_hi)
    } else {
        (0.0, x_lo.max(0.0) + 1.0)
    };
    let mut f = Frame::new(title, y_label, y_max);
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    f.legend(&names);
    let px = |x: f64| LEFT + 20.0 + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT - 40.0);
    let mut xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        f.x_label(px(x), &format!("{x}"));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.0), f.y(p.1)))
            .collect();
        let _ = writeln!(
            f.out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &s.points {
            let _ = writeln!(
                f.out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(p.0),
                f.y(p.1)
            );
        }
    }
    let _ = writeln!(
        f.out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 16.0,
        esc(x_label)
    );
    f.finish()
}
