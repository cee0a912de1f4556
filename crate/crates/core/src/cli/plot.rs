//! Minimal deterministic SVG line plots.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::harness::{ExperimentRecord, ReceiverKind};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Compact tick label.
fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').to_string()
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

impl LinePlot {
    pub fn render(&self) -> Result<String> {
        let points: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .collect();
        if points.is_empty() {
            return Err(Error::Argument("nothing to plot".into()));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Argument("plot data must be finite".into()));
        }
        if self.log_y && points.iter().any(|&(_, y)| y <= 0.0) {
            return Err(Error::Argument(
                "log-scale axis needs strictly positive values".into(),
            ));
        }
        let fy = |y: f64| if self.log_y { y.log10() } else { y };
        let (mut x0, mut x1) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| (a.min(x), b.max(x)));
        let (mut y0, mut y1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, y)| {
            (a.min(fy(y)), b.max(fy(y)))
        });
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if self.log_y {
            y0 = y0.floor();
            y1 = y1.ceil();
            if y1 - y0 < 1.0 {
                y1 = y0 + 1.0;
            }
        } else if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let py = |v: f64| TOP + (1.0 - (v - y0) / (y1 - y0)) * ph;

        let mut svg = String::new();
        let w = &mut svg;
        let _ = writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            w,
            r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        // grid and ticks
        let xt = linear_ticks(x0, x1);
        for t in &xt {
            let x = px(*t);
            let _ = writeln!(
                w,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
                TOP,
                TOP + ph
            );
            let _ = writeln!(
                w,
                r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                TOP + ph + 18.0,
                tick_label(*t)
            );
        }
        let yt: Vec<f64> = if self.log_y {
            (y0 as i64..=y1 as i64).map(|e| e as f64).collect()
        } else {
            linear_ticks(y0, y1)
        };
        for t in &yt {
            let y = py(*t);
            let label = if self.log_y {
                format!("1e{}", *t as i64)
            } else {
                tick_label(*t)
            };
            let _ = writeln!(
                w,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
                LEFT,
                LEFT + pw
            );
            let _ = writeln!(
                w,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#,
                LEFT - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            w,
            r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 18.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            w,
            r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            if !s.points.is_empty() {
                let path: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(fy(y))))
                    .collect();
                let _ = writeln!(
                    w,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.8"{dash} points="{}"/>"#,
                    s.color,
                    path.join(" ")
                );
            }
            let ly = TOP + 10.0 + 20.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                w,
                r#"<g class="legend-entry"><line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="1.8"{dash}/><text x="{:.1}" y="{:.1}">{}</text></g>"#,
                lx + 28.0,
                s.color,
                lx + 34.0,
                ly + 4.0,
                esc(&s.label)
            );
        }
        let _ = writeln!(w, "</svg>");
        Ok(svg)
    }
}

pub fn receiver_color(r: ReceiverKind) -> &'static str {
    match r {
        ReceiverKind::DeepSic => "#1f77b4",
        ReceiverKind::MetaDeepSic => "#d62728",
        ReceiverKind::BlackBoxMlp => "#2ca02c",
        ReceiverKind::ResidualConv => "#9467bd",
    }
}

pub fn arm_label(r: ReceiverKind, poisoned: bool) -> String {
    format!("{}{}", r.label(), if poisoned { " (poisoned)" } else { "" })
}

/// Values below `floor` are lifted to it so zero error rates stay drawable
/// on a log axis.
pub fn ser_vs_block(title: &str, records: &[ExperimentRecord], floor: f64) -> LinePlot {
    LinePlot {
        title: title.to_string(),
        x_label: "block index".into(),
        y_label: "cumulative SER".into(),
        log_y: true,
        series: records
            .iter()
            .map(|r| Series {
                label: arm_label(r.receiver, r.poisoned),
                points: r
                    .ser_cum
                    .iter()
                    .enumerate()
                    .map(|(b, &s)| ((b + 1) as f64, s.max(floor)))
                    .collect(),
                color: receiver_color(r.receiver).into(),
                dashed: r.poisoned,
            })
            .collect(),
    }
}
