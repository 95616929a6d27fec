//! Minimal static SVG charts: line plots and pipeline Gantt timelines.

use std::fmt::Write;

use crate::parallel::{EventKind, ScheduleTimeline};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        b = Some(match b {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let pad = |a: f64, b: f64| if a == b { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        (x0, x1, y0, y1)
    })
}

/// Line chart with axes, tick labels and a legend. `comment` is embedded
/// verbatim in an XML comment near the top.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    comment: &str,
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = bounds(series).unwrap_or((0.0, 1.0, 0.0, 1.0));
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * ph;
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        // non-finite points break the line
        let mut segment = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if !seg.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    seg.join(" ")
                );
                seg.clear();
            }
        };
        for &(x, y) in &ser.points {
            if x.is_finite() && y.is_finite() {
                segment.push(format!("{:.2},{:.2}", px(x), py(y)));
            } else {
                flush(&mut segment, &mut s);
            }
        }
        flush(&mut segment, &mut s);
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{}">{}</text>"#,
            W - MARGIN - 150.0,
            W - MARGIN - 130.0,
            W - MARGIN - 125.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Gantt chart of a pipeline timeline: one row per device, forward boxes
/// light, backward boxes dark, labelled by micro-batch.
pub fn gantt(timeline: &ScheduleTimeline, comment: &str) -> String {
    let rows = timeline.devices.len().max(1) as f64;
    let row_h = 28.0;
    let height = 2.0 * MARGIN + rows * row_h;
    let scale = (W - 2.0 * MARGIN) / timeline.makespan.max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{W}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">p={} v={} n={} idle={}</text>"#,
        W / 2.0,
        timeline.p,
        timeline.v,
        timeline.n,
        timeline.idle_fraction()
    );
    for (d, events) in timeline.devices.iter().enumerate() {
        let y = MARGIN + d as f64 * row_h;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">dev {d}</text>"#,
            MARGIN - 4.0,
            y + row_h / 2.0 + 3.0
        );
        for e in events {
            let (fill, text) = match e.kind {
                EventKind::Idle => continue,
                EventKind::Fwd => ("#9ecae1", "black"),
                EventKind::Bwd => ("#08519c", "white"),
            };
            let x = MARGIN + e.start as f64 * scale;
            let w = (e.end - e.start) as f64 * scale;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{fill}" stroke="white" stroke-width="0.5"/>"#,
                y + 2.0,
                row_h - 4.0
            );
            if w >= 10.0 {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.1}" text-anchor="middle" fill="{text}">{}</text>"#,
                    x + w / 2.0,
                    y + row_h / 2.0 + 3.0,
                    e.micro_batch.unwrap_or(0)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::{simulate_schedule, PipelineSpec};

    #[test]
    fn charts_are_well_formed() {
        let series = [Series {
            name: "loss <a>".into(),
            points: vec![(0.0, 3.0), (1.0, f64::NAN), (2.0, 2.0), (3.0, 1.5)],
        }];
        let svg = line_chart("t", "step", "loss", &series, "sha256=00");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("loss &lt;a&gt;") && svg.contains("<!-- sha256=00 -->"));
        let empty = line_chart("t", "x", "y", &[], "");
        assert!(empty.contains("</svg>"));
        let t = simulate_schedule(&PipelineSpec::uniform(4, 2, 8)).unwrap();
        let g = gantt(&t, "");
        assert_eq!(g.matches("<rect").count(), 1 + 2 * 4 * 2 * 8);
    }
}
