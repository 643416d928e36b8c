// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG line charts for training curves.

use std::fmt::Write as _;

use crate::mask::TrainHistory;

/// A named curve. Non-finite points are skipped when drawing.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// One chart panel with its own y range.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 180.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Stacked panels sharing the x axis.
pub fn line_chart(title: &str, x_label: &str, panels: &[Panel]) -> String {
    let height = MARGIN_TOP + panels.len() as f64 * (PANEL_HEIGHT + GAP) + 10.0;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let finite = |s: &Series| -> Vec<(f64, f64)> {
        s.points
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect()
    };
    let (x0, x1) = range(
        panels
            .iter()
            .flat_map(|p| p.series.iter())
            .flat_map(|s| finite(s).into_iter().map(|(x, _)| x)),
    );
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (pi, panel) in panels.iter().enumerate() {
        let top = MARGIN_TOP + pi as f64 * (PANEL_HEIGHT + GAP);
        let bottom = top + PANEL_HEIGHT;
        let (y0, y1) = range(panel.series.iter().flat_map(|s| finite(s).into_iter().map(|(_, y)| y)));
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * PANEL_HEIGHT;
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_LEFT}" y="{top}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="gray"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4.0,
            top + 10.0,
            fmt_tick(y1)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4.0,
            fmt_tick(y0)
        );
        let _ = writeln!(
            out,
            r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
            top + PANEL_HEIGHT / 2.0,
            top + PANEL_HEIGHT / 2.0,
            escape(&panel.y_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN_LEFT}" y="{}">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            bottom + 14.0,
            fmt_tick(x0),
            WIDTH - MARGIN_RIGHT,
            bottom + 14.0,
            fmt_tick(x1)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            bottom + 14.0,
            escape(x_label)
        );
        for (si, s) in panel.series.iter().enumerate() {
            let color = COLORS[si % COLORS.len()];
            let pts: Vec<String> = finite(s)
                .into_iter()
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                escape(&s.name),
                pts.join(" ")
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
                WIDTH - MARGIN_RIGHT - 4.0,
                top + 14.0 + 13.0 * si as f64,
                escape(&s.name)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Train loss, behavior loss and soft-ablated edge count against step.
pub fn history_chart(title: &str, history: &TrainHistory) -> String {
    let pick = |f: fn(&crate::mask::HistoryRecord) -> f64, name: &str| Series {
        name: name.to_string(),
        points: history.records.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    let mut panels = vec![
        Panel {
            y_label: "train loss".into(),
            series: vec![pick(|r| r.train_loss, "train")],
        },
        Panel {
            y_label: "behavior loss".into(),
            series: vec![pick(|r| r.behavior_loss, "behavior")],
        },
    ];
    if history.records.iter().any(|r| r.soft_ablated_count > 0 || r.lambda != 0.0) {
        panels.push(Panel {
            y_label: "soft-ablated edges".into(),
            series: vec![pick(|r| r.soft_ablated_count as f64, "ablated")],
        });
    }
    panels.retain(|p| p.series.iter().any(|s| s.points.iter().any(|(_, y)| y.is_finite())));
    line_chart(title, "step", &panels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::HistoryRecord;

    fn history(n: usize) -> TrainHistory {
        TrainHistory {
            records: (0..n as u64)
                .map(|step| HistoryRecord {
                    step,
                    train_loss: 1.0 / (step as f64 + 1.0),
                    behavior_loss: step as f64,
                    lambda: step as f64 * 0.1,
                    reg_value: 0.0,
                    soft_ablated_count: step as usize,
                })
                .collect(),
            warnings: vec![],
        }
    }

    fn polyline_counts(svg: &str) -> Vec<usize> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| {
                let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
                pts.split_whitespace().count()
            })
            .collect()
    }

    #[test]
    fn polylines_keep_every_point() {
        let svg = history_chart("run", &history(37));
        assert_eq!(polyline_counts(&svg), vec![37, 37, 37]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn non_finite_points_are_skipped() {
        let mut h = history(5);
        h.records.iter_mut().for_each(|r| {
            r.train_loss = f64::NAN;
            r.lambda = 0.0;
            r.soft_ablated_count = 0;
        });
        let svg = history_chart("ga", &h);
        assert_eq!(polyline_counts(&svg), vec![5]);
    }

    #[test]
    fn titles_are_escaped() {
        let svg = line_chart("a<b", "x", &[]);
        assert!(svg.contains("a&lt;b"));
    }
}
