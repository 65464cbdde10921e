//! Static SVG control chart: anomaly score per observation, the 2-of-4
//! consensus threshold, flagged points, and the earliest changepoint.

use std::fmt::Write as _;

use crate::record::RunRecord;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;
const SCORE_MAX: f64 = 4.0;
const CONSENSUS_LEVEL: f64 = 2.0;

struct Frame {
    n: usize,
}

impl Frame {
    fn x(&self, index: f64) -> f64 {
        let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        MARGIN_LEFT + span * index / (self.n.max(2) - 1) as f64
    }

    fn y(&self, score: f64) -> f64 {
        let span = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        HEIGHT - MARGIN_BOTTOM - span * (score / (SCORE_MAX * 1.05))
    }
}

/// Renders the control chart for a run record.
pub fn render(record: &RunRecord) -> String {
    let n = record.observations.len();
    let frame = Frame { n };
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="18" font-family="sans-serif" font-size="14">anomaly score (0-4) with consensus threshold</text>"#,
        MARGIN_LEFT
    );

    // Axes.
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black" stroke-width="1"/>"#
    );
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black" stroke-width="1"/>"#
    );
    for tick in 0..=4 {
        let y = frame.y(tick as f64);
        let _ = write!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black" stroke-width="1"/>"#,
            x0 - 4.0
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{tick}</text>"#,
            x0 - 7.0,
            y + 4.0
        );
    }
    let x_ticks = 6.min(n.saturating_sub(1)).max(1);
    for t in 0..=x_ticks {
        let index = (n.saturating_sub(1)) as f64 * t as f64 / x_ticks as f64;
        let x = frame.x(index);
        let _ = write!(
            svg,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="black" stroke-width="1"/>"#,
            y0 + 4.0
        );
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            (index as usize) + 1
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">observation</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 8.0
    );

    // Consensus threshold.
    let yc = frame.y(CONSENSUS_LEVEL);
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{yc}" x2="{x1}" y2="{yc}" stroke="firebrick" stroke-width="1" stroke-dasharray="6,4"/>"#
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="firebrick">threshold {CONSENSUS_LEVEL}</text>"#,
        x1 - 90.0,
        yc - 5.0
    );

    // Earliest changepoint marker.
    if let Some(tau) = record.summary.tau_star {
        let x = frame.x(tau as f64 - 0.5);
        let _ = write!(
            svg,
            r#"<line x1="{x}" y1="{y0}" x2="{x}" y2="{y1}" stroke="darkorange" stroke-width="1.5" stroke-dasharray="3,3"/>"#
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="darkorange">tau* = {tau}</text>"#,
            x + 4.0,
            y1 + 12.0
        );
    }

    // Score polyline.
    let mut points = String::new();
    for obs in &record.observations {
        let _ = write!(
            points,
            "{:.2},{:.2} ",
            frame.x(obs.index as f64),
            frame.y(obs.anomaly_score)
        );
    }
    let _ = write!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1"/>"#,
        points.trim_end()
    );

    // Flagged observations.
    for obs in &record.observations {
        if obs.y_hat == 1 {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="firebrick"/>"#,
                frame.x(obs.index as f64),
                frame.y(obs.anomaly_score)
            );
        }
    }

    svg.push_str("</svg>");
    svg
}
