//! Self-contained SVG figure of a signal and its four components.

use std::fmt::Write as _;

use crate::error::{Result, TsdError};

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 150.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 24.0;
const GAP: f64 = 30.0;

const TRUTH_COLOR: &str = "black";
const PREDICTION_COLOR: &str = "red";

/// One row of the figure: ground truth plus an optional estimate.
#[derive(Debug, Clone)]
pub struct Panel<'a> {
    pub title: String,
    pub truth: &'a [f32],
    pub prediction: Option<&'a [f32]>,
}

fn range(series: &[&[f32]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s.iter() {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-9 {
        let mid = 0.5 * (hi + lo);
        return (mid - 1.0, mid + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, ys: &[f32], color: &str, x0: f64, w: f64, y0: f64, h: f64, (lo, hi): (f64, f64)) {
    let n = ys.len();
    let _ = write!(out, r#"    <polyline fill="none" stroke="{color}" stroke-width="1" points=""#);
    for (i, &y) in ys.iter().enumerate() {
        let px = x0 + w * i as f64 / (n.max(2) - 1) as f64;
        let py = y0 + h * (1.0 - (y as f64 - lo) / (hi - lo));
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{px:.2},{py:.2}");
    }
    out.push_str("\"/>\n");
}

/// Renders stacked panels sharing one x axis. All series must have the same
/// length.
pub fn render(panels: &[Panel<'_>]) -> Result<String> {
    let m = panels.first().map(|p| p.truth.len()).unwrap_or(0);
    if m == 0 {
        return Err(TsdError::input("nothing to plot"));
    }
    for p in panels {
        if p.truth.len() != m || p.prediction.is_some_and(|q| q.len() != m) {
            return Err(TsdError::input(format!("panel {:?} length differs from {m}", p.title)));
        }
    }
    let height = MARGIN_TOP + panels.len() as f64 * (PANEL_HEIGHT + GAP);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"  <rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        let y0 = MARGIN_TOP + i as f64 * (PANEL_HEIGHT + GAP);
        let mut series = vec![p.truth];
        series.extend(p.prediction);
        let r = range(&series);
        let _ = writeln!(out, r#"  <g class="panel" id="panel-{i}">"#);
        let _ = writeln!(
            out,
            r#"    <text x="{MARGIN_LEFT}" y="{:.2}">{}</text>"#,
            y0 - 6.0,
            escape(&p.title)
        );
        let _ = writeln!(
            out,
            r##"    <rect x="{MARGIN_LEFT}" y="{y0:.2}" width="{plot_w}" height="{PANEL_HEIGHT}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(
            out,
            r#"    <text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            MARGIN_LEFT - 4.0,
            y0 + 10.0,
            r.1
        );
        let _ = writeln!(
            out,
            r#"    <text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            MARGIN_LEFT - 4.0,
            y0 + PANEL_HEIGHT,
            r.0
        );
        polyline(&mut out, p.truth, TRUTH_COLOR, MARGIN_LEFT, plot_w, y0, PANEL_HEIGHT, r);
        if let Some(q) = p.prediction {
            polyline(&mut out, q, PREDICTION_COLOR, MARGIN_LEFT, plot_w, y0, PANEL_HEIGHT, r);
        }
        let _ = writeln!(out, "  </g>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// The standard five-row figure: `f`, then `c, s, o, n` with optional
/// estimates overlaid.
pub fn decomposition_figure(f: &[f32], truth: [&[f32]; 4], pred: Option<[&[f32]; 4]>) -> Result<String> {
    let names = ["cartoon c", "smooth s", "oscillatory o", "noise n"];
    let mut panels = vec![Panel {
        title: "observation f".into(),
        truth: f,
        prediction: None,
    }];
    for j in 0..4 {
        panels.push(Panel {
            title: names[j].into(),
            truth: truth[j],
            prediction: pred.map(|p| p[j]),
        });
    }
    render(&panels)
}
