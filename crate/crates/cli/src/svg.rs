//! Deterministic SVG charts and scan renderings.

use std::fmt::Write;

use vortexlab::data::{CenterPair, PointCloudFrame};
use vortexlab::io::MetricRecord;

use crate::error::CliError;

pub const PORT_COLOR: &str = "#2ca02c";
pub const STARBOARD_COLOR: &str = "#ff7f0e";
const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#9467bd", "#8c564b"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0}" height="{H:.0}" viewBox="0 0 {W:.0} {H:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{W:.0}" height="{H:.0}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
}

fn axes(out: &mut String, xr: (f64, f64), yr: (f64, f64), x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<g class="axes" stroke="black" stroke-width="1">"#);
    let _ = writeln!(out, r#"<line x1="{x0:.1}" y1="{y1:.1}" x2="{x1:.1}" y2="{y1:.1}"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}"/>"#);
    let _ = writeln!(out, "</g>");
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y1 - f * (y1 - y0);
        let _ = writeln!(out, r#"<line x1="{px:.1}" y1="{y1:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            y1 + 18.0,
            xr.0 + f * (xr.1 - xr.0)
        );
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            x0 - 6.0,
            py + 4.0,
            yr.0 + f * (yr.1 - yr.0)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, esc(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

/// Line chart with one polyline per series and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String, CliError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(CliError::runtime("nothing to plot: empty series"));
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(CliError::runtime("nothing to plot: non-finite values"));
    }
    let fold =
        |f: fn(&(f64, f64)) -> f64| all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (xl, xh) = fold(|p| p.0);
    let (yl, yh) = fold(|p| p.1);
    let xr = if xh > xl { (xl, xh) } else { (xl - 1.0, xh + 1.0) };
    let yr = span(yl, yh);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, xr, yr, x_label, y_label);
    let px = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - RIGHT - LEFT);
    let py = |y: f64| H - BOTTOM - (y - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);
    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            esc(&s.name),
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = W - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, esc(&s.name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn split_of(records: &[MetricRecord]) -> Result<Vec<&MetricRecord>, CliError> {
    let split = records.iter().find(|r| r.split == "train").or(records.first()).map(|r| r.split.clone());
    let split = split.ok_or_else(|| CliError::runtime("metric log has no rows"))?;
    Ok(records.iter().filter(|r| r.split == split).collect())
}

/// Alignment and uniformity of the training split against epoch.
pub fn align_uniform(records: &[MetricRecord]) -> Result<String, CliError> {
    let rows = split_of(records)?;
    let series = vec![
        Series { name: "alignment".into(), points: rows.iter().map(|r| (r.epoch as f64, r.alignment)).collect() },
        Series { name: "uniformity".into(), points: rows.iter().map(|r| (r.epoch as f64, r.uniformity)).collect() },
    ];
    line_chart("Alignment and uniformity during pretraining", "epoch", "value", &series)
}

/// InfoNCE loss per split against epoch.
pub fn loss_curves(records: &[MetricRecord]) -> Result<String, CliError> {
    if records.is_empty() {
        return Err(CliError::runtime("metric log has no rows"));
    }
    let mut splits: Vec<String> = records.iter().map(|r| r.split.clone()).collect();
    splits.dedup();
    splits.sort();
    splits.dedup();
    let series: Vec<Series> = splits
        .iter()
        .map(|s| Series {
            name: format!("{s} loss"),
            points: records.iter().filter(|r| &r.split == s).map(|r| (r.epoch as f64, r.loss)).collect(),
        })
        .collect();
    line_chart("InfoNCE loss during pretraining", "epoch", "loss", &series)
}

fn velocity_color(v: f64, vmax: f64) -> String {
    let t = (v / vmax).clamp(-1.0, 1.0);
    let (r, g, b) =
        if t >= 0.0 { (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t)) } else { (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0) };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// One scan frame coloured by radial velocity, with ground-truth circles and
/// predicted crosses. Port is green, starboard orange.
pub fn render_frame(title: &str, frame: &PointCloudFrame, truth: &CenterPair, pred: &CenterPair) -> Result<String, CliError> {
    if frame.points.is_empty() {
        return Err(CliError::runtime("frame has no points to render"));
    }
    let mut ys: Vec<f64> = frame.points.iter().map(|p| p[0]).collect();
    let mut zs: Vec<f64> = frame.points.iter().map(|p| p[1]).collect();
    for c in truth.iter().chain(pred) {
        ys.push(c[0]);
        zs.push(c[1]);
    }
    let mm = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (yr, zr) = (span(mm(&ys).0, mm(&ys).1), span(mm(&zs).0, mm(&zs).1));
    if !(yr.0.is_finite() && yr.1.is_finite() && zr.0.is_finite() && zr.1.is_finite()) {
        return Err(CliError::runtime("non-finite coordinates in frame"));
    }
    let (pw, ph) = (W - RIGHT - LEFT, H - BOTTOM - TOP);
    let scale = (pw / (yr.1 - yr.0)).min(ph / (zr.1 - zr.0));
    let px = |y: f64| LEFT + (y - yr.0) * scale;
    let py = |z: f64| H - BOTTOM - (z - zr.0) * scale;
    let vmax = frame.points.iter().map(|p| p[2].abs()).fold(0.0, f64::max).max(1e-6);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, (yr.0, yr.0 + pw / scale), (zr.0, zr.0 + ph / scale), "lateral position y (m)", "altitude z (m)");
    let _ = writeln!(out, r#"<g class="points">"#);
    for p in &frame.points {
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="2" height="2" fill="{}"/>"#,
            px(p[0]) - 1.0,
            py(p[1]) - 1.0,
            velocity_color(p[2], vmax)
        );
    }
    let _ = writeln!(out, "</g>");
    for (k, (side, color)) in [("port", PORT_COLOR), ("starboard", STARBOARD_COLOR)].into_iter().enumerate() {
        let (gx, gy) = (px(truth[k][0]), py(truth[k][1]));
        let _ = writeln!(
            out,
            r#"<circle class="gt {side}" cx="{gx:.2}" cy="{gy:.2}" r="8" fill="none" stroke="{color}" stroke-width="2.5"/>"#
        );
        let (x, y) = (px(pred[k][0]), py(pred[k][1]));
        let _ = writeln!(
            out,
            r#"<path class="pred {side}" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{color}" stroke-width="2.5"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
    }
    let lx = W - RIGHT + 15.0;
    for (i, (text, color)) in [("port", PORT_COLOR), ("starboard", STARBOARD_COLOR)].into_iter().enumerate() {
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, ly - 6.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{text}</text>"#, lx + 18.0, ly + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{lx:.1}" y="{:.1}">ring: ground truth</text>"#, TOP + 60.0);
    let _ = writeln!(out, r#"<text x="{lx:.1}" y="{:.1}">x: prediction</text>"#, TOP + 78.0);
    let _ = writeln!(out, r#"<text x="{lx:.1}" y="{:.1}">red/blue: v_r &gt; 0 / &lt; 0</text>"#, TOP + 96.0);
    out.push_str("</svg>\n");
    Ok(out)
}
