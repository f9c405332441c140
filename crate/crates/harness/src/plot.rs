//! Standalone SVG line charts: one polyline per arm (mean over trials) and,
//! with two or more trials, a shaded ±1 standard deviation band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::output::write_atomic;
use crate::tables::{read_points, PlotPoint};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub trials: usize,
    /// (x, mean, std), sorted by x.
    pub points: Vec<(f64, f64, f64)>,
}

/// Groups points by arm (first-appearance order) and aggregates trials at
/// each distinct x.
pub fn aggregate(points: &[PlotPoint]) -> Vec<Series> {
    let mut order: Vec<String> = Vec::new();
    let mut by_arm: BTreeMap<String, Vec<&PlotPoint>> = BTreeMap::new();
    for p in points {
        if !by_arm.contains_key(&p.arm) {
            order.push(p.arm.clone());
        }
        by_arm.entry(p.arm.clone()).or_default().push(p);
    }
    order
        .into_iter()
        .map(|arm| {
            let pts = &by_arm[&arm];
            let mut trials: Vec<usize> = pts.iter().map(|p| p.trial).collect();
            trials.sort_unstable();
            trials.dedup();
            let mut at_x: Vec<(f64, Vec<f64>)> = Vec::new();
            for p in pts {
                match at_x.iter_mut().find(|(x, _)| x.to_bits() == p.x.to_bits()) {
                    Some((_, ys)) => ys.push(p.y),
                    None => at_x.push((p.x, vec![p.y])),
                }
            }
            at_x.sort_by(|a, b| a.0.total_cmp(&b.0));
            let points = at_x
                .into_iter()
                .map(|(x, ys)| {
                    let n = ys.len() as f64;
                    let mean = ys.iter().sum::<f64>() / n;
                    let std = if ys.len() > 1 {
                        (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                    } else {
                        0.0
                    };
                    (x, mean, std)
                })
                .collect();
            Series {
                name: arm,
                trials: trials.len(),
                points,
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, sd) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - sd);
        y1 = y1.max(m + sd);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        escape(title)
    );
    // axes and ticks
    let (bx, by) = (MARGIN_L, MARGIN_T + plot_h);
    let _ = writeln!(svg, r#"<line x1="{bx:.1}" y1="{by:.1}" x2="{:.1}" y2="{by:.1}" stroke="black"/>"#, bx + plot_w);
    let _ = writeln!(svg, r#"<line x1="{bx:.1}" y1="{MARGIN_T:.1}" x2="{bx:.1}" y2="{by:.1}" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(svg, r#"<line x1="{px:.1}" y1="{by:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#, by + 5.0);
        let _ = writeln!(svg, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, by + 18.0, tick(xv));
        let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{py:.1}" x2="{bx:.1}" y2="{py:.1}" stroke="black"/>"#, bx - 5.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, bx - 8.0, py + 4.0, tick(yv));
    }
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if s.trials > 1 {
            let upper = s.points.iter().map(|&(x, m, sd)| format!("{:.2},{:.2}", sx(x), sy(m + sd)));
            let lower = s.points.iter().rev().map(|&(x, m, sd)| format!("{:.2},{:.2}", sx(x), sy(m - sd)));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = s.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" data-arm="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&s.name),
            pts.join(" ")
        );
        let ly = MARGIN_T + 14.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="14" height="4" fill="{color}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 6.0,
            lx + 20.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders one SVG per CSV into `out_dir`, named after the CSV file.
pub fn emit_plots(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in csv_paths {
        let (schema, points) = read_points(path)?;
        let (x_label, y_label) = schema.axes();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let svg = render(schema.title(), x_label, y_label, &aggregate(&points));
        let target = out_dir.join(format!("{stem}.svg"));
        write_atomic(&target, svg.as_bytes())?;
        written.push(target);
    }
    Ok(written)
}
