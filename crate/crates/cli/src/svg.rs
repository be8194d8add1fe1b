//! Minimal static SVG emission: line plots and grid heatmaps, data-first
//! with no external services.

use kf2c::sim::{StepRecord, SweepRow};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn header(title: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{x}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>
"#,
        x = W / 2.0
    )
}

fn axis_box() -> String {
    format!(
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="black" stroke-width="1"/>
"#,
        w = W - 2.0 * MARGIN,
        h = H - 2.0 * MARGIN
    )
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    if points.is_empty() {
        return String::new();
    }
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>
"#,
        coords.join(" ")
    )
}

fn scale(points: &[(f64, f64)]) -> impl Fn(f64, f64) -> (f64, f64) {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || y1 <= y0 {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    move |x: f64, y: f64| {
        let px = MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let py = H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        (px, py)
    }
}

/// Predicted-covariance trace over time.
pub fn trace_plot(records: &[StepRecord]) -> String {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.k as f64, r.trace)).collect();
    let map = scale(&pts);
    let mapped: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| map(x, y)).collect();
    let mut out = header("predicted covariance trace");
    out.push_str(&axis_box());
    out.push_str(&polyline(&mapped, "teal"));
    out.push_str("</svg>\n");
    out
}

/// Per-channel feedback periods chosen by the iterative scheduler.
pub fn period_plot(records: &[StepRecord]) -> String {
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for r in records {
        if let Some((a, b)) = &r.periods {
            if let Some(t) = a.as_steps() {
                p1.push((r.k as f64, t as f64));
            }
            if let Some(t) = b.as_steps() {
                p2.push((r.k as f64, t as f64));
            }
        }
    }
    let mut all = p1.clone();
    all.extend(p2.iter().copied());
    let map = scale(&all);
    let m1: Vec<(f64, f64)> = p1.iter().map(|&(x, y)| map(x, y)).collect();
    let m2: Vec<(f64, f64)> = p2.iter().map(|&(x, y)| map(x, y)).collect();
    let mut out = header("feedback periods per channel");
    out.push_str(&axis_box());
    out.push_str(&polyline(&m1, "teal"));
    out.push_str(&polyline(&m2, "darkorange"));
    out.push_str(&format!(
        r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="12" fill="teal">channel 1</text>
<text x="{x}" y="{y2}" font-family="sans-serif" font-size="12" fill="darkorange">channel 2</text>
"#,
        x = W - MARGIN - 90.0,
        y = MARGIN + 16.0,
        y2 = MARGIN + 32.0
    ));
    out.push_str("</svg>\n");
    out
}

fn heat_color(t: f64) -> String {
    // light to dark teal
    let t = t.clamp(0.0, 1.0);
    let r = (235.0 - 200.0 * t) as u8;
    let g = (245.0 - 140.0 * t) as u8;
    let b = (245.0 - 120.0 * t) as u8;
    format!("rgb({r},{g},{b})")
}

/// Analytical bound vs simulated trace over the rate grid: cell color is
/// the bound (log scale), the inner square the simulated trace.
pub fn sweep_heatmap(v1: &[f64], v2: &[f64], rows: &[SweepRow]) -> String {
    let mut out = header("analytical bound (outer) vs simulated trace (inner)");
    let cell_w = (W - 2.0 * MARGIN) / v1.len() as f64;
    let cell_h = (H - 2.0 * MARGIN) / v2.len() as f64;
    let taus: Vec<f64> = rows.iter().filter_map(|r| r.tau).collect();
    let (lo, hi) = taus.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| {
        (a.min(t), b.max(t))
    });
    let norm = |t: f64| -> f64 {
        if !lo.is_finite() || hi <= lo {
            0.5
        } else {
            ((t.ln() - lo.ln()) / (hi.ln() - lo.ln())).clamp(0.0, 1.0)
        }
    };
    for row in rows {
        let i = v1.iter().position(|&v| v == row.lambda1).unwrap_or(0);
        let j = v2.iter().position(|&v| v == row.lambda2).unwrap_or(0);
        let x = MARGIN + i as f64 * cell_w;
        let y = H - MARGIN - (j + 1) as f64 * cell_h;
        match row.tau {
            Some(t) => {
                out.push_str(&format!(
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="{}" stroke="gray" stroke-width="0.4"/>
"#,
                    heat_color(norm(t))
                ));
            }
            None => {
                out.push_str(&format!(
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w:.1}" height="{cell_h:.1}" fill="lightgray" stroke="gray" stroke-width="0.4"/>
<line x1="{x:.1}" y1="{y:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="gray" stroke-width="0.6"/>
"#,
                    x2 = x + cell_w,
                    y2 = y + cell_h
                ));
            }
        }
        if let Some(s) = row.sim_steady_trace {
            let inset_w = cell_w * 0.4;
            let inset_h = cell_h * 0.4;
            out.push_str(&format!(
                r#"<rect x="{:.1}" y="{:.1}" width="{inset_w:.1}" height="{inset_h:.1}" fill="{}" stroke="black" stroke-width="0.3"/>
"#,
                x + (cell_w - inset_w) / 2.0,
                y + (cell_h - inset_h) / 2.0,
                heat_color(norm(s.max(1e-300)))
            ));
        }
    }
    // axis labels
    for (i, v) in v1.iter().enumerate() {
        out.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>
"#,
            MARGIN + (i as f64 + 0.5) * cell_w,
            H - MARGIN + 14.0
        ));
    }
    for (j, v) in v2.iter().enumerate() {
        out.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v}</text>
"#,
            MARGIN - 6.0,
            H - MARGIN - (j as f64 + 0.5) * cell_h + 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}
