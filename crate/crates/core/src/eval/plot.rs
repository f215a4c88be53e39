//! Minimal SVG charts of study tables: magnitude MAPE on the left, angle
//! MAE on the right. Tables whose rows all carry `x` are drawn as lines
//! (one per series), others as grouped bars.

use std::fmt::Write;

use super::StudyTable;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 55.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn series_names(t: &StudyTable) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in &t.rows {
        if !out.contains(&r.series) {
            out.push(r.series.clone());
        }
    }
    out
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) || !v.is_finite() {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * p).find(|&m| m >= v).unwrap_or(10.0 * p)
}

pub fn svg_chart(t: &StudyTable) -> String {
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(&t.name)
    );
    let series = series_names(t);
    let panels: [(&str, fn(&super::StudyRow) -> f64); 2] =
        [("Magnitude MAPE (%)", |r| r.mape), ("Angle MAE (deg)", |r| r.mae_deg)];
    let lines = !t.rows.is_empty() && t.rows.iter().all(|r| r.x.is_some());
    for (p, (title, value)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let ymax = nice_max(t.rows.iter().map(value).fold(0.0, f64::max));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 10.0,
            title
        );
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let v = ymax * k as f64 / 4.0;
            let y = y0 + PANEL_H * (1.0 - k as f64 / 4.0);
            let _ = writeln!(
                s,
                r##"<line x1="{x0}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                x0 + PANEL_W,
                x0 - 4.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        let ypos = |v: f64| y0 + PANEL_H * (1.0 - (v / ymax).clamp(0.0, 1.0));
        if lines {
            let xs: Vec<f64> = t.rows.iter().filter_map(|r| r.x).collect();
            let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let xpos = |x: f64| x0 + 20.0 + (PANEL_W - 40.0) * (x - lo) / span;
            for (i, name) in series.iter().enumerate() {
                let mut pts: Vec<(f64, f64)> = t
                    .rows
                    .iter()
                    .filter(|r| &r.series == name)
                    .map(|r| (xpos(r.x.unwrap()), ypos(value(r))))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let c = COLORS[i % COLORS.len()];
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                    path.join(" ")
                );
                for (x, y) in &pts {
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{c}"/>"#);
                }
            }
            let mut ticks: Vec<f64> = xs.clone();
            ticks.sort_by(f64::total_cmp);
            ticks.dedup();
            for x in ticks {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    xpos(x),
                    y0 + PANEL_H + 14.0,
                    fmt_tick(x)
                );
            }
            if let Some(label) = &t.x_label {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    x0 + PANEL_W / 2.0,
                    y0 + PANEL_H + 30.0,
                    escape(label)
                );
            }
        } else {
            let mut scenarios: Vec<&str> = Vec::new();
            for r in &t.rows {
                if !scenarios.contains(&r.scenario.as_str()) {
                    scenarios.push(&r.scenario);
                }
            }
            let slot = PANEL_W / scenarios.len().max(1) as f64;
            let bar = 0.8 * slot / series.len().max(1) as f64;
            for (j, sc) in scenarios.iter().enumerate() {
                for (i, name) in series.iter().enumerate() {
                    if let Some(r) = t.rows.iter().find(|r| r.scenario == *sc && &r.series == name) {
                        let x = x0 + j as f64 * slot + 0.1 * slot + i as f64 * bar;
                        let y = ypos(value(r));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x:.1}" y="{y:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                            y0 + PANEL_H - y,
                            COLORS[i % COLORS.len()]
                        );
                    }
                }
                let cx = x0 + (j as f64 + 0.5) * slot;
                let cy = y0 + PANEL_H + 12.0;
                let _ = writeln!(
                    s,
                    r#"<text x="{cx:.1}" y="{cy:.1}" text-anchor="end" transform="rotate(-30 {cx:.1} {cy:.1})">{}</text>"#,
                    escape(sc)
                );
            }
        }
    }
    for (i, name) in series.iter().enumerate() {
        let x = MARGIN + i as f64 * 140.0;
        let y = height - 12.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 9.0,
            COLORS[i % COLORS.len()],
            x + 14.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
