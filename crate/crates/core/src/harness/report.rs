//! Four-panel SVG summary of the robustness and retraining reports.

use std::fmt::Write as _;

use super::config::{variant_tag, ORIGINAL_TAG};
use super::experiment::{RobustnessReport, VariantSummary};
use crate::degrade::Mode;
use crate::error::{Error, Result};

const PANEL_W: f64 = 240.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 40.0;
const GAP: f64 = 30.0;
const FACTORS: [u32; 4] = [1, 4, 8, 16];

struct Point {
    factor: u32,
    mean: f64,
    std: f64,
}

struct Panel {
    title: String,
    points: Vec<Point>,
}

fn point(factor: u32, s: &VariantSummary) -> Point {
    Point {
        factor,
        mean: s.auroc_mean,
        std: s.auroc_std,
    }
}

fn panels(robust: &RobustnessReport, retrain: Option<&RobustnessReport>) -> Vec<Panel> {
    let original = robust.summary(ORIGINAL_TAG);
    let series = |report: Option<&RobustnessReport>, mode: Mode, base: Option<&VariantSummary>| {
        let mut pts: Vec<Point> = base.map(|b| point(1, b)).into_iter().collect();
        if let Some(r) = report {
            for k in [4, 8, 16] {
                if let Some(s) = r.summary(&variant_tag(mode, k)) {
                    pts.push(point(k, s));
                }
            }
        }
        pts
    };
    let retrain_base = retrain.and_then(|r| r.baseline.as_ref()).or(original);
    vec![
        Panel {
            title: "Reduced current".into(),
            points: series(Some(robust), Mode::Current, original),
        },
        Panel {
            title: "Reduced projections".into(),
            points: series(Some(robust), Mode::Projections, original),
        },
        Panel {
            title: "Limited angle".into(),
            points: series(Some(robust), Mode::Angle, original),
        },
        Panel {
            title: "Limited angle, retrained".into(),
            points: series(retrain, Mode::Angle, retrain_base),
        },
    ]
}

fn x_of(factor: u32) -> f64 {
    let pos = FACTORS.iter().position(|&f| f == factor).unwrap_or(0) as f64;
    PANEL_W * (0.1 + 0.8 * pos / (FACTORS.len() - 1) as f64)
}

/// Shared y-range: covers every error bar, rounded out to tenths.
fn y_range(panels: &[Panel]) -> (f64, f64) {
    let lo = panels
        .iter()
        .flat_map(|p| p.points.iter().map(|q| q.mean - q.std))
        .fold(f64::INFINITY, f64::min);
    let hi = panels
        .iter()
        .flat_map(|p| p.points.iter().map(|q| q.mean + q.std))
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = ((lo * 10.0).floor() / 10.0).clamp(0.0, 0.9);
    let hi = ((hi * 10.0).ceil() / 10.0).clamp(lo + 0.1, 1.0);
    (lo, hi)
}

/// Renders mean AUROC against reduction factor with standard-deviation
/// error bars. The robustness report must be nonempty.
pub fn render_report(robust: &RobustnessReport, retrain: Option<&RobustnessReport>) -> Result<String> {
    if robust.rows.is_empty() {
        return Err(Error::Domain("cannot render an empty report".into()));
    }
    let panels = panels(robust, retrain);
    let (lo, hi) = y_range(&panels);
    let y_of = |v: f64| PANEL_H * (1.0 - (v - lo) / (hi - lo));
    let width = MARGIN_L + 4.0 * PANEL_W + 3.0 * GAP + 20.0;
    let height = MARGIN_T + PANEL_H + 60.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let ox = MARGIN_L + i as f64 * (PANEL_W + GAP);
        let _ = writeln!(s, r#"<g class="panel" transform="translate({ox},{MARGIN_T})">"#);
        let _ = writeln!(
            s,
            r#"<rect class="frame" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="-10" text-anchor="middle" font-size="12">{}</text>"#,
            PANEL_W / 2.0,
            panel.title
        );
        for f in FACTORS {
            let label = if f == 1 { "1 (orig.)".to_string() } else { format!("{f}x") };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                x_of(f),
                PANEL_H + 16.0
            );
        }
        if i == 0 {
            let mut t = lo;
            while t <= hi + 1e-9 {
                let y = y_of(t);
                let _ = writeln!(s, r#"<text x="-6" y="{}" text-anchor="end">{t:.1}</text>"#, y + 4.0);
                let _ = writeln!(s, r##"<line x1="0" x2="4" y1="{y}" y2="{y}" stroke="black"/>"##);
                t += 0.1;
            }
            let _ = writeln!(
                s,
                r#"<text transform="translate(-40,{}) rotate(-90)" text-anchor="middle">Mean AUROC</text>"#,
                PANEL_H / 2.0
            );
        }
        if panel.points.len() > 1 {
            let path: Vec<String> = panel
                .points
                .iter()
                .map(|p| format!("{:.3},{:.3}", x_of(p.factor), y_of(p.mean)))
                .collect();
            let _ = writeln!(
                s,
                r##"<polyline class="mean" points="{}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>"##,
                path.join(" ")
            );
        }
        for p in &panel.points {
            let x = x_of(p.factor);
            let (y1, y2) = (y_of(p.mean - p.std), y_of(p.mean + p.std));
            let _ = writeln!(
                s,
                r##"<line class="errorbar" x1="{x:.3}" x2="{x:.3}" y1="{y1:.3}" y2="{y2:.3}" stroke="#1f5fa8"/>"##
            );
            let _ = writeln!(
                s,
                r##"<circle cx="{x:.3}" cy="{:.3}" r="3" fill="#1f5fa8"><title>{:.4} ± {:.4}</title></circle>"##,
                y_of(p.mean),
                p.mean,
                p.std
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Reduction factor</text>"#,
        width / 2.0,
        height - 12.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Per-variant summary table for both reports.
pub fn summary_csv(robust: &RobustnessReport, retrain: Option<&RobustnessReport>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "dataset_tag",
        "n_seeds",
        "auroc_mean",
        "auroc_std",
        "kappa_mean",
        "kappa_std",
        "sensitivity_mean",
        "sensitivity_std",
        "specificity_mean",
        "specificity_std",
    ])?;
    let mut put = |model: &str, s: &VariantSummary| {
        w.write_record([
            model.to_string(),
            s.dataset_tag.clone(),
            s.n_seeds.to_string(),
            s.auroc_mean.to_string(),
            s.auroc_std.to_string(),
            s.kappa_mean.to_string(),
            s.kappa_std.to_string(),
            s.sensitivity_mean.to_string(),
            s.sensitivity_std.to_string(),
            s.specificity_mean.to_string(),
            s.specificity_std.to_string(),
        ])
    };
    for s in &robust.summaries {
        put("baseline", s)?;
    }
    if let Some(r) = retrain {
        for s in &r.summaries {
            put("retrained", s)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Domain(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
