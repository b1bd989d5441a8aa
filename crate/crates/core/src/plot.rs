//! Minimal static SVG charts: a training curve and grouped RMSE bars.

use std::fmt::Write as _;

use crate::data::STEP_MINUTES;
use crate::evaluation::Evaluation;
use crate::training::EpochRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<path d="M{MARGIN},{MARGIN} V{y} H{x}" stroke="#333" fill="none"/>"##,
        y = HEIGHT - MARGIN,
        x = WIDTH - MARGIN
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Training loss and validation RMSE against epoch, each scaled to its own
/// range.
pub fn loss_curve_svg(history: &[EpochRecord]) -> String {
    let mut s = header("Training curve");
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let n = history.len().max(2) - 1;
    let series: [(&str, Vec<f64>); 2] = [
        ("train loss", history.iter().map(|r| r.train_loss).collect()),
        ("val RMSE (km/h)", history.iter().map(|r| r.val_rmse).collect()),
    ];
    for (k, (name, values)) in series.iter().enumerate() {
        let (lo, hi) = range(values.iter().copied());
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = MARGIN + plot_w * i as f64 / n as f64;
                let y = HEIGHT - MARGIN - plot_h * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.join(" "),
            COLORS[k]
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{} [{lo:.4} – {hi:.4}]</text>"#,
            MARGIN + 8.0,
            MARGIN + 14.0 * (k as f64 + 1.0),
            COLORS[k],
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch (1 – {})</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        history.len()
    );
    s.push_str("</svg>\n");
    s
}

/// RMSE per reporting horizon, one bar per model.
pub fn rmse_bars_svg(evaluations: &[Evaluation]) -> String {
    let mut s = header("RMSE by horizon");
    let horizons: Vec<usize> = evaluations
        .first()
        .map(|e| e.reports.iter().map(|r| r.horizon_steps).collect())
        .unwrap_or_default();
    let (_, hi) = range(
        evaluations
            .iter()
            .flat_map(|e| e.reports.iter().map(|r| r.rmse))
            .chain([0.0]),
    );
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let group_w = plot_w / horizons.len().max(1) as f64;
    let bar_w = group_w * 0.8 / evaluations.len().max(1) as f64;
    for (g, h) in horizons.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (m, e) in evaluations.iter().enumerate() {
            let Some(r) = e.reports.iter().find(|r| r.horizon_steps == *h) else {
                continue;
            };
            let bh = plot_h * r.rmse / hi;
            let x = gx + m as f64 * bar_w;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{}"><title>{} {:.3}</title></rect>"#,
                HEIGHT - MARGIN - bh,
                bar_w * 0.95,
                COLORS[m % COLORS.len()],
                escape(&e.model),
                r.rmse
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{} min</text>"#,
            gx + group_w * 0.4,
            HEIGHT - MARGIN + 16.0,
            *h as i64 * STEP_MINUTES
        );
    }
    for (m, e) in evaluations.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 100.0,
            MARGIN + 14.0 * (m as f64 + 1.0),
            COLORS[m % COLORS.len()],
            escape(&e.model)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">RMSE (km/h), max {hi:.3}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::HorizonReport;

    #[test]
    fn charts_are_well_formed() {
        let history: Vec<EpochRecord> = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val_rmse: 3.0 - e as f64 * 0.1,
                learning_rate: 1e-3,
                seconds: 0.0,
            })
            .collect();
        let svg = loss_curve_svg(&history);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);

        let report = |h, rmse| HorizonReport {
            horizon_steps: h,
            rmse,
            mape: 0.0,
            mad: 0.0,
            mase: 0.0,
            per_segment_rmse: vec![],
            mape_excluded: 0,
            mase_excluded: 0,
        };
        let evals = vec![
            Evaluation {
                model: "A<".into(),
                reports: vec![report(6, 1.0), report(12, 2.0)],
                window_losses: vec![],
            },
            Evaluation {
                model: "B".into(),
                reports: vec![report(6, 1.5), report(12, 2.5)],
                window_losses: vec![],
            },
        ];
        let svg = rmse_bars_svg(&evals);
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!(svg.contains("A&lt;") && svg.contains("60 min"));
    }
}
