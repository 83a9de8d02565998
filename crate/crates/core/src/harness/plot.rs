use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::results::{mean_std, ResultRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One rendered figure.
#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub experiment: String,
    pub environment: String,
    pub metric: String,
    pub series: usize,
    pub svg: String,
}

impl Plot {
    pub fn file_name(&self) -> String {
        format!("{}_{}.svg", self.experiment, self.environment)
    }
}

/// The metric a figure of this experiment shows.
pub fn primary_metric(experiment: &str) -> &'static str {
    match experiment {
        "stochasticity" => "avg_reward",
        "entropy_gap" => "entropy",
        _ => "test_accuracy",
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

/// One plot per (experiment, environment). `methods` keeps only the listed
/// methods when non-empty; figures left without series are skipped.
pub fn emit_plots(rows: &[ResultRow], methods: &[String]) -> Vec<Plot> {
    let mut figures: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if r.metric != primary_metric(&r.experiment) {
            continue;
        }
        if !methods.is_empty() && !methods.contains(&r.method) {
            continue;
        }
        figures
            .entry((r.experiment.clone(), r.environment.clone()))
            .or_default()
            .push(r);
    }
    if figures.is_empty() {
        log::warn!("no rows left to plot");
    }
    figures
        .into_iter()
        .map(|((experiment, environment), rows)| {
            let metric = primary_metric(&experiment).to_string();
            let mut by_series: BTreeMap<(String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
            for r in rows {
                by_series
                    .entry((r.method.clone(), r.arch.clone()))
                    .or_default()
                    .entry(r.split_fraction.to_bits())
                    .or_default()
                    .push(r.value);
            }
            let series: Vec<Series> = by_series
                .into_iter()
                .map(|((method, arch), splits)| {
                    let mut points: Vec<(f64, f64, f64)> = splits
                        .into_iter()
                        .map(|(x, v)| {
                            let (m, s) = mean_std(&v);
                            (f64::from_bits(x), m, s)
                        })
                        .collect();
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series {
                        label: format!("{method} ({arch})"),
                        points,
                    }
                })
                .collect();
            let svg = render(&format!("{experiment}: {environment}"), &metric, &series);
            Plot {
                experiment,
                environment,
                metric,
                series: series.len(),
                svg,
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(title: &str, metric: &str, series: &[Series]) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let log_x = x0 > 0.0 && x1 / x0 >= 10.0;
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let ticks_x: Vec<f64> = {
        let mut t = xs.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    };
    (x0, x1) = (tx(x0), tx(x1));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let (mut y0, mut y1) = series
        .iter()
        .flat_map(|s| s.points.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1 - p.2), b.max(p.1 + p.2)));
    if metric == "test_accuracy" || metric == "avg_reward" {
        (y0, y1) = (0.0, 1.0);
    } else if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="black"/>"#
    );
    for &t in &ticks_x {
        let x = px(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"##,
            TOP,
            TOP + plot_h,
            TOP + plot_h + 14.0
        );
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT + plot_w,
            LEFT - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">train split{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        if log_x { " (log scale)" } else { "" }
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(metric)
    );
    for (k, s) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = s.points.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1 + p.2))).collect();
        let lower: Vec<String> = s.points.iter().rev().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1 - p.2))).collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{} {}" fill="{colour}" fill-opacity="0.15" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = s.points.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for p in &s.points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#,
                px(p.0),
                py(p.1)
            );
        }
        let ly = TOP + 12.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, split: f64, seed: u64, value: f64) -> ResultRow {
        ResultRow {
            experiment: "complexity_pos".into(),
            environment: "maze10".into(),
            method: method.into(),
            arch: "MLP5".into(),
            split_fraction: split,
            seed,
            metric: "test_accuracy".into(),
            value,
            epochs_run: 0,
            wall_time: 0.0,
        }
    }

    #[test]
    fn one_series_per_method() {
        let rows = vec![
            row("bc", 0.1, 0, 0.4),
            row("bc", 1.0, 0, 0.9),
            row("vmidm", 0.1, 0, 0.7),
            row("vmidm", 1.0, 0, 1.0),
        ];
        let plots = emit_plots(&rows, &[]);
        assert_eq!(plots.len(), 1);
        assert_eq!(plots[0].series, 2);
        assert_eq!(plots[0].svg.matches("<polyline").count(), 2);
        assert_eq!(plots[0].file_name(), "complexity_pos_maze10.svg");
    }

    #[test]
    fn filter_without_matches_gives_nothing() {
        let rows = vec![row("bc", 0.1, 0, 0.4)];
        assert!(emit_plots(&rows, &["lapo".to_string()]).is_empty());
    }

    #[test]
    fn rendering_is_stable() {
        let rows = vec![row("bc", 0.1, 0, 0.4), row("bc", 0.1, 1, 0.6), row("bc", 1.0, 0, 0.9)];
        assert_eq!(emit_plots(&rows, &[]), emit_plots(&rows, &[]));
    }
}
