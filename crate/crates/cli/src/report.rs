//! Plain SVG line plots for metrics and POD curves.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use weldscan::evalnde::METRICS_HEADER;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 420.0;
pub const LEFT: f64 = 80.0;
pub const RIGHT: f64 = 600.0;
pub const TOP: f64 = 40.0;
pub const BOTTOM: f64 = 360.0;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let t = |v: f64| if log { v.ln() } else { v };
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(t(v)), b.max(t(v))));
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi, log }
    }

    /// Map a data value onto `[a, b]`.
    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        let v = if self.log { v.ln() } else { v };
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }

    fn value_at(&self, frac: f64) -> f64 {
        let v = self.lo + frac * (self.hi - self.lo);
        if self.log {
            v.exp()
        } else {
            v
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot whose axes span exactly the finite data range.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> Result<String> {
    let finite = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (!log_x || x > 0.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(finite).collect();
    if pts.is_empty() {
        bail!("nothing to plot for '{title}'");
    }
    let xa = Axis::new(pts.iter().map(|p| p.0), log_x);
    let ya = Axis::new(pts.iter().map(|p| p.1), false);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        RIGHT - LEFT,
        BOTTOM - TOP
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = LEFT + f * (RIGHT - LEFT);
        let y = BOTTOM - f * (BOTTOM - TOP);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{BOTTOM}" x2="{x:.2}" y2="{}" stroke="black"/>"#, BOTTOM + 5.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, BOTTOM + 18.0, tick(xa.value_at(f)));
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, y + 4.0, tick(ya.value_at(f)));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + RIGHT) / 2.0, HEIGHT - 22.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|p| finite(p))
            .map(|&(x, y)| format!("{:.3},{:.3}", xa.map(x, LEFT, RIGHT), ya.map(y, BOTTOM, TOP)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            escape(&s.name),
            coords.join(" ")
        );
        let ly = TOP + 16.0 + 16.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, RIGHT - 150.0, RIGHT - 125.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, RIGHT - 120.0, ly + 4.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// One parsed line of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub strategy: String,
    pub fraction: f64,
    pub fold: String,
    pub values: Vec<Option<f64>>,
    pub raw: Vec<String>,
}

pub fn parse_metrics(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().context("metrics CSV is empty")?;
    if header.trim() != METRICS_HEADER {
        bail!("metrics CSV header does not match the expected columns");
    }
    let ncol = METRICS_HEADER.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let raw: Vec<String> = line.split(',').map(str::to_string).collect();
        if raw.len() != ncol {
            bail!("metrics CSV line {} has {} fields, expected {ncol}", i + 2, raw.len());
        }
        rows.push(CsvRow {
            strategy: raw[0].clone(),
            fraction: raw[1].parse().with_context(|| format!("bad fraction on line {}", i + 2))?,
            fold: raw[2].clone(),
            values: raw.iter().map(|v| v.parse().ok()).collect(),
            raw,
        });
    }
    if rows.is_empty() {
        bail!("metrics CSV has no rows");
    }
    Ok(rows)
}

/// Column index, plot file stem and axis label for each plotted metric.
pub const PLOTTED: [(usize, &str, &str); 4] = [
    (7, "a90_95", "a90/95 (mm)"),
    (10, "sizing_error", "sizing error RMS (mm)"),
    (11, "false_calls_per_10cm_weld", "false calls per 10 cm weld"),
    (12, "false_calls_per_image", "false calls per image"),
];

/// Metric versus data fraction, one line per strategy, from the worst-case
/// rows (or every row when the file has none).
pub fn metric_plots(rows: &[CsvRow]) -> Result<Vec<(String, String)>> {
    let worst: Vec<&CsvRow> = rows.iter().filter(|r| r.fold == "worst").collect();
    let use_rows: Vec<&CsvRow> = if worst.is_empty() { rows.iter().collect() } else { worst };
    let mut strategies: Vec<&str> = Vec::new();
    for r in &use_rows {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let mut out = Vec::new();
    for (col, stem, label) in PLOTTED {
        let series: Vec<Series> = strategies
            .iter()
            .map(|s| {
                let mut points: Vec<(f64, f64)> = use_rows
                    .iter()
                    .filter(|r| r.strategy == *s)
                    .filter_map(|r| r.values[col].map(|v| (100.0 * r.fraction, v)))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: s.to_string(),
                    points,
                    dashed: false,
                }
            })
            .collect();
        let svg = match line_plot(label, "training data fraction (%)", label, &series, true) {
            Ok(svg) => svg,
            Err(_) => empty_plot(label),
        };
        out.push((format!("{stem}.svg"), svg));
    }
    Ok(out)
}

fn empty_plot(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\">\
<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}: no finite values</text></svg>\n",
        WIDTH / 2.0,
        HEIGHT / 2.0,
        escape(title)
    )
}

/// POD curve plot from `size_mm,pod,pod_lower` CSV text.
pub fn pod_plot(title: &str, csv: &str) -> Result<String> {
    let mut point = Vec::new();
    let mut lower = Vec::new();
    for (i, line) in csv.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("POD CSV line {} is not numeric", i + 1))?;
        if v.len() != 3 {
            bail!("POD CSV line {} has {} fields, expected 3", i + 1, v.len());
        }
        point.push((v[0], v[1]));
        lower.push((v[0], v[2]));
    }
    if point.is_empty() {
        bail!("POD CSV has no samples");
    }
    line_plot(
        title,
        "flaw size (mm)",
        "probability of detection",
        &[
            Series {
                name: "POD".into(),
                points: point,
                dashed: false,
            },
            Series {
                name: "95% lower bound".into(),
                points: lower,
                dashed: true,
            },
        ],
        true,
    )
}

/// Markdown table of the worst-case rows.
pub fn summary_markdown(rows: &[CsvRow]) -> String {
    let mut s = String::from("# Metrics summary\n\nWorst case over folds for each strategy and fraction.\n\n");
    let header: Vec<&str> = METRICS_HEADER.split(',').collect();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for r in rows.iter().filter(|r| r.fold == "worst") {
        let _ = writeln!(s, "| {} |", r.raw.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(svg: &str) -> Vec<(f64, f64)> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .flat_map(|l| {
                let start = l.find("points=\"").unwrap() + 8;
                let end = start + l[start..].find('"').unwrap();
                l[start..end]
                    .split(' ')
                    .map(|p| {
                        let (x, y) = p.split_once(',').unwrap();
                        (x.parse().unwrap(), y.parse().unwrap())
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn axes_span_data_range() {
        let series = vec![
            Series { name: "a".into(), points: vec![(10.0, 2.0), (25.0, 1.0), (100.0, 0.5)], dashed: false },
            Series { name: "b".into(), points: vec![(10.0, 3.0), (100.0, f64::NAN)], dashed: false },
        ];
        for log in [false, true] {
            let svg = line_plot("t", "x", "y", &series, log).unwrap();
            let c = coords(&svg);
            assert_eq!(c.len(), 4);
            let (xmin, xmax) = c.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
            let (ymin, ymax) = c.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
            assert_eq!((xmin, xmax), (LEFT, RIGHT));
            assert_eq!((ymin, ymax), (TOP, BOTTOM));
        }
    }

    #[test]
    fn four_metric_plots_and_summary() {
        let csv = format!(
            "{METRICS_HEADER}\nstandard,1,0,3,10,8,1.2,1.5,ok,0.1,0.2,1.0,0.5\n\
standard,1,worst,3,10,8,1.2,1.5,ok,0.1,0.2,1.0,0.5\n\
standard,0.1,worst,3,10,5,2.0,,not_demonstrable,0.2,0.3,2.0,1.0\n\
combined,1,worst,3,10,9,1.0,1.3,ok,0.05,0.1,0.5,0.2\n"
        );
        let rows = parse_metrics(&csv).unwrap();
        let plots = metric_plots(&rows).unwrap();
        assert_eq!(plots.len(), 4);
        assert!(plots.iter().all(|(_, svg)| svg.starts_with("<svg")));
        let summary = summary_markdown(&rows);
        assert_eq!(summary.lines().filter(|l| l.starts_with("| standard") || l.starts_with("| combined")).count(), 3);
        assert!(parse_metrics(METRICS_HEADER).is_err());
        assert!(parse_metrics("").is_err());
    }

    #[test]
    fn pod_plot_has_two_curves() {
        let mut csv = String::from("size_mm,pod,pod_lower\n");
        for i in 0..100 {
            let a = 0.5 * 1.03f64.powi(i);
            let p = 1.0 / (1.0 + (-(4.0 * a.ln())).exp());
            let _ = writeln!(csv, "{a},{p},{}", p * 0.9);
        }
        let svg = pod_plot("pod", &csv).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(coords(&svg).len(), 200);
    }
}
