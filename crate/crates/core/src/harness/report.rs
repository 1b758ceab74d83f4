use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::ResultRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Table,
    /// Metric mean against the swept value.
    TrendPlot,
    /// Metric mean against mean wall time, one labelled point per record.
    TimeQualityPlot,
}

impl FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "table" => Ok(ReportKind::Table),
            "trend_plot" | "trend" => Ok(ReportKind::TrendPlot),
            "time_quality_plot" | "time_quality" => Ok(ReportKind::TimeQualityPlot),
            other => Err(Error::Config(format!("unknown report kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub csv: String,
    pub svg: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn check_compatible(records: &[ResultRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("report needs at least one record".into()))?;
    let param = first.sweep.as_ref().map(|s| s.param.as_str());
    let names: Vec<&str> = first.metrics.iter().map(|m| m.name.as_str()).collect();
    for r in &records[1..] {
        if r.sweep.as_ref().map(|s| s.param.as_str()) != param {
            return Err(Error::InvalidArgument(
                "records come from different sweeps".into(),
            ));
        }
        if r.metrics.iter().map(|m| m.name.as_str()).ne(names.iter().copied()) {
            return Err(Error::InvalidArgument("records carry different metrics".into()));
        }
    }
    Ok(())
}

fn table_csv(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "fingerprint",
        "param",
        "value",
        "method",
        "repetitions",
        "failures",
        "wall_seconds_mean",
        "cpu_seconds_mean",
    ]
    .map(String::from)
    .to_vec();
    for m in &records[0].metrics {
        for suffix in ["mean", "std", "se"] {
            header.push(format!("{}_{suffix}", m.name));
        }
    }
    w.write_record(&header)?;
    for r in records {
        let (param, value) = r
            .sweep
            .as_ref()
            .map(|s| (s.param.clone(), s.value.clone()))
            .unwrap_or_default();
        let mut row = vec![
            r.fingerprint.clone(),
            param,
            value,
            r.config.method.to_string(),
            r.config.repetitions.to_string(),
            r.failures.to_string(),
            r.wall_seconds_mean.to_string(),
            r.cpu_seconds_mean.to_string(),
        ];
        for m in &r.metrics {
            row.extend([opt(m.mean), opt(m.std), opt(m.std_error())]);
        }
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 70.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn table_svg(records: &[ResultRecord]) -> String {
    let metric = records[0].metrics.first().map(|m| m.name.as_str()).unwrap_or("");
    let mut s = svg_open(&format!("{metric} by configuration"));
    let row_h = 20.0;
    let cols = [20.0, 200.0, 320.0, 470.0];
    let header = ["configuration", "method", "mean ± se", "wall s"];
    for (x, h) in cols.iter().zip(header) {
        let _ = writeln!(s, "<text x=\"{x}\" y=\"56\" font-weight=\"bold\">{h}</text>");
    }
    for (i, r) in records.iter().enumerate() {
        let y = 56.0 + row_h * (i + 1) as f64;
        let label = r
            .sweep
            .as_ref()
            .map(|p| format!("{} = {}", p.param, p.value))
            .unwrap_or_else(|| r.fingerprint[..12.min(r.fingerprint.len())].to_string());
        let m = r.metrics.first();
        let value = match (m.and_then(|m| m.mean), m.and_then(|m| m.std_error())) {
            (Some(mean), Some(se)) => format!("{mean:.4} ± {se:.4}"),
            _ => "failed".to_string(),
        };
        let cells = [
            label,
            r.config.method.to_string(),
            value,
            format!("{:.3}", r.wall_seconds_mean),
        ];
        let _ = write!(s, "<g class=\"row\">");
        for (x, c) in cols.iter().zip(cells) {
            let _ = write!(s, "<text x=\"{x}\" y=\"{y}\">{}</text>", escape(&c));
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = lo.abs().max(1.0) * 0.05;
            lo -= pad;
            hi += pad;
        } else {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

struct Point {
    x: f64,
    y: Option<f64>,
    se: f64,
    label: String,
}

fn plot_svg(title: &str, x_label: &str, y_label: &str, points: &[Point], x_ticks: &[(f64, String)], line: bool) -> String {
    let mut s = svg_open(title);
    let xa = Axis::new(points.iter().map(|p| p.x), MARGIN, W - MARGIN / 2.0);
    let ys = points
        .iter()
        .filter_map(|p| p.y.map(|y| [y - p.se, y + p.se]))
        .flatten();
    let ya = Axis::new(ys, H - MARGIN, MARGIN / 2.0 + 16.0);
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN / 2.0 + 16.0);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y1} V{y0} H{x1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (v, label) in x_ticks {
        let x = xa.map(*v);
        let _ = writeln!(
            s,
            "<g class=\"x-tick\"><line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\
             <text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text></g>",
            y0 + 5.0,
            y0 + 18.0,
            escape(label)
        );
    }
    for i in 0..=4 {
        let v = ya.lo + (ya.hi - ya.lo) * i as f64 / 4.0;
        let y = ya.map(v);
        let _ = writeln!(
            s,
            "<g class=\"y-tick\"><line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text></g>",
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        H - 24.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    let drawn: Vec<(f64, f64, &Point)> = points
        .iter()
        .filter_map(|p| p.y.map(|y| (xa.map(p.x), ya.map(y), p)))
        .collect();
    if line && drawn.len() > 1 {
        let d: Vec<String> = drawn
            .iter()
            .enumerate()
            .map(|(i, (x, y, _))| format!("{}{x:.2} {y:.2}", if i == 0 { 'M' } else { 'L' }))
            .collect();
        let _ = writeln!(
            s,
            "<path class=\"trend\" d=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\"/>",
            d.join(" ")
        );
    }
    for (x, y, p) in &drawn {
        let mean = p.y.expect("drawn points have a mean");
        let (top, bottom) = (ya.map(mean + p.se), ya.map(mean - p.se));
        let _ = writeln!(
            s,
            "<g class=\"point\"><line x1=\"{x:.2}\" y1=\"{top:.2}\" x2=\"{x:.2}\" y2=\"{bottom:.2}\" stroke=\"#1f5fa8\"/>\
             <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f5fa8\"/>\
             <text class=\"point-label\" x=\"{:.2}\" y=\"{:.2}\">{}</text></g>",
            x + 6.0,
            y - 6.0,
            escape(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn first_metric(r: &ResultRecord) -> (Option<f64>, f64) {
    let m = r.metrics.first();
    (
        m.and_then(|m| m.mean),
        m.and_then(|m| m.std_error()).unwrap_or(0.0),
    )
}

/// Builds the CSV table and the SVG of `kind`. Records must come from one sweep (or none) and
/// carry the same metrics; plots show the first metric with standard-error bars.
pub fn report(records: &[ResultRecord], kind: ReportKind) -> Result<Report> {
    check_compatible(records)?;
    let csv = table_csv(records)?;
    let metric = records[0]
        .metrics
        .first()
        .map(|m| m.name.clone())
        .unwrap_or_default();
    let svg = match kind {
        ReportKind::Table => table_svg(records),
        ReportKind::TrendPlot => {
            let sweep = records[0].sweep.as_ref().ok_or_else(|| {
                Error::InvalidArgument("a trend plot needs records from a sweep".into())
            })?;
            let values: Vec<&str> = records
                .iter()
                .map(|r| r.sweep.as_ref().map_or("", |s| s.value.as_str()))
                .collect();
            let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
            let xs = numeric.unwrap_or_else(|| (0..values.len()).map(|i| i as f64).collect());
            let points: Vec<Point> = records
                .iter()
                .zip(&xs)
                .zip(&values)
                .map(|((r, &x), v)| {
                    let (y, se) = first_metric(r);
                    Point {
                        x,
                        y,
                        se,
                        label: v.to_string(),
                    }
                })
                .collect();
            let ticks: Vec<(f64, String)> = xs
                .iter()
                .zip(&values)
                .map(|(&x, v)| (x, v.to_string()))
                .collect();
            plot_svg(
                &format!("{metric} vs {}", sweep.param),
                &sweep.param,
                &metric,
                &points,
                &ticks,
                true,
            )
        }
        ReportKind::TimeQualityPlot => {
            let points: Vec<Point> = records
                .iter()
                .map(|r| {
                    let (y, se) = first_metric(r);
                    Point {
                        x: r.wall_seconds_mean,
                        y,
                        se,
                        label: r
                            .sweep
                            .as_ref()
                            .map(|s| s.value.clone())
                            .unwrap_or_else(|| r.config.method.to_string()),
                    }
                })
                .collect();
            let xa = Axis::new(points.iter().map(|p| p.x), 0.0, 1.0);
            let ticks: Vec<(f64, String)> = (0..=4)
                .map(|i| {
                    let v = xa.lo + (xa.hi - xa.lo) * i as f64 / 4.0;
                    (v, format!("{v:.2}"))
                })
                .collect();
            plot_svg(
                &format!("{metric} vs running time"),
                "wall time per run (s)",
                &metric,
                &points,
                &ticks,
                false,
            )
        }
    };
    Ok(Report { csv, svg })
}

/// Writes `report.csv` and `report.svg` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("report.csv", &report.csv), ("report.svg", &report.svg)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
