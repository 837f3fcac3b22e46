//! SVG charts of one or more summaries, each with the plotted values as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::report::Summary;
use crate::{write_file, HarnessError, Result};

const WIDTH: f64 = 680.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub const OUTPUTS: [&str; 3] = ["online_vs_env", "forgetting_vs_env", "online_vs_forgetting"];

/// One plotted summary.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub source: PathBuf,
    pub summary: Summary,
}

/// Labels series by learner name, disambiguating repeats with the file stem.
pub fn label_series(inputs: Vec<(PathBuf, Summary)>) -> Vec<Series> {
    let names: Vec<String> = inputs.iter().map(|(_, s)| s.learner.to_string()).collect();
    inputs
        .into_iter()
        .enumerate()
        .map(|(k, (source, summary))| {
            let name = &names[k];
            let label = if names.iter().filter(|n| *n == name).count() > 1 {
                let stem = source
                    .parent()
                    .and_then(|p| p.file_name())
                    .or_else(|| source.file_stem())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| k.to_string());
                format!("{name} ({stem})")
            } else {
                name.clone()
            };
            Series { label, source, summary }
        })
        .collect()
}

pub fn check_compatible(series: &[Series]) -> Result<usize> {
    let first = series
        .first()
        .ok_or_else(|| HarnessError::Usage("plot needs at least one summary.json".into()))?;
    let n = first.summary.environments;
    let offenders: Vec<String> = series
        .iter()
        .filter(|s| s.summary.environments != n)
        .map(|s| format!("{} (N={})", s.source.display(), s.summary.environments))
        .collect();
    if !offenders.is_empty() {
        return Err(HarnessError::Plot(format!(
            "{} has N={n}, incompatible with: {}",
            first.source.display(),
            offenders.join(", ")
        )));
    }
    Ok(n)
}

/// Writes the three charts and their CSVs into `out`; returns the paths.
pub fn plot(series: &[Series], out: &Path) -> Result<Vec<PathBuf>> {
    let n = check_compatible(series)?;
    let mut written = Vec::new();

    let online: Vec<(&str, &[Option<f64>])> = series
        .iter()
        .map(|s| (s.label.as_str(), s.summary.online_curve.as_slice()))
        .collect();
    let forgetting: Vec<(&str, &[Option<f64>])> = series
        .iter()
        .map(|s| (s.label.as_str(), s.summary.forgetting_curve.as_slice()))
        .collect();
    let points: Vec<(&str, Option<f64>, Option<f64>)> = series
        .iter()
        .map(|s| {
            (
                s.label.as_str(),
                s.summary.last_environment.forgetting,
                s.summary.last_environment.online,
            )
        })
        .collect();

    let charts = [
        (
            OUTPUTS[0],
            line_chart("Average online accuracy vs environments", "Online accuracy", n, &online),
            curve_csv("online", &online),
        ),
        (
            OUTPUTS[1],
            line_chart("Average forgetting vs environments", "Forgetting", n, &forgetting),
            curve_csv("forgetting", &forgetting),
        ),
        (OUTPUTS[2], scatter_chart(&points), scatter_csv(&points)),
    ];
    for (stem, svg, csv) in charts {
        let svg_path = out.join(format!("{stem}.svg"));
        let csv_path = out.join(format!("{stem}.csv"));
        write_file(&svg_path, svg)?;
        write_file(&csv_path, csv)?;
        written.push(svg_path);
        written.push(csv_path);
    }
    Ok(written)
}

fn csv_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn curve_csv(column: &str, curves: &[(&str, &[Option<f64>])]) -> String {
    let mut csv = format!("learner,environment,{column}\n");
    for (label, values) in curves {
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", csv_field(label), i + 1, csv_value(*v));
        }
    }
    csv
}

fn scatter_csv(points: &[(&str, Option<f64>, Option<f64>)]) -> String {
    let mut csv = String::from("learner,forgetting,online\n");
    for (label, f, o) in points {
        let _ = writeln!(csv, "{},{},{}", csv_field(label), csv_value(*f), csv_value(*o));
    }
    csv
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Axis range covering `values`, padded and never degenerate.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.05;
        hi += 0.05;
    }
    let pad = 0.08 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn open_svg(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (WIDTH - RIGHT + LEFT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (WIDTH - RIGHT + LEFT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = (HEIGHT - BOTTOM + TOP) / 2.0
    );
    s
}

fn axes(s: &mut String, frame: &Frame, x_ticks: &[(f64, String)], y_ticks: usize) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (x, label) in x_ticks {
        let px = frame.px(*x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 19.0,
            escape(label)
        );
    }
    for k in 0..=y_ticks {
        let v = frame.y.0 + (frame.y.1 - frame.y.0) * k as f64 / y_ticks as f64;
        let py = frame.py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#e0e0e0"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            x0 - 6.0,
            py + 4.0
        );
    }
}

fn legend(s: &mut String, labels: &[&str]) {
    for (k, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * k as f64;
        let x = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            PALETTE[k % PALETTE.len()],
            x + 18.0,
            y,
            escape(label)
        );
    }
}

fn line_chart(title: &str, y_label: &str, n: usize, curves: &[(&str, &[Option<f64>])]) -> String {
    let frame = Frame {
        x: if n > 1 { (0.7, n as f64 + 0.3) } else { (0.0, 2.0) },
        y: axis_range(curves.iter().flat_map(|(_, v)| v.iter().flatten().copied())),
    };
    let mut s = open_svg(title, "Environment", y_label);
    let ticks: Vec<(f64, String)> = (1..=n).map(|i| (i as f64, i.to_string())).collect();
    axes(&mut s, &frame, &ticks, 5);
    for (k, (_, values)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        // Undefined points break the line.
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, s: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for (i, v) in values.iter().enumerate() {
            match v {
                Some(y) => {
                    let (px, py) = (frame.px((i + 1) as f64), frame.py(*y));
                    segment.push(format!("{px:.2},{py:.2}"));
                    let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{colour}"/>"#);
                }
                None => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
    }
    let labels: Vec<&str> = curves.iter().map(|(l, _)| *l).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

fn scatter_chart(points: &[(&str, Option<f64>, Option<f64>)]) -> String {
    let frame = Frame {
        x: axis_range(points.iter().filter_map(|p| p.1)),
        y: axis_range(points.iter().filter_map(|p| p.2)),
    };
    let mut s = open_svg(
        "Online accuracy vs forgetting, last environment",
        "Forgetting",
        "Online accuracy",
    );
    let ticks: Vec<(f64, String)> = (0..=4)
        .map(|k| {
            let v = frame.x.0 + (frame.x.1 - frame.x.0) * k as f64 / 4.0;
            (v, format!("{v:.3}"))
        })
        .collect();
    axes(&mut s, &frame, &ticks, 5);
    for (k, (label, f, o)) in points.iter().enumerate() {
        if let (Some(f), Some(o)) = (f, o) {
            let (px, py) = (frame.px(*f), frame.py(*o));
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{px:.2}" cy="{py:.2}" r="5" fill="{}"><title>{}</title></circle>"#,
                PALETTE[k % PALETTE.len()],
                escape(label)
            );
        }
    }
    let labels: Vec<&str> = points.iter().map(|p| p.0).collect();
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_range_pads_a_single_value() {
        let (lo, hi) = axis_range([0.5].into_iter());
        assert!(lo < 0.5 && hi > 0.5);
        assert_eq!(axis_range(std::iter::empty()), (0.0, 1.0));
    }

    #[test]
    fn undefined_points_leave_csv_cells_empty() {
        let csv = curve_csv("online", &[("oap", &[Some(0.5), None])]);
        assert_eq!(csv, "learner,environment,online\noap,1,0.5\noap,2,\n");
    }
}
