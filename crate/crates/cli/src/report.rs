// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Dependency-free SVG charts over metrics CSVs.
//!
//! Every plotted mark carries `data-series`, `data-x` and `data-y` holding
//! the exact CSV cell text it was drawn from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::metrics::{split, MetricsTable};

pub const ACCURACY_CHART: &str = "accuracy_vs_remaining.svg";
pub const RECOVERY_CHART: &str = "recovery_epochs.svg";
pub const MI_SNR_CHART: &str = "mi_snr_vs_step.svg";

const W: f64 = 720.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 56.0;
const LEGEND_W: f64 = 200.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Clone)]
struct Point {
    x: f64,
    y: f64,
    x_text: String,
    y_text: String,
}

#[derive(Debug, Clone)]
struct Series {
    name: String,
    points: Vec<Point>,
}

struct Panel {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
}

#[derive(Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(top: f64, series: &[Series], y_floor_zero: bool) -> Self {
        let pts = series.iter().flat_map(|s| &s.points);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if y_floor_zero {
            y0 = y0.min(0.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        Frame {
            left: MARGIN,
            top: top + 30.0,
            width: W - LEGEND_W - MARGIN - 16.0,
            height: PANEL_H - 30.0 - MARGIN,
            x0,
            x1,
            y0,
            y1,
        }
    }

    fn sx(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn sy(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y0) / (self.y1 - self.y0) * self.height
    }

    fn axes(&self, s: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" font-size="14" font-weight="bold">{}</text>"##, l, t - 12.0, esc(title));
        let _ = writeln!(s, r##"<rect x="{l:.2}" y="{t:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (self.x0 + f * (self.x1 - self.x0), self.y0 + f * (self.y1 - self.y0));
            let (px, py) = (self.sx(xv), self.sy(yv));
            let _ = writeln!(s, r##"<text x="{px:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##, t + h + 14.0, tick(xv));
            let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"##, l - 4.0, py + 3.0, tick(yv));
        }
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"##, l + w / 2.0, t + h + 32.0, esc(x_label));
        let _ = writeln!(
            s,
            r##"<text x="12" y="{:.2}" font-size="11" text-anchor="middle" transform="rotate(-90 12 {:.2})">{}</text>"##,
            t + h / 2.0,
            t + h / 2.0,
            esc(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, top: f64, series: &[Series]) {
    for (i, se) in series.iter().enumerate() {
        let y = top + 40.0 + 16.0 * i as f64;
        let x = W - LEGEND_W;
        let _ = writeln!(s, r##"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"##, y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r##"<text x="{:.2}" y="{y:.2}" font-size="11">{}</text>"##, x + 14.0, esc(&se.name));
    }
}

fn open(height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn line_chart(panels: &[Panel]) -> String {
    let mut s = open(PANEL_H * panels.len() as f64);
    for (pi, panel) in panels.iter().enumerate() {
        let top = PANEL_H * pi as f64;
        let f = Frame::fit(top, &panel.series, false);
        f.axes(&mut s, &panel.title, &panel.x_label, &panel.y_label);
        for (i, se) in panel.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let name = esc(&se.name);
            let pts: Vec<String> = se.points.iter().map(|p| format!("{:.2},{:.2}", f.sx(p.x), f.sy(p.y))).collect();
            let _ = writeln!(s, r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
            for p in &se.points {
                let _ = writeln!(
                    s,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-series="{name}" data-x="{}" data-y="{}"/>"##,
                    f.sx(p.x),
                    f.sy(p.y),
                    esc(&p.x_text),
                    esc(&p.y_text)
                );
            }
        }
        legend(&mut s, top, &panel.series);
    }
    s + "</svg>\n"
}

/// Grouped bars; `unrecovered` cells are drawn one epoch above the largest
/// observed count and hatched grey.
fn recovery_chart(series: &[(String, Vec<(usize, String)>)]) -> String {
    let numeric = |t: &str| t.parse::<f64>().ok();
    let max = series
        .iter()
        .flat_map(|(_, b)| b.iter().filter_map(|(_, t)| numeric(t)))
        .fold(0.0, f64::max);
    let cap = max + 1.0;
    let as_series: Vec<Series> = series
        .iter()
        .map(|(n, b)| Series {
            name: n.clone(),
            points: b
                .iter()
                .map(|(x, t)| Point {
                    x: *x as f64,
                    y: numeric(t).unwrap_or(cap),
                    x_text: x.to_string(),
                    y_text: t.clone(),
                })
                .collect(),
        })
        .collect();
    let mut s = open(PANEL_H);
    let mut f = Frame::fit(0.0, &as_series, true);
    f.x0 -= 0.5;
    f.x1 += 0.5;
    f.axes(&mut s, "Recovery epochs per prune step", "prune step", "epochs to recover (top row = unrecovered)");
    let slot = f.width / (f.x1 - f.x0);
    let bw = (0.8 * slot / as_series.len().max(1) as f64).max(0.5);
    for (i, se) in as_series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for p in &se.points {
            let unrecovered = numeric(&p.y_text).is_none();
            let x = f.sx(p.x) - 0.4 * slot + bw * i as f64;
            let (y, base) = (f.sy(p.y), f.sy(0.0));
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{y:.2}" width="{bw:.2}" height="{:.2}" fill="{}" data-series="{}" data-x="{}" data-y="{}"/>"##,
                (base - y).max(0.0),
                if unrecovered { "#bbbbbb" } else { color },
                esc(&se.name),
                esc(&p.x_text),
                esc(&p.y_text)
            );
        }
    }
    legend(&mut s, 0.0, &as_series);
    s + "</svg>\n"
}

fn parse_num(text: &str, what: &str, path: &Path) -> CliResult<f64> {
    text.parse()
        .map_err(|_| CliError::Schema(format!("{}: non-numeric {what} '{text}'", path.display())))
}

/// Renders all three charts in memory; nothing is written unless every input
/// parses and has rows.
pub fn render(csvs: &[PathBuf]) -> CliResult<Vec<(&'static str, String)>> {
    if csvs.is_empty() {
        return Err(CliError::Config("report needs at least one metrics CSV".into()));
    }
    let mut accuracy = Vec::new();
    let mut recovery = Vec::new();
    let mut mi = Vec::new();
    let mut snr = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for path in csvs {
        let t = MetricsTable::read(path)?;
        let mut ids: Vec<String> = Vec::new();
        for r in t.rows_with_split(split::BOUNDARY) {
            let id = t.cell(r, "run_id").to_string();
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        if ids.is_empty() {
            return Err(CliError::Schema(format!("{}: no boundary rows", path.display())));
        }
        for id in ids {
            let mut name = id.clone();
            let mut k = 2;
            while seen.contains(&name) {
                name = format!("{id}#{k}");
                k += 1;
            }
            seen.push(name.clone());
            let rows: Vec<&Vec<String>> = t.rows_with_split(split::BOUNDARY).filter(|r| t.cell(r, "run_id") == id).collect();
            let series = |x_col: &str, y_col: &str| -> CliResult<Series> {
                let mut points = Vec::new();
                for r in &rows {
                    let (xt, yt) = (t.cell(r, x_col), t.cell(r, y_col));
                    if yt.is_empty() {
                        continue;
                    }
                    points.push(Point {
                        x: parse_num(xt, x_col, path)?,
                        y: parse_num(yt, y_col, path)?,
                        x_text: xt.to_string(),
                        y_text: yt.to_string(),
                    });
                }
                Ok(Series {
                    name: name.clone(),
                    points,
                })
            };
            accuracy.push(series("remaining_fraction", "accuracy")?);
            mi.push(series("step", "mi_knn")?);
            snr.push(series("step", "snr")?);
            let mut bars = Vec::new();
            for r in &rows {
                let txt = t.cell(r, "recovery_epochs");
                if txt.is_empty() {
                    continue;
                }
                if txt != "unrecovered" {
                    parse_num(txt, "recovery_epochs", path)?;
                }
                let step = t.cell(r, "step");
                bars.push((step.parse().map_err(|_| CliError::Schema(format!("{}: bad step '{step}'", path.display())))?, txt.to_string()));
            }
            recovery.push((name, bars));
        }
    }
    Ok(vec![
        (
            ACCURACY_CHART,
            line_chart(&[Panel {
                title: "Dev accuracy vs remaining weights".into(),
                x_label: "remaining fraction".into(),
                y_label: "dev accuracy".into(),
                series: accuracy,
            }]),
        ),
        (RECOVERY_CHART, recovery_chart(&recovery)),
        (
            MI_SNR_CHART,
            line_chart(&[
                Panel {
                    title: "kNN mutual information, student vs teacher".into(),
                    x_label: "prune step".into(),
                    y_label: "mi_knn (nats)".into(),
                    series: mi,
                },
                Panel {
                    title: "Class separability (SNR)".into(),
                    x_label: "prune step".into(),
                    y_label: "snr".into(),
                    series: snr,
                },
            ]),
        ),
    ])
}

pub fn cmd_report(csvs: &[PathBuf], out: &Path, force: bool) -> CliResult<Vec<PathBuf>> {
    let charts = render(csvs)?;
    let paths: Vec<PathBuf> = charts.iter().map(|(n, _)| out.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(CliError::OutputExists(p.clone()));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for ((_, text), p) in charts.iter().zip(&paths) {
        std::fs::write(p, text).map_err(|e| CliError::io(p, e))?;
    }
    Ok(paths)
}
