//! Plain-text tables and self-contained SVG line plots for sweep results,
//! training traces and byte-only fine-tuning curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::beam::SweepRecord;
use crate::distill::{ByteSftEpoch, MetricRecord};
use crate::error::{BldError, Result};

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 680.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    /// Non-positive values on a log axis are drawn at the axis floor.
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let vals: Vec<f64> = values.filter(|v| v.is_finite()).collect();
        if log {
            let pos: Vec<f64> = vals.iter().copied().filter(|v| *v > 0.0).collect();
            let min = pos.iter().copied().fold(f64::INFINITY, f64::min);
            let max = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !min.is_finite() {
                return Self {
                    lo: 0.0,
                    hi: 1.0,
                    log,
                };
            }
            let lo = min.log10().floor();
            let hi = max.log10().ceil().max(lo + 1.0);
            Self { lo, hi, log }
        } else {
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !min.is_finite() {
                return Self {
                    lo: 0.0,
                    hi: 1.0,
                    log,
                };
            }
            let pad = if max > min {
                0.05 * (max - min)
            } else {
                0.5 * min.abs().max(1.0)
            };
            Self {
                lo: min - pad,
                hi: max + pad,
                log,
            }
        }
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log {
            if v > 0.0 {
                v.log10()
            } else {
                self.lo
            }
        } else {
            v
        };
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0);
            let mut out = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push((10f64.powf(e), format!("1e{}", e as i64)));
                e += step;
            }
            out
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format_tick(v))
                })
                .collect()
        }
    }
}

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let xs = Axis::fit(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0)),
            self.log_x,
        );
        let ys = Axis::fit(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1)),
            self.log_y,
        );
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |v: f64| LEFT + xs.unit(v) * pw;
        let py = |v: f64| TOP + (1.0 - ys.unit(v)) * ph;

        let mut s = String::new();
        let w = &mut s;
        writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            w,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape_xml(&self.title)
        )
        .unwrap();
        writeln!(
            w,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        )
        .unwrap();
        for (v, label) in xs.ticks() {
            let x = px(v);
            writeln!(
                w,
                r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/><text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"##,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0
            )
            .unwrap();
        }
        for (v, label) in ys.ticks() {
            let y = py(v);
            writeln!(
                w,
                r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#333"/><line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##,
                LEFT - 5.0,
                LEFT + pw,
                LEFT - 8.0,
                y + 4.0
            )
            .unwrap();
        }
        writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape_xml(&self.x_label)
        )
        .unwrap();
        writeln!(
            w,
            r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape_xml(&self.y_label)
        )
        .unwrap();
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            writeln!(
                w,
                r#"<g class="series" data-name="{}"><polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
                escape_xml(&series.name),
                pts.join(" ")
            )
            .unwrap();
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted pair");
                writeln!(w, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#).unwrap();
            }
            writeln!(w, "</g>").unwrap();
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            writeln!(
                w,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape_xml(&series.name)
            )
            .unwrap();
        }
        writeln!(w, "</svg>").unwrap();
        s
    }
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn k_label(k: usize) -> String {
    if k == usize::MAX {
        "inf".into()
    } else {
        k.to_string()
    }
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

pub fn sweep_table(records: &[SweepRecord]) -> String {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                k_label(r.k),
                format!("{:e}", r.epsilon),
                sci(r.median_jsd),
                sci(r.mean_jsd),
                sci(r.seconds_per_sample),
                format!("{:.1}", r.queries_per_sample),
                r.failures.to_string(),
            ]
        })
        .collect();
    format_table(
        &[
            "K",
            "epsilon",
            "median_jsd",
            "mean_jsd",
            "sec/sample",
            "queries/sample",
            "failures",
        ],
        &rows,
    )
}

fn distinct_k(records: &[SweepRecord]) -> Vec<usize> {
    records
        .iter()
        .map(|r| r.k)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn distinct_eps(records: &[SweepRecord]) -> Vec<f64> {
    let mut e: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    e.sort_by(f64::total_cmp);
    e.dedup();
    e
}

/// Median JSD against beam width, one series per threshold.
pub fn jsd_plot(records: &[SweepRecord]) -> LinePlot {
    let series = distinct_eps(records)
        .into_iter()
        .map(|eps| Series {
            name: format!("eps={eps:e}"),
            points: records
                .iter()
                .filter(|r| r.epsilon == eps)
                .map(|r| (r.k as f64, r.median_jsd))
                .collect(),
        })
        .collect();
    LinePlot {
        title: "Median JSD against the reference".into(),
        x_label: "beam width K".into(),
        y_label: "median JSD".into(),
        log_x: true,
        log_y: true,
        series,
    }
}

/// Seconds per sample against threshold, one series per beam width.
pub fn time_plot(records: &[SweepRecord]) -> LinePlot {
    let series = distinct_k(records)
        .into_iter()
        .map(|k| {
            let mut points: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.k == k)
                .map(|r| (r.epsilon, r.seconds_per_sample))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: format!("K={}", k_label(k)),
                points,
            }
        })
        .collect();
    LinePlot {
        title: "Byte-probability runtime".into(),
        x_label: "pruning threshold epsilon".into(),
        y_label: "seconds per sample".into(),
        log_x: true,
        log_y: true,
        series,
    }
}

pub fn trace_table(trace: &[MetricRecord]) -> String {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format!("{:.6}", r.token_ce),
                format!("{:.6}", r.byte_ce),
                format!("{:.6}", r.byte_kl),
                format!("{:.6}", r.total),
                sci(r.lr),
            ]
        })
        .collect();
    format_table(
        &["step", "token_ce", "byte_ce", "byte_kl", "total", "lr"],
        &rows,
    )
}

pub fn trace_plot(trace: &[MetricRecord]) -> LinePlot {
    let mk = |name: &str, f: fn(&MetricRecord) -> f64| Series {
        name: name.into(),
        points: trace.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    LinePlot {
        title: "Training losses".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_x: false,
        log_y: false,
        series: vec![
            mk("total", |r| r.total),
            mk("token_ce", |r| r.token_ce),
            mk("byte_ce", |r| r.byte_ce),
            mk("byte_kl", |r| r.byte_kl),
        ],
    }
}

pub fn sft_table(epochs: &[ByteSftEpoch]) -> String {
    let rows: Vec<Vec<String>> = epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{:.6}", e.train_byte_ce),
                format!("{:.6}", e.val_byte_ce),
                format!("{:.6}", e.train_token_ce),
                format!("{:.6}", e.val_token_ce),
            ]
        })
        .collect();
    format_table(
        &[
            "epoch",
            "train_byte_ce",
            "val_byte_ce",
            "train_token_ce",
            "val_token_ce",
        ],
        &rows,
    )
}

pub fn sft_plot(epochs: &[ByteSftEpoch]) -> LinePlot {
    let mk = |name: &str, f: fn(&ByteSftEpoch) -> f64| Series {
        name: name.into(),
        points: epochs.iter().map(|e| (e.epoch as f64, f(e))).collect(),
    };
    LinePlot {
        title: "Byte-only fine-tuning".into(),
        x_label: "epoch".into(),
        y_label: "cross-entropy".into(),
        log_x: false,
        log_y: false,
        series: vec![
            mk("train byte", |e| e.train_byte_ce),
            mk("val byte", |e| e.val_byte_ce),
            mk("train token", |e| e.train_token_ce),
            mk("val token", |e| e.val_token_ce),
        ],
    }
}

/// Records a report can be built from.
#[derive(Debug, Clone, PartialEq)]
pub enum ReportInput {
    Sweep(Vec<SweepRecord>),
    Trace(Vec<MetricRecord>),
    ByteSft(Vec<ByteSftEpoch>),
}

impl ReportInput {
    pub fn len(&self) -> usize {
        match self {
            ReportInput::Sweep(r) => r.len(),
            ReportInput::Trace(r) => r.len(),
            ReportInput::ByteSft(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses line-delimited JSON records; the kind is taken from the
    /// fields of the first record.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .collect();
        let Some(&(_, first)) = lines.first() else {
            return Err(BldError::EmptyInput("report records"));
        };
        let probe: Value = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
        fn all<T: serde::de::DeserializeOwned>(lines: &[(usize, &str)]) -> Result<Vec<T>> {
            lines
                .iter()
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e)))
                .collect()
        }
        if probe.get("median_jsd").is_some() {
            Ok(ReportInput::Sweep(all(&lines)?))
        } else if probe.get("val_byte_ce").is_some() {
            Ok(ReportInput::ByteSft(all(&lines)?))
        } else if probe.get("step").is_some() {
            Ok(ReportInput::Trace(all(&lines)?))
        } else {
            Err(BldError::Parse {
                what: "report records",
                line: 1,
                reason: "unrecognized record kind".into(),
            })
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BldError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn table(&self) -> String {
        match self {
            ReportInput::Sweep(r) => sweep_table(r),
            ReportInput::Trace(r) => trace_table(r),
            ReportInput::ByteSft(r) => sft_table(r),
        }
    }

    /// `(file stem, plot)` pairs.
    pub fn plots(&self) -> Vec<(&'static str, LinePlot)> {
        match self {
            ReportInput::Sweep(r) => vec![("jsd_vs_k", jsd_plot(r)), ("time_vs_eps", time_plot(r))],
            ReportInput::Trace(r) => vec![("losses", trace_plot(r))],
            ReportInput::ByteSft(r) => vec![("byte_sft", sft_plot(r))],
        }
    }
}

fn parse_err(line: usize, e: serde_json::Error) -> BldError {
    BldError::Parse {
        what: "report records",
        line,
        reason: e.to_string(),
    }
}

/// Writes `<prefix>.txt` and one `<prefix>_<plot>.svg` per figure into
/// `out_dir`, returning the written paths.
pub fn emit_report(input: &ReportInput, out_dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if input.is_empty() {
        return Err(BldError::EmptyInput("report records"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| BldError::io(out_dir, e))?;
    let mut written = Vec::new();
    let table = out_dir.join(format!("{prefix}.txt"));
    std::fs::write(&table, input.table()).map_err(|e| BldError::io(&table, e))?;
    written.push(table);
    for (stem, plot) in input.plots() {
        let p = out_dir.join(format!("{prefix}_{stem}.svg"));
        std::fs::write(&p, plot.to_svg()).map_err(|e| BldError::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
