//! Delimited-text tables and SVG charts from run artifacts.
//!
//! Every table is a pure view of the persisted metric stream: cells are the
//! converged means of the recorded fractions, written in shortest round-trip
//! form. Lines starting with `#` carry provenance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::read_jsonl;
use super::{ExperimentConfig, HarnessError, Result};
use crate::metrics::{summarize, NeuronLifecycle, SparsityRecord, Summary, CONVERGENCE_FRACTION};

/// Metric streams charted per layer.
pub const SERIES: [&str; 7] = ["token_use", "seq_use", "batch_use", "p50", "p65", "p75", "p90"];
/// Share of the run shown in the early-training charts.
pub const EARLY_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    pub records: Vec<SparsityRecord>,
    pub lifecycles: Vec<NeuronLifecycle>,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let metrics = dir.join("metrics.jsonl");
        if !metrics.is_file() {
            return Err(HarnessError::Report(format!(
                "{} has no metric stream; missing series: {}",
                dir.display(),
                SERIES.join(", ")
            )));
        }
        let records: Vec<SparsityRecord> = read_jsonl(&metrics)?;
        let lifecycles = match fs::read_to_string(dir.join("lifecycle.json")) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Vec::new(),
        };
        let config = ExperimentConfig::load(&dir.join("config.toml")).ok();
        let config_hash = records
            .iter()
            .find_map(|r| r.config_hash.clone())
            .or_else(|| config.as_ref().map(ExperimentConfig::hash));
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            config_hash,
            records,
            lifecycles,
        })
    }
}

fn value(record: &SparsityRecord, series: &str) -> Option<f64> {
    match series {
        "token_use" => Some(record.token_use_fraction),
        "seq_use" => Some(record.sequence_use_fraction),
        "batch_use" => Some(record.batch_use_fraction),
        "p50" => record.p50,
        "p65" => record.p65,
        "p75" => record.p75,
        "p90" => record.p90,
        _ => None,
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{}", x),
        _ => "NaN".into(),
    }
}

/// Rows of a CSV table; the first row is the header.
fn csv_text(rows: Vec<Vec<String>>, footer: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| HarnessError::Report(e.to_string()))?;
    }
    let mut text = String::from_utf8(w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?)
        .expect("csv output is UTF-8");
    for line in footer {
        let _ = writeln!(text, "# {}", line);
    }
    Ok(text)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: Option<String>,
    pub tokens_per_batch: Option<usize>,
}

fn footer(meta: &ReportMeta, summary: &Summary) -> Vec<String> {
    let mut lines = vec![format!(
        "converged values are means over the last {}% of logged steps{}",
        CONVERGENCE_FRACTION * 100.0,
        summary
            .window
            .map(|(a, b)| format!(" (steps {}..={})", a, b))
            .unwrap_or_default()
    )];
    if let Some(t) = meta.tokens_per_batch {
        lines.push(format!("tokens per batch: {}", t));
    }
    if let Some(h) = &meta.config_hash {
        lines.push(format!("config hash: {}", h));
    }
    lines
}

/// `(file name, CSV text)` for the use, lifecycle and percentile tables.
pub fn tables(
    records: &[SparsityRecord],
    lifecycles: &[NeuronLifecycle],
    meta: &ReportMeta,
) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        return Err(HarnessError::Report(format!(
            "empty metric stream; missing series: {}",
            SERIES.join(", ")
        )));
    }
    let summary = summarize(records, lifecycles);
    let foot = footer(meta, &summary);
    let s = |x: &str| x.to_string();

    let mut use_rows = vec![vec![
        s("layer"),
        s("token_use"),
        s("seq_use"),
        s("batch_use"),
        s("token_seq_ratio"),
        s("seq_batch_ratio"),
    ]];
    for (row, c) in summary.use_rows.iter().zip(&summary.converged) {
        use_rows.push(vec![
            row.layer.to_string(),
            cell(Some(c.token_use)),
            cell(Some(c.seq_use)),
            cell(Some(c.batch_use)),
            cell(Some(row.token_seq_ratio)),
            cell(Some(row.seq_batch_ratio)),
        ]);
    }
    let mut use_foot = foot.clone();
    use_foot.push(format!(
        "pearson(token_use, batch_use) across layers: {}",
        cell(summary.token_batch_correlation)
    ));

    let mut life_rows = vec![vec![
        s("layer"),
        s("on_first_pct"),
        s("turned_on_pct"),
        s("turned_off_pct"),
        s("on_final_pct"),
        s("flipped_on_pct"),
        s("flipped_off_pct"),
        s("transient_off_pct"),
        s("transient_on_pct"),
        s("first_step"),
        s("final_step"),
    ]];
    for r in &summary.lifecycle_rows {
        life_rows.push(vec![
            r.layer.to_string(),
            cell(Some(r.on_first_pct)),
            cell(Some(r.turned_on_pct)),
            cell(Some(r.turned_off_pct)),
            cell(Some(r.on_final_pct)),
            cell(Some(r.flipped_on_pct)),
            cell(Some(r.flipped_off_pct)),
            cell(Some(r.transient_off_pct)),
            cell(Some(r.transient_on_pct)),
            r.first_step.map(|v| v.to_string()).unwrap_or_default(),
            r.final_step.map(|v| v.to_string()).unwrap_or_default(),
        ]);
    }
    let mut life_foot = foot.clone();
    life_foot.push("turned on/off compare the first and final observation; flipped/transient columns count intermediate flips".into());

    let mut pct_rows = vec![vec![s("layer"), s("p50"), s("p65"), s("p75"), s("p90")]];
    for c in &summary.converged {
        pct_rows.push(vec![c.layer.to_string(), cell(c.p50), cell(c.p65), cell(c.p75), cell(c.p90)]);
    }

    let mut out = vec![
        (s("table1_use.csv"), csv_text(use_rows, &use_foot)?),
        (s("table3_percentiles.csv"), csv_text(pct_rows, &foot)?),
    ];
    if !lifecycles.is_empty() {
        out.insert(1, (s("table2_lifecycle.csv"), csv_text(life_rows, &life_foot)?));
    }
    Ok(out)
}

const COLORS: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub key: usize,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a fixed `[0, 1]` y axis, one polyline per series and a
/// legend. Polylines carry `data-layer` with the series key.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], x_range: (f64, f64)) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 140.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (x0, mut x1) = x_range;
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-x-min="{x0}" data-x-max="{x1}" data-y-min="0" data-y-max="1">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<g class="axes" stroke="#333" stroke-width="1"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"##,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<g class="y-tick"><line x1="{}" y1="{py}" x2="{left}" y2="{py}" stroke="#333"/><line x1="{left}" y1="{py}" x2="{}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.1}</text></g>"##,
            left - 5.0,
            left + pw,
            left - 8.0,
            sy(y) + 4.0,
            y,
            py = sy(y)
        );
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<g class="x-tick"><line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="#333"/><text x="{px}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text></g>"##,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0,
            x.round(),
            px = sx(x)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {}) rotate(-90)" font-family="sans-serif" font-size="12" text-anchor="middle">fraction</text>"#,
        top + ph / 2.0
    );
    for s in series {
        let color = COLORS[s.key % COLORS.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-layer="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.key,
            color,
            points.join(" ")
        );
    }
    let _ = writeln!(svg, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
    for (i, s) in series.iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let x = left + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"/><text data-layer="{}" x="{}" y="{}">{}</text>"#,
            x + 20.0,
            COLORS[s.key % COLORS.len()],
            s.key,
            x + 26.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Per-layer charts of every series: `(file name, SVG)` for the full run
/// and for the first `EARLY_FRACTION` of it.
pub fn figures(records: &[SparsityRecord]) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        return Err(HarnessError::Report("empty metric stream".into()));
    }
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(0) as f64;
    let early_end = (max_step * EARLY_FRACTION).max(1.0);
    let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();

    let mut out = Vec::new();
    for name in SERIES {
        for (view, end) in [("full", max_step), ("early", early_end)] {
            let series: Vec<Series> = layers
                .iter()
                .map(|&l| Series {
                    label: format!("layer {}", l),
                    key: l,
                    points: records
                        .iter()
                        .filter(|r| r.layer == l && r.step as f64 <= end)
                        .filter_map(|r| value(r, name).map(|v| (r.step as f64, v)))
                        .collect(),
                })
                .collect();
            out.push((
                format!("{}_{}.svg", name, view),
                line_chart(&format!("{} per layer ({})", name, view), "step", &series, (0.0, end)),
            ));
        }
    }
    Ok(out)
}

/// Writes tables and figures for a run directory into `<dir>/report`.
pub fn report(dir: &Path) -> Result<PathBuf> {
    let art = RunArtifacts::load(dir)?;
    let meta = ReportMeta {
        config_hash: art.config_hash.clone(),
        tokens_per_batch: art.config.as_ref().map(ExperimentConfig::tokens_per_batch),
    };
    let out = dir.join("report");
    let tables = tables(&art.records, &art.lifecycles, &meta)?;
    let figures = figures(&art.records)?;
    fs::create_dir_all(out.join("figures"))?;
    for (name, text) in tables {
        fs::write(out.join(name), text)?;
    }
    for (name, svg) in figures {
        fs::write(out.join("figures").join(name), svg)?;
    }
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summarize(&art.records, &art.lifecycles))?,
    )?;
    Ok(out)
}
