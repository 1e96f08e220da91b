//! Human-readable reports of a bundle in JSON, HTML or plain text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stratify_core::screening::ScoreVariant;

use crate::bundle::{ExperimentBundle, ReportBundle};
use crate::{Result, WorkbenchError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Html,
    Text,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Html => "html",
            ReportFormat::Text => "txt",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "html" => Ok(Self::Html),
            "text" | "txt" => Ok(Self::Text),
            other => Err(WorkbenchError::Config(format!(
                "unknown report format '{other}' (json, html, text)"
            ))),
        }
    }
}

enum Block {
    Heading(u8, String),
    Para(String),
    Table(Vec<String>, Vec<Vec<String>>),
    Pre(String),
    /// Rendered as a highlighted panel.
    Error(Vec<String>),
}

#[derive(Default)]
struct Doc {
    blocks: Vec<Block>,
}

impl Doc {
    fn h(&mut self, level: u8, s: impl Into<String>) {
        self.blocks.push(Block::Heading(level, s.into()));
    }
    fn p(&mut self, s: impl Into<String>) {
        self.blocks.push(Block::Para(s.into()));
    }
    fn table(&mut self, head: &[&str], rows: Vec<Vec<String>>) {
        self.blocks
            .push(Block::Table(head.iter().map(|s| s.to_string()).collect(), rows));
    }
    fn pre(&mut self, s: impl Into<String>) {
        self.blocks.push(Block::Pre(s.into()));
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn to_html(title: &str, doc: &Doc) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>\n<style>\
         body{{font-family:sans-serif;margin:2em}} table{{border-collapse:collapse;margin:0.5em 0}} \
         td,th{{border:1px solid #bbb;padding:2px 6px;text-align:left}} .error{{background:#fdd;border:1px solid #c00;padding:0.5em}}\
         </style></head><body>\n",
        esc(title)
    );
    for b in &doc.blocks {
        match b {
            Block::Heading(l, s) => {
                let _ = writeln!(out, "<h{l}>{}</h{l}>", esc(s));
            }
            Block::Para(s) => {
                let _ = writeln!(out, "<p>{}</p>", esc(s));
            }
            Block::Pre(s) => {
                let _ = writeln!(out, "<pre>{}</pre>", esc(s));
            }
            Block::Error(lines) => {
                out.push_str("<div class=\"error\">");
                for l in lines {
                    let _ = write!(out, "<p>{}</p>", esc(l));
                }
                out.push_str("</div>\n");
            }
            Block::Table(head, rows) => {
                out.push_str("<table><tr>");
                for h in head {
                    let _ = write!(out, "<th>{}</th>", esc(h));
                }
                out.push_str("</tr>\n");
                for r in rows {
                    out.push_str("<tr>");
                    for c in r {
                        let _ = write!(out, "<td>{}</td>", esc(c));
                    }
                    out.push_str("</tr>\n");
                }
                out.push_str("</table>\n");
            }
        }
    }
    out.push_str("</body></html>\n");
    out
}

fn to_text(doc: &Doc) -> String {
    let mut out = String::new();
    for b in &doc.blocks {
        match b {
            Block::Heading(l, s) => {
                let rule = if *l <= 2 { '=' } else { '-' };
                let _ = writeln!(out, "\n{s}\n{}", rule.to_string().repeat(s.chars().count()));
            }
            Block::Para(s) => {
                let _ = writeln!(out, "{s}");
            }
            Block::Pre(s) => {
                for l in s.lines() {
                    let _ = writeln!(out, "    {l}");
                }
            }
            Block::Error(lines) => {
                for l in lines {
                    let _ = writeln!(out, "!! {l}");
                }
            }
            Block::Table(head, rows) => {
                let mut w: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
                for r in rows {
                    for (i, c) in r.iter().enumerate() {
                        if i < w.len() {
                            w[i] = w[i].max(c.chars().count());
                        }
                    }
                }
                let line = |cells: &[String]| {
                    cells
                        .iter()
                        .enumerate()
                        .map(|(i, c)| format!("{c:<width$}", width = w.get(i).copied().unwrap_or(0)))
                        .collect::<Vec<_>>()
                        .join("  ")
                        .trim_end()
                        .to_string()
                };
                let _ = writeln!(out, "{}", line(head));
                let _ = writeln!(
                    out,
                    "{}",
                    w.iter().map(|n| "-".repeat(*n)).collect::<Vec<_>>().join("  ")
                );
                for r in rows {
                    let _ = writeln!(out, "{}", line(r));
                }
            }
        }
    }
    out
}

fn num(x: f64) -> String {
    if x == 0.0 || (1e-3..1e4).contains(&x.abs()) {
        format!("{x:.3}")
    } else {
        format!("{x:.2e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "-".into())
}

fn experiment_section(doc: &mut Doc, e: &ExperimentBundle, variant: ScoreVariant, outcome: Option<&str>) {
    let id = &e.entry.experiment_id;
    doc.h(2, format!("Experiment {id}"));
    doc.p(format!(
        "{:?} experiment: algorithm {}, encoding {}, k = {}",
        e.entry.kind,
        e.entry.algorithm,
        e.entry.encoding,
        e.entry.k.map_or("-".into(), |k| k.to_string())
    ));
    if e.entry.failed() {
        doc.blocks.push(Block::Error(e.entry.errors.clone()));
    }
    if let (Some(o), Some(s)) = (outcome, e.top_score(outcome.unwrap_or_default(), variant)) {
        doc.p(format!("Top {} score for {o}: {}", variant_name(variant), num(s)));
    }
    let labels = e.evaluated_assignment.as_ref().or(e.assignment.as_ref());
    if let Some(a) = labels {
        let rows = a
            .sizes()
            .iter()
            .map(|(c, n)| vec![format!("Cluster {c}"), n.to_string()])
            .collect();
        doc.h(3, "Cluster sizes");
        doc.table(&["cluster", "patients"], rows);
        if let Some(note) = a.provenance.notes.get("curation") {
            doc.p(format!("Curated: {note}"));
        }
    }
    if let Some(k) = &e.k_selection {
        let rows = k
            .candidates
            .iter()
            .zip(&k.mean_agreement)
            .map(|(k, m)| vec![k.to_string(), num(*m)])
            .collect();
        doc.h(3, "Bootstrap k selection");
        doc.table(&["k", "mean Jaccard agreement"], rows);
    }
    if let Some(cox) = &e.cox {
        doc.h(3, "Hazard ratios (cluster vs rest, adjusted for age and sex)");
        let mut rows = Vec::new();
        for (outcome, cs) in cox {
            for c in cs {
                rows.push(match &c.result {
                    Some(r) => vec![
                        outcome.clone(),
                        format!("Cluster {}", c.cluster),
                        r.n_cluster.to_string(),
                        r.events_cluster.to_string(),
                        opt(r.hazard_ratio),
                        format!("{} to {}", opt(r.ci_lower), opt(r.ci_upper)),
                        num(r.p_value),
                    ],
                    None => vec![
                        outcome.clone(),
                        format!("Cluster {}", c.cluster),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        c.error.clone().unwrap_or_default(),
                        "-".into(),
                    ],
                });
            }
        }
        doc.table(&["outcome", "cluster", "n", "events", "HR", "95% CI", "p"], rows);
    }
    if let Some(km) = &e.km {
        doc.h(3, "Kaplan-Meier estimates");
        for (outcome, by) in km {
            for (c, curve) in &by.curves {
                doc.p(format!(
                    "{outcome}, cluster {c}: {} patients, {} events",
                    curve.n,
                    curve.total_events()
                ));
                let rows = (0..curve.times.len())
                    .map(|i| {
                        vec![
                            num(curve.times[i]),
                            curve.at_risk[i].to_string(),
                            curve.events[i].to_string(),
                            curve.censored[i].to_string(),
                            num(curve.survival[i]),
                            format!("{} to {}", num(curve.lower[i]), num(curve.upper[i])),
                        ]
                    })
                    .collect();
                doc.table(&["time", "at risk", "events", "censored", "survival", "95% CI"], rows);
            }
            if let Some(lr) = &by.logrank {
                doc.p(format!("{outcome}: log-rank p = {}", num(lr.p_value)));
            }
        }
    }
    if let Some(s) = &e.surrogate {
        doc.h(3, "Surrogate decision tree");
        doc.p(format!(
            "{}-fold balanced accuracy: {}",
            s.cv.folds.len(),
            num(s.cv.mean_balanced_accuracy)
        ));
        doc.pre(s.text.clone());
        doc.table(
            &["rule", "samples", "purity"],
            s.rules
                .iter()
                .map(|r| vec![r.text.clone(), r.samples.to_string(), num(r.purity)])
                .collect(),
        );
    }
    if let Some(en) = &e.enrichment {
        doc.h(3, "Enrichment");
        let (head, rows) = en.table();
        let head: Vec<&str> = head.iter().map(String::as_str).collect();
        doc.table(&head, rows);
    }
}

fn variant_name(v: ScoreVariant) -> &'static str {
    match v {
        ScoreVariant::Base => "base",
        ScoreVariant::Surrogate => "surrogate",
        ScoreVariant::Average => "average",
    }
}

fn build(bundle: &ReportBundle) -> Doc {
    let mut doc = Doc::default();
    let m = &bundle.manifest;
    doc.h(1, format!("Run {}", m.run_id));
    doc.p(format!("Status: {:?}. Config hash {}.", m.status, m.config_hash));
    if let Some(h) = &m.rules_hash {
        doc.p(format!("Screening rules hash {h}."));
    }
    if let Some(p) = &m.parent {
        doc.p(format!(
            "Curated from run {p} ({}).",
            m.scope.map_or("unknown scope", |s| s.as_str())
        ));
    }
    if let Some(e) = &m.error {
        doc.blocks.push(Block::Error(vec![e.clone()]));
    }
    for w in &m.warnings {
        doc.p(format!("Warning: {w}"));
    }
    if let Some(c) = &bundle.cohort {
        doc.h(2, "Cohort");
        let mut rows = vec![
            vec!["assembled".to_string(), c.assembled.to_string()],
            vec!["removed by curation".into(), c.curated_out.len().to_string()],
            vec!["removed as sparse".into(), c.sparse_out.len().to_string()],
            vec!["analysed".into(), c.analysed.len().to_string()],
        ];
        rows.extend(
            c.outcome_events
                .iter()
                .map(|(o, n)| vec![format!("{o} events"), n.to_string()]),
        );
        doc.table(&["", "patients"], rows);
    }

    let variant = bundle.config.screening.variant;
    let outcome = bundle.primary_outcome();
    if let (Some(s), Some(o)) = (&bundle.screening, &outcome) {
        doc.h(2, format!("Screening ranking: {o}, {} score", variant_name(variant)));
        if let Ok(ranked) = s.ranked(o, variant) {
            let rows = ranked
                .iter()
                .map(|c| {
                    vec![
                        format!("{}/{}", c.experiment_id, c.cluster),
                        num(c.r_base),
                        opt(c.r_surrogate),
                        num(c.r_average),
                        opt(c.hazard_ratio),
                        c.flags.join("; "),
                    ]
                })
                .collect();
            doc.table(
                &[
                    "experiment/cluster",
                    "R base",
                    "R surrogate",
                    "R average",
                    "HR",
                    "flags",
                ],
                rows,
            );
        }
    }
    if let Some(t) = &bundle.scatter {
        doc.h(2, "Screening scatter table");
        doc.pre(serde_json::to_string_pretty(t).unwrap_or_default());
    }
    if let Some(meta) = &bundle.meta {
        doc.h(2, "Meta clustering");
        doc.p(format!(
            "{} experiments, {} columns; selected k = {:?}",
            meta.source_experiments.len(),
            meta.columns.len(),
            meta.selected_k
        ));
        doc.table(
            &["k", "mean silhouette"],
            meta.silhouette_trace
                .iter()
                .map(|s| vec![s.k.to_string(), num(s.silhouette)])
                .collect(),
        );
    }
    for e in bundle.experiments_by_score() {
        experiment_section(&mut doc, e, variant, outcome.as_deref());
    }
    doc
}

/// The report as one string.
pub fn render_string(bundle: &ReportBundle, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(bundle)?,
        ReportFormat::Html => to_html(&format!("Run {}", bundle.manifest.run_id), &build(bundle)),
        ReportFormat::Text => to_text(&build(bundle)),
    })
}

/// Writes `report.<ext>` into `out_dir` and returns its path.
pub fn render_report(bundle: &ReportBundle, format: ReportFormat, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("report.{}", format.extension()));
    std::fs::write(&path, render_string(bundle, format)?)?;
    Ok(path)
}
