//! Batch evaluation of answer-producing systems against reference answers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, CorpusError, CorpusFormat};
use crate::metrics::{
    bert_score, bleu, BleuConfig, LocalTokenEmbedder, MetricError, RougeVariant, TokenEmbedder,
};
use crate::DEFAULT_EMBED_DIM;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Column labels in table order.
pub const METRIC_COLUMNS: [&str; 5] = ["BLEU", "ROUGE", "BERT-F1", "BERT-Precision", "BERT-Recall"];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("dataset has no items")]
    EmptyDataset,
    #[error("every item failed ({failures} of {failures}); first error: {first}")]
    SystemFailure { failures: usize, first: String },
    #[error("system name {0:?} appears more than once")]
    DuplicateSystemName(String),
    #[error("no reports given")]
    NoReports,
    #[error("invalid harness config: {0}")]
    InvalidConfig(String),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset: {0}")]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl EvalItem {
    pub fn new(query: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            reference: reference.into(),
            tags: BTreeMap::new(),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.query.trim().is_empty() || self.reference.trim().is_empty() {
            return Err("query and reference must both be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bleu: BleuConfig,
    pub rouge: RougeVariant,
    /// Dimension of the local token embedder used for BERTScore.
    pub bert_dim: usize,
    pub jobs: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu: BleuConfig::default(),
            rouge: RougeVariant::L,
            bert_dim: DEFAULT_EMBED_DIM,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu: f64,
    pub rouge: f64,
    pub bert_f1: f64,
    pub bert_precision: f64,
    pub bert_recall: f64,
}

impl Scores {
    /// Values in table column order.
    pub fn columns(&self) -> [f64; 5] {
        [
            self.bleu,
            self.rouge,
            self.bert_f1,
            self.bert_precision,
            self.bert_recall,
        ]
    }

    fn from_columns(c: [f64; 5]) -> Self {
        Self {
            bleu: c[0],
            rouge: c[1],
            bert_f1: c[2],
            bert_precision: c[3],
            bert_recall: c[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub item_id: usize,
    pub query: String,
    #[serde(default)]
    pub candidate: Option<String>,
    #[serde(default)]
    pub scores: Option<Scores>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub system_name: String,
    pub rouge_variant: String,
    pub item_count: usize,
    pub scored_count: usize,
    pub excluded_count: usize,
    pub rows: Vec<ItemRow>,
    pub averages: Scores,
    pub config: MetricConfig,
}

/// Arithmetic mean of each column over the scored rows, summed in item order.
pub fn average_rows(rows: &[ItemRow]) -> Option<Scores> {
    let scored: Vec<&Scores> = rows.iter().filter_map(|r| r.scores.as_ref()).collect();
    if scored.is_empty() {
        return None;
    }
    let mut sums = [0.0; 5];
    for s in &scored {
        for (acc, v) in sums.iter_mut().zip(s.columns()) {
            *acc += v;
        }
    }
    Some(Scores::from_columns(sums.map(|s| s / scored.len() as f64)))
}

fn score_pair(
    candidate: &str,
    reference: &str,
    config: &MetricConfig,
    embedder: &dyn TokenEmbedder,
) -> Result<Scores, MetricError> {
    let bert = bert_score(candidate, reference, embedder)?;
    Ok(Scores {
        bleu: bleu(candidate, &[reference], &config.bleu)?,
        rouge: config.rouge.score(candidate, reference)?,
        bert_f1: bert.f1,
        bert_precision: bert.precision,
        bert_recall: bert.recall,
    })
}

/// Runs `system` once per item and scores each answer against its reference.
///
/// Items whose system call or scoring fails become error rows and are left out
/// of the averages.
pub fn run_eval<F>(
    system_name: &str,
    items: &[EvalItem],
    system: F,
    config: &MetricConfig,
) -> Result<MetricReport, HarnessError>
where
    F: Fn(&EvalItem) -> Result<String, String> + Sync,
{
    let embedder = LocalTokenEmbedder {
        dim: config.bert_dim,
    };
    run_eval_with_embedder(system_name, items, system, config, &embedder)
}

pub fn run_eval_with_embedder<F>(
    system_name: &str,
    items: &[EvalItem],
    system: F,
    config: &MetricConfig,
    embedder: &dyn TokenEmbedder,
) -> Result<MetricReport, HarnessError>
where
    F: Fn(&EvalItem) -> Result<String, String> + Sync,
{
    if items.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if config.jobs == 0 {
        return Err(HarnessError::InvalidConfig(
            "jobs must be at least 1".into(),
        ));
    }
    config
        .bleu
        .validate()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;

    let eval_one = |(item_id, item): (usize, &EvalItem)| -> ItemRow {
        let mut row = ItemRow {
            item_id,
            query: item.query.clone(),
            candidate: None,
            scores: None,
            error: None,
        };
        let outcome = item
            .check()
            .and_then(|_| system(item))
            .and_then(|candidate| {
                row.candidate = Some(candidate.clone());
                score_pair(&candidate, &item.reference, config, embedder).map_err(|e| e.to_string())
            });
        match outcome {
            Ok(scores) => row.scores = Some(scores),
            Err(e) => row.error = Some(e),
        }
        row
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let rows: Vec<ItemRow> = pool.install(|| items.par_iter().enumerate().map(eval_one).collect());

    let averages = average_rows(&rows).ok_or_else(|| HarnessError::SystemFailure {
        failures: rows.len(),
        first: rows[0].error.clone().unwrap_or_default(),
    })?;
    let scored_count = rows.iter().filter(|r| r.scores.is_some()).count();
    Ok(MetricReport {
        format_version: REPORT_FORMAT_VERSION,
        system_name: system_name.to_string(),
        rouge_variant: config.rouge.to_string(),
        item_count: items.len(),
        scored_count,
        excluded_count: items.len() - scored_count,
        rows,
        averages,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Csv,
        ReportFormat::Json,
        ReportFormat::Markdown,
    ];

    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

/// Six decimals with trailing zeros trimmed, keeping at least three.
pub fn format_score(v: f64) -> String {
    let s = format!("{v:.6}");
    let (int, frac) = s.split_once('.').expect("fixed-point format");
    let mut frac = frac.trim_end_matches('0').to_string();
    while frac.len() < 3 {
        frac.push('0');
    }
    format!("{int}.{frac}")
}

fn md_cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

fn md_header(first: &str) -> String {
    format!(
        "| {first} | {} |\n|---|{}\n",
        METRIC_COLUMNS.join(" | "),
        "---:|".repeat(METRIC_COLUMNS.len())
    )
}

fn md_scores_row(label: &str, scores: &Scores) -> String {
    let cells: Vec<String> = scores.columns().iter().map(|v| format_score(*v)).collect();
    format!("| {} | {} |\n", md_cell(label), cells.join(" | "))
}

pub fn render_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serialises") + "\n"
        }
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    }
}

fn render_markdown(report: &MetricReport) -> String {
    let mut out = format!("## {}\n\n", md_cell(&report.system_name));
    let _ = writeln!(
        out,
        "Items: {} (scored {}, excluded {}). ROUGE column: {}.\n",
        report.item_count, report.scored_count, report.excluded_count, report.rouge_variant
    );
    out.push_str(&md_header("Item"));
    for row in &report.rows {
        let label = format!("item {}", row.item_id);
        match (&row.scores, &row.error) {
            (Some(s), _) => out.push_str(&md_scores_row(&label, s)),
            (None, err) => {
                let _ = writeln!(
                    out,
                    "| {label} | error: {} |{}",
                    md_cell(err.as_deref().unwrap_or("unknown")),
                    " |".repeat(METRIC_COLUMNS.len() - 1)
                );
            }
        }
    }
    out.push_str(&md_scores_row(&report.system_name, &report.averages));
    out
}

fn render_csv(report: &MetricReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "kind",
        "system",
        "item_id",
        "bleu",
        "rouge",
        "bert_f1",
        "bert_precision",
        "bert_recall",
        "error",
    ];
    w.write_record(header).expect("in-memory write");
    let numbers = |s: Option<&Scores>| -> Vec<String> {
        match s {
            Some(s) => s.columns().iter().map(|v| v.to_string()).collect(),
            None => vec![String::new(); 5],
        }
    };
    for row in &report.rows {
        let mut rec = vec![
            "item".to_string(),
            report.system_name.clone(),
            row.item_id.to_string(),
        ];
        rec.extend(numbers(row.scores.as_ref()));
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec).expect("in-memory write");
    }
    let mut rec = vec![
        "average".to_string(),
        report.system_name.clone(),
        String::new(),
    ];
    rec.extend(numbers(Some(&report.averages)));
    rec.push(String::new());
    w.write_record(&rec).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

/// One averages row per system, in input order.
pub fn render_summary_markdown(reports: &[MetricReport]) -> String {
    let mut out = md_header("System");
    for r in reports {
        out.push_str(&md_scores_row(&r.system_name, &r.averages));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub metric: String,
    pub system: String,
    pub value: f64,
}

/// Grouped-bar series: one group per metric, one bar per system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    pub metrics: Vec<String>,
    pub systems: Vec<String>,
    pub points: Vec<ChartPoint>,
}

pub fn export_chart_data(reports: &[MetricReport]) -> Result<ChartData, HarnessError> {
    if reports.is_empty() {
        return Err(HarnessError::NoReports);
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.system_name.as_str()) {
            return Err(HarnessError::DuplicateSystemName(r.system_name.clone()));
        }
    }
    let mut points = Vec::with_capacity(METRIC_COLUMNS.len() * reports.len());
    for (col, metric) in METRIC_COLUMNS.iter().enumerate() {
        for r in reports {
            points.push(ChartPoint {
                metric: metric.to_string(),
                system: r.system_name.clone(),
                value: r.averages.columns()[col],
            });
        }
    }
    Ok(ChartData {
        metrics: METRIC_COLUMNS.iter().map(|m| m.to_string()).collect(),
        systems: reports.iter().map(|r| r.system_name.clone()).collect(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub path: String,
    pub kind: String,
    pub system: Option<String>,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub format: String,
    pub version: u32,
    pub files: Vec<ReportFile>,
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    let s = s
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-");
    if s.is_empty() {
        "system".into()
    } else {
        s
    }
}

/// Writes every report in all three formats, a summary table, chart data and a
/// manifest into `dir`.
pub fn write_report_dir(
    dir: &Path,
    reports: &[MetricReport],
) -> Result<ReportManifest, HarnessError> {
    let chart = export_chart_data(reports)?;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put =
        |name: String, kind: &str, system: Option<&str>, body: &str| -> Result<(), HarnessError> {
            std::fs::write(dir.join(&name), body)?;
            files.push(ReportFile {
                path: name,
                kind: kind.into(),
                system: system.map(str::to_string),
                format_version: REPORT_FORMAT_VERSION,
            });
            Ok(())
        };
    for (i, r) in reports.iter().enumerate() {
        for f in ReportFormat::ALL {
            let name = format!("{:02}-{}.{}", i + 1, slug(&r.system_name), f.extension());
            put(
                name,
                f.extension(),
                Some(&r.system_name),
                &render_report(r, f),
            )?;
        }
    }
    put(
        "summary.md".into(),
        "summary",
        None,
        &render_summary_markdown(reports),
    )?;
    let chart_json = serde_json::to_string_pretty(&chart).expect("chart serialises") + "\n";
    put("chart.json".into(), "chart", None, &chart_json)?;
    let manifest = ReportManifest {
        format: "medrag-eval-report".into(),
        version: REPORT_FORMAT_VERSION,
        files,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n",
    )?;
    Ok(manifest)
}

/// Loads items from line-delimited JSON (`.jsonl`), a two-column table
/// (`.csv`/`.tsv`), or a tagged dialogue file (anything else), where each
/// patient turn is a query and the doctor reply its reference.
pub fn load_dataset(path: &Path) -> Result<Vec<EvalItem>, HarnessError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let items = match ext.as_str() {
        "jsonl" | "ndjson" => parse_jsonl_dataset(&std::fs::read_to_string(path)?)?,
        "csv" | "tsv" => parse_table_dataset(
            &std::fs::read_to_string(path)?,
            if ext == "tsv" { b'\t' } else { b',' },
        )?,
        _ => {
            let source = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("dataset");
            load_corpus(path, Some(CorpusFormat::Tagged))?
                .into_iter()
                .map(|ex| {
                    let mut item = EvalItem::new(ex.patient_text, ex.doctor_text);
                    item.tags.insert("source".into(), source.to_string());
                    item
                })
                .collect()
        }
    };
    if items.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(items)
}

pub fn parse_jsonl_dataset(text: &str) -> Result<Vec<EvalItem>, HarnessError> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(line).map_err(|e| HarnessError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        item.check().map_err(|message| HarnessError::Parse {
            line: i + 1,
            message,
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Uses `query`/`reference` header columns when present, otherwise the first
/// two columns of every row. Other named columns become tags.
pub fn parse_table_dataset(text: &str, delimiter: u8) -> Result<Vec<EvalItem>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let parse_err = |line: usize, e: csv::Error| HarnessError::Parse {
        line,
        message: e.to_string(),
    };
    let Some(first) = records.next() else {
        return Ok(Vec::new());
    };
    let first = first.map_err(|e| parse_err(1, e))?;
    let names: Vec<String> = first
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let q = names.iter().position(|h| h == "query");
    let r = names.iter().position(|h| h == "reference");
    let (qi, ri, named) = match (q, r) {
        (Some(q), Some(r)) => (q, r, true),
        _ => (0, 1, false),
    };
    let to_item = |line: usize, rec: &csv::StringRecord| -> Result<EvalItem, HarnessError> {
        let field = |i: usize| rec.get(i).unwrap_or("").to_string();
        let mut item = EvalItem::new(field(qi), field(ri));
        if named {
            for (i, name) in names.iter().enumerate() {
                if i != qi && i != ri && !name.is_empty() && !field(i).is_empty() {
                    item.tags.insert(name.clone(), field(i));
                }
            }
        }
        item.check()
            .map_err(|message| HarnessError::Parse { line, message })?;
        Ok(item)
    };
    let mut items = Vec::new();
    if !named {
        items.push(to_item(1, &first)?);
    }
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| parse_err(i + 2, e))?;
        items.push(to_item(i + 2, &rec)?);
    }
    Ok(items)
}

/// Default location for a report directory under `root`.
pub fn report_dir(root: &Path, run_name: &str) -> PathBuf {
    root.join(slug(run_name))
}
