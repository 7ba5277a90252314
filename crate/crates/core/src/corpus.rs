//! Doctor–patient dialogue corpora.
//!
//! The canonical on-disk form wraps every turn in a tag naming the speaker:
//!
//! ```text
//! <Patient>I have had a headache for three days.</Patient> <Doctor>Drink water and rest.</Doctor>
//! ```
//!
//! Tags are matched case-insensitively and whitespace between pairs is free-form.
//! A turn whose whole content is wrapped in double quotes is stored without them.
//! Multi-turn conversations are flattened into consecutive (patient, doctor) pairs.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("unclosed <{tag}> opened at byte {offset}")]
    UnclosedTag { tag: Speaker, offset: usize },
    #[error("order violation at byte {offset}: {reason}")]
    OrderViolation { offset: usize, reason: String },
    #[error("empty {tag} turn at byte {offset}")]
    EmptyTurn { tag: Speaker, offset: usize },
    #[error("closing </{tag}> at byte {offset} has no matching opening tag")]
    StrayClosingTag { tag: Speaker, offset: usize },
    #[error("text outside of any turn at byte {offset}")]
    StrayText { offset: usize },
    #[error("turn text contains a speaker tag: {0:?}")]
    EmbeddedTag(String),
    #[error("empty input")]
    EmptyInput,
    #[error("tabular input: {0}")]
    Tabular(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Patient => "Patient",
            Speaker::Doctor => "Doctor",
        })
    }
}

/// One patient query and the doctor's reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExchange {
    pub patient_text: String,
    pub doctor_text: String,
    pub source: String,
    pub seq: usize,
}

impl DialogueExchange {
    /// Builds an exchange, normalising both turns the same way the parser does.
    pub fn new(
        patient_text: &str,
        doctor_text: &str,
        source: impl Into<String>,
        seq: usize,
    ) -> Result<Self, CorpusError> {
        let patient_text = normalize_turn(patient_text);
        let doctor_text = normalize_turn(doctor_text);
        for (tag, text) in [
            (Speaker::Patient, &patient_text),
            (Speaker::Doctor, &doctor_text),
        ] {
            if text.is_empty() {
                return Err(CorpusError::EmptyTurn { tag, offset: 0 });
            }
            if TAG_RE.is_match(text) {
                return Err(CorpusError::EmbeddedTag(text.clone()));
            }
        }
        Ok(Self {
            patient_text,
            doctor_text,
            source: source.into(),
            seq,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// A role/content message, the unit of chat-format exports and chat-provider requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub role: Role,
    pub content: String,
}

impl ChatRecord {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerExchange,
    PerDocument,
}

/// Plain-text document destined for the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    pub id: String,
    pub source: String,
    /// Inclusive range of exchange `seq` values rendered into `text`.
    pub seq_range: (usize, usize),
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tagged,
    Tabular,
}

impl CorpusFormat {
    /// `.csv` and `.tsv` files are tabular, everything else is tagged text.
    pub fn guess(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
        {
            Some(ext) if ext == "csv" || ext == "tsv" => CorpusFormat::Tabular,
            _ => CorpusFormat::Tagged,
        }
    }
}

static TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*(/?)\s*(patient|doctor)\s*>").expect("tag regex"));

/// Trims a turn and drops a pair of double quotes enclosing the whole turn.
pub fn normalize_turn(text: &str) -> String {
    let mut s = text.trim();
    // repeat so that normalisation is idempotent for `""nested""` quoting
    while let Some(inner) = strip_enclosing_quotes(s) {
        s = inner.trim();
    }
    s.to_string()
}

fn strip_enclosing_quotes(s: &str) -> Option<&str> {
    const PAIRS: [(char, char); 2] = [('"', '"'), ('“', '”')];
    PAIRS
        .iter()
        .find_map(|&(open, close)| s.strip_prefix(open)?.strip_suffix(close))
}

enum State {
    ExpectPatient,
    ExpectDoctor {
        patient: String,
    },
    Inside {
        tag: Speaker,
        open_at: usize,
        body_start: usize,
        patient: Option<String>,
    },
}

/// Parses tagged dialogue text into exchanges numbered from 0 in document order.
pub fn parse_tagged_dialogue(
    text: &str,
    source: &str,
) -> Result<Vec<DialogueExchange>, CorpusError> {
    let mut out = Vec::new();
    let mut state = State::ExpectPatient;
    let mut cursor = 0usize;

    for caps in TAG_RE.captures_iter(text) {
        let m = caps.get(0).expect("whole match");
        let closing = !caps[1].is_empty();
        let tag = if caps[2].eq_ignore_ascii_case("patient") {
            Speaker::Patient
        } else {
            Speaker::Doctor
        };

        state = match state {
            State::Inside {
                tag: open,
                open_at,
                body_start,
                patient,
            } => {
                if !closing || tag != open {
                    return Err(CorpusError::UnclosedTag {
                        tag: open,
                        offset: open_at,
                    });
                }
                let body = normalize_turn(&text[body_start..m.start()]);
                if body.is_empty() {
                    return Err(CorpusError::EmptyTurn {
                        tag: open,
                        offset: open_at,
                    });
                }
                match (open, patient) {
                    (Speaker::Patient, _) => State::ExpectDoctor { patient: body },
                    (Speaker::Doctor, Some(patient)) => {
                        let seq = out.len();
                        out.push(DialogueExchange {
                            patient_text: patient,
                            doctor_text: body,
                            source: source.to_string(),
                            seq,
                        });
                        State::ExpectPatient
                    }
                    (Speaker::Doctor, None) => {
                        unreachable!("doctor turn always follows a patient turn")
                    }
                }
            }
            outside => {
                if !text[cursor..m.start()].trim().is_empty() {
                    let skip = text[cursor..].len() - text[cursor..].trim_start().len();
                    return Err(CorpusError::StrayText {
                        offset: cursor + skip,
                    });
                }
                if closing {
                    return Err(CorpusError::StrayClosingTag {
                        tag,
                        offset: m.start(),
                    });
                }
                match (outside, tag) {
                    (State::ExpectPatient, Speaker::Patient) => State::Inside {
                        tag,
                        open_at: m.start(),
                        body_start: m.end(),
                        patient: None,
                    },
                    (State::ExpectDoctor { patient }, Speaker::Doctor) => State::Inside {
                        tag,
                        open_at: m.start(),
                        body_start: m.end(),
                        patient: Some(patient),
                    },
                    (State::ExpectPatient, Speaker::Doctor) => {
                        return Err(CorpusError::OrderViolation {
                            offset: m.start(),
                            reason: "doctor turn before any patient turn".into(),
                        })
                    }
                    (State::ExpectDoctor { .. }, Speaker::Patient) => {
                        return Err(CorpusError::OrderViolation {
                            offset: m.start(),
                            reason: "two patient turns in a row".into(),
                        })
                    }
                    (State::Inside { .. }, _) => unreachable!(),
                }
            }
        };
        cursor = m.end();
    }

    match state {
        State::Inside { tag, open_at, .. } => Err(CorpusError::UnclosedTag {
            tag,
            offset: open_at,
        }),
        State::ExpectDoctor { .. } => Err(CorpusError::OrderViolation {
            offset: text.len(),
            reason: "patient turn without a doctor response".into(),
        }),
        State::ExpectPatient => {
            if !text[cursor..].trim().is_empty() {
                let skip = text[cursor..].len() - text[cursor..].trim_start().len();
                return Err(CorpusError::StrayText {
                    offset: cursor + skip,
                });
            }
            Ok(out)
        }
    }
}

/// Canonical tagged form, one exchange per line.
pub fn render_tagged(exchanges: &[DialogueExchange]) -> String {
    exchanges
        .iter()
        .map(render_exchange)
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_exchange(e: &DialogueExchange) -> String {
    format!(
        "<Patient>{}</Patient> <Doctor>{}</Doctor>",
        e.patient_text, e.doctor_text
    )
}

/// Parses a two-column `patient,doctor` table. Tab-separated input is detected from the header line.
pub fn parse_tabular(text: &str, source: &str) -> Result<Vec<DialogueExchange>, CorpusError> {
    let header = text.lines().next().unwrap_or_default();
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Tabular(e.to_string()))?;
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| CorpusError::Tabular(format!("missing `{name}` column")))
    };
    let (patient_col, doctor_col) = (column("patient")?, column("doctor")?);

    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::Tabular(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let exchange =
            DialogueExchange::new(field(patient_col), field(doctor_col), source, out.len())
                .map_err(|e| CorpusError::Tabular(format!("row {}: {e}", row + 2)))?;
        out.push(exchange);
    }
    Ok(out)
}

/// Reads a corpus file. The source id is the file stem.
pub fn load_corpus(
    path: &Path,
    format: Option<CorpusFormat>,
) -> Result<Vec<DialogueExchange>, CorpusError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CorpusError::Io(format!("{}: {e}", path.display())))?;
    let source = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    match format.unwrap_or_else(|| CorpusFormat::guess(path)) {
        CorpusFormat::Tagged => parse_tagged_dialogue(&text, &source),
        CorpusFormat::Tabular => parse_tabular(&text, &source),
    }
}

/// Checks that seq values are unique and contiguous from 0 within every source.
pub fn validate_sequence(exchanges: &[DialogueExchange]) -> Result<(), CorpusError> {
    let mut sources: Vec<&str> = Vec::new();
    for e in exchanges {
        if !sources.contains(&e.source.as_str()) {
            sources.push(&e.source);
        }
    }
    for source in sources {
        let seqs: HashSet<usize> = exchanges
            .iter()
            .filter(|e| e.source == source)
            .map(|e| e.seq)
            .collect();
        let count = exchanges.iter().filter(|e| e.source == source).count();
        if seqs.len() != count || (0..count).any(|s| !seqs.contains(&s)) {
            return Err(CorpusError::OrderViolation {
                offset: 0,
                reason: format!("seq values of source {source:?} are not 0..{count}"),
            });
        }
    }
    Ok(())
}

/// Fine-tuning chat format: a user record then an assistant record per exchange.
pub fn export_chat_format(exchanges: &[DialogueExchange]) -> Result<Vec<ChatRecord>, CorpusError> {
    if exchanges.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(exchanges
        .iter()
        .flat_map(|e| {
            [
                ChatRecord::new(Role::User, e.patient_text.clone()),
                ChatRecord::new(Role::Assistant, e.doctor_text.clone()),
            ]
        })
        .collect())
}

/// One JSON object per line.
pub fn write_chat_jsonl(records: &[ChatRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("chat record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_chat_jsonl(text: &str) -> Result<Vec<ChatRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn to_knowledge_documents(
    exchanges: &[DialogueExchange],
    grouping: Grouping,
) -> Result<Vec<KnowledgeDocument>, CorpusError> {
    if exchanges.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let docs = match grouping {
        Grouping::PerExchange => exchanges
            .iter()
            .map(|e| KnowledgeDocument {
                id: format!("{}#{}", e.source, e.seq),
                source: e.source.clone(),
                seq_range: (e.seq, e.seq),
                text: render_exchange(e),
            })
            .collect(),
        Grouping::PerDocument => {
            let mut order: Vec<&str> = Vec::new();
            for e in exchanges {
                if !order.contains(&e.source.as_str()) {
                    order.push(&e.source);
                }
            }
            order
                .into_iter()
                .map(|source| {
                    let group: Vec<DialogueExchange> = exchanges
                        .iter()
                        .filter(|e| e.source == source)
                        .cloned()
                        .collect();
                    let first = group.iter().map(|e| e.seq).min().unwrap_or(0);
                    let last = group.iter().map(|e| e.seq).max().unwrap_or(0);
                    KnowledgeDocument {
                        id: format!("{source}#{first}-{last}"),
                        source: source.to_string(),
                        seq_range: (first, last),
                        text: render_tagged(&group),
                    }
                })
                .collect()
        }
    };
    Ok(docs)
}
