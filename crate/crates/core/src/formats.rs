//! On-disk artifacts exchanged between the extractor, the pipeline and
//! downstream tools.
//!
//! Hidden-state dumps (`FMHS`) are laid out as
//!
//! ```text
//! "FMHS" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | payload
//! ```
//!
//! where the payload is `layers * languages * samples * dim` little-endian
//! `f32` values in `[layer][language][sample][dim]` row-major order. Layer 0
//! is the embedding output, layers `1..=N` are decoder layers.
//!
//! Record files (logit records, judge labels, corpus items) are JSONL: one
//! UTF-8 JSON object per line. Blank lines are ignored.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HSD_MAGIC: &[u8; 4] = b"FMHS";
pub const HSD_VERSION: u32 = 1;

/// The language every translation pair uses on the source side.
pub const SOURCE_LANGUAGE: &str = "en";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"FMHS\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: {what} needs {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: header implies {expected} payload bytes, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value {value} at layer {layer}, language {language}, sample {sample}, dim {dim}")]
    NonFinite {
        layer: usize,
        language: usize,
        sample: usize,
        dim: usize,
        value: f32,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid dump: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate label for question {question_id:?} in language {language:?}")]
    Duplicate {
        line: usize,
        question_id: String,
        language: String,
    },
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Mean-pooled sentence embeddings per layer, language and parallel sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    pub model_id: String,
    pub layers: usize,
    pub languages: Vec<String>,
    pub samples: usize,
    pub dim: usize,
    /// `[layer][language][sample][dim]`, row-major.
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HsdHeader {
    model_id: String,
    layers: usize,
    languages: Vec<String>,
    samples: usize,
    dim: usize,
}

impl HiddenStateDump {
    /// Builds a dump and checks every invariant.
    pub fn new(
        model_id: impl Into<String>,
        layers: usize,
        languages: Vec<String>,
        samples: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let dump = Self {
            model_id: model_id.into(),
            layers,
            languages,
            samples,
            dim,
            data,
        };
        dump.validate()?;
        Ok(dump)
    }

    /// Zero-filled dump, handy for building fixtures in place.
    pub fn zeros(
        model_id: impl Into<String>,
        layers: usize,
        languages: Vec<String>,
        samples: usize,
        dim: usize,
    ) -> Result<Self> {
        let len = layers * languages.len() * samples * dim;
        Self::new(model_id, layers, languages, samples, dim, vec![0.0; len])
    }

    pub fn expected_len(&self) -> usize {
        self.layers * self.languages.len() * self.samples * self.dim
    }

    fn check_shape(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(FormatError::Invalid(format!(
                "layers must be >= 2, got {}",
                self.layers
            )));
        }
        if self.languages.len() < 2 {
            return Err(FormatError::Invalid(format!(
                "at least 2 languages required, got {}",
                self.languages.len()
            )));
        }
        if self.samples < 1 || self.dim < 1 {
            return Err(FormatError::Invalid(format!(
                "samples and dim must be >= 1, got samples={} dim={}",
                self.samples, self.dim
            )));
        }
        let mut seen = HashSet::new();
        for lang in &self.languages {
            if lang.is_empty() {
                return Err(FormatError::Invalid("empty language code".into()));
            }
            if !seen.insert(lang.as_str()) {
                return Err(FormatError::Invalid(format!("duplicate language {lang:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        let expected = self.expected_len();
        if self.data.len() != expected {
            return Err(FormatError::DimensionMismatch {
                expected: expected * 4,
                found: self.data.len() * 4,
            });
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let dim = pos % self.dim;
            let sample = (pos / self.dim) % self.samples;
            let language = (pos / (self.dim * self.samples)) % self.languages.len();
            let layer = pos / (self.dim * self.samples * self.languages.len());
            return Err(FormatError::NonFinite {
                layer,
                language,
                sample,
                dim,
                value: self.data[pos],
            });
        }
        Ok(())
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    /// All `languages * samples * dim` values of one layer.
    pub fn layer_slice(&self, layer: usize) -> &[f32] {
        let stride = self.languages.len() * self.samples * self.dim;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    pub fn vector(&self, layer: usize, language: usize, sample: usize) -> &[f32] {
        let offset = ((layer * self.languages.len() + language) * self.samples + sample) * self.dim;
        &self.data[offset..offset + self.dim]
    }

    pub fn vector_mut(&mut self, layer: usize, language: usize, sample: usize) -> &mut [f32] {
        let offset = ((layer * self.languages.len() + language) * self.samples + sample) * self.dim;
        &mut self.data[offset..offset + self.dim]
    }
}

/// Serializes a validated dump.
pub fn write_hsd<W: Write>(dump: &HiddenStateDump, mut sink: W) -> Result<()> {
    dump.validate()?;
    let header = serde_json::to_vec(&HsdHeader {
        model_id: dump.model_id.clone(),
        layers: dump.layers,
        languages: dump.languages.clone(),
        samples: dump.samples,
        dim: dump.dim,
    })
    .map_err(|e| FormatError::Header(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| FormatError::Header("header longer than u32::MAX bytes".into()))?;

    sink.write_all(HSD_MAGIC)?;
    sink.write_all(&HSD_VERSION.to_le_bytes())?;
    sink.write_all(&header_len.to_le_bytes())?;
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(dump.data.len() * 4);
    for v in &dump.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &'static str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or(FormatError::Truncated {
        what,
        expected: n,
        found: bytes.len().saturating_sub(at),
    })
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses and validates a dump.
///
/// A payload that is not a whole number of floats, or whose float count is
/// not a multiple of `layers * languages * samples`, is reported as
/// truncated; a payload of whole rows with the wrong row length is a
/// dimension mismatch.
pub fn read_hsd<R: Read>(mut source: R) -> Result<HiddenStateDump> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;

    let magic = take(&bytes, 0, 4, "magic")
        .map_err(|_| FormatError::BadMagic { found: bytes.clone() })?;
    if magic != HSD_MAGIC {
        return Err(FormatError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u32_le(take(&bytes, 4, 4, "version")?);
    if version != HSD_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let header_len = u32_le(take(&bytes, 8, 4, "header length")?) as usize;
    let header_bytes = take(&bytes, 12, header_len, "header")?;
    let header: HsdHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| FormatError::Header(e.to_string()))?;

    let mut dump = HiddenStateDump {
        model_id: header.model_id,
        layers: header.layers,
        languages: header.languages,
        samples: header.samples,
        dim: header.dim,
        data: Vec::new(),
    };
    dump.check_shape()?;

    let payload = &bytes[12 + header_len..];
    let expected = dump
        .layers
        .checked_mul(dump.languages.len())
        .and_then(|n| n.checked_mul(dump.samples))
        .and_then(|n| n.checked_mul(dump.dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Header("dimensions overflow".into()))?;
    if payload.len() != expected {
        let rows = dump.layers * dump.languages.len() * dump.samples;
        let whole_rows = payload.len() % 4 == 0 && (payload.len() / 4) % rows == 0;
        return Err(if payload.len() < expected && !whole_rows {
            FormatError::Truncated {
                what: "payload",
                expected,
                found: payload.len(),
            }
        } else {
            FormatError::DimensionMismatch {
                expected,
                found: payload.len(),
            }
        });
    }
    dump.data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    dump.validate()?;
    Ok(dump)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerRole {
    Best,
    True,
    False,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredAnswer {
    pub text: String,
    pub role: AnswerRole,
    /// Sum of answer-token log-probabilities conditioned on the prompt.
    pub logprob: f64,
}

/// One question in one language with its scored answer candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRecord {
    pub question_id: String,
    pub language: String,
    pub answers: Vec<ScoredAnswer>,
}

impl LogitRecord {
    pub fn validate(&self) -> Result<(), String> {
        let best = self
            .answers
            .iter()
            .filter(|a| a.role == AnswerRole::Best)
            .count();
        if best != 1 {
            return Err(format!(
                "expected exactly one best answer, found {best}"
            ));
        }
        if !self.answers.iter().any(|a| a.role == AnswerRole::False) {
            return Err("no false answers".into());
        }
        if let Some(a) = self.answers.iter().find(|a| !a.logprob.is_finite()) {
            return Err(format!("non-finite logprob for answer {:?}", a.text));
        }
        Ok(())
    }

    pub fn best(&self) -> &ScoredAnswer {
        self.answers
            .iter()
            .find(|a| a.role == AnswerRole::Best)
            .expect("validated record has a best answer")
    }

    /// Correct answers in file order; the best answer counts as correct.
    pub fn true_answers(&self) -> impl Iterator<Item = &ScoredAnswer> {
        self.answers.iter().filter(|a| a.role != AnswerRole::False)
    }

    pub fn false_answers(&self) -> impl Iterator<Item = &ScoredAnswer> {
        self.answers.iter().filter(|a| a.role == AnswerRole::False)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeLabel {
    pub question_id: String,
    pub language: String,
    pub truthful: bool,
    pub informative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Factuality,
    Common,
    Pretraining,
}

impl CorpusKind {
    pub fn is_translation(self) -> bool {
        !matches!(self, CorpusKind::Pretraining)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusKind::Factuality => "factuality",
            CorpusKind::Common => "common",
            CorpusKind::Pretraining => "pretraining",
        }
    }
}

impl std::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    pub kind: CorpusKind,
    pub source_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_lang: Option<String>,
    pub source_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_group: Option<String>,
}

impl CorpusItem {
    pub fn translation(
        kind: CorpusKind,
        target_lang: impl Into<String>,
        source_text: impl Into<String>,
        target_text: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            source_lang: SOURCE_LANGUAGE.to_string(),
            target_lang: Some(target_lang.into()),
            source_text: source_text.into(),
            target_text: Some(target_text.into()),
            topic: None,
            alignment_group: None,
        }
    }

    pub fn pretraining(text: impl Into<String>) -> Self {
        Self {
            kind: CorpusKind::Pretraining,
            source_lang: SOURCE_LANGUAGE.to_string(),
            target_lang: None,
            source_text: text.into(),
            target_text: None,
            topic: None,
            alignment_group: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            CorpusKind::Pretraining => {
                if self.target_lang.is_some() || self.target_text.is_some() {
                    return Err("pretraining item must not carry target_lang or target_text".into());
                }
                if self.alignment_group.is_some() {
                    return Err("alignment_group is only valid on factuality items".into());
                }
            }
            kind => {
                if self.source_lang != SOURCE_LANGUAGE {
                    return Err(format!(
                        "{kind} item must have source_lang \"{SOURCE_LANGUAGE}\", got {:?}",
                        self.source_lang
                    ));
                }
                match self.target_lang.as_deref() {
                    None => return Err(format!("{kind} item is missing target_lang")),
                    Some(SOURCE_LANGUAGE) => {
                        return Err(format!(
                            "{kind} item must not target \"{SOURCE_LANGUAGE}\""
                        ))
                    }
                    Some(_) => {}
                }
                if self.target_text.is_none() {
                    return Err(format!("{kind} item is missing target_text"));
                }
                if kind == CorpusKind::Common && self.alignment_group.is_some() {
                    return Err("alignment_group is only valid on factuality items".into());
                }
            }
        }
        Ok(())
    }
}

fn read_jsonl<R, T, F>(source: R, mut check: F) -> Result<Vec<T>>
where
    R: BufRead,
    T: DeserializeOwned,
    F: FnMut(usize, &T) -> Result<()>,
{
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| FormatError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        check(line_no, &value)?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<W: Write, T: Serialize>(items: &[T], mut sink: W) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| FormatError::Schema {
            line: 0,
            message: e.to_string(),
        })?;
        sink.write_all(line.as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

fn schema(line: usize) -> impl Fn(String) -> FormatError {
    move |message| FormatError::Schema { line, message }
}

pub fn read_logit_records<R: BufRead>(source: R) -> Result<Vec<LogitRecord>> {
    read_jsonl(source, |line, r: &LogitRecord| r.validate().map_err(schema(line)))
}

pub fn write_logit_records<W: Write>(records: &[LogitRecord], sink: W) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(schema(i + 1))?;
    }
    write_jsonl(records, sink)
}

pub fn read_judge_labels<R: BufRead>(source: R) -> Result<Vec<JudgeLabel>> {
    let mut seen = HashSet::new();
    read_jsonl(source, |line, l: &JudgeLabel| {
        if seen.insert((l.question_id.clone(), l.language.clone())) {
            Ok(())
        } else {
            Err(FormatError::Duplicate {
                line,
                question_id: l.question_id.clone(),
                language: l.language.clone(),
            })
        }
    })
}

pub fn write_judge_labels<W: Write>(labels: &[JudgeLabel], sink: W) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, l) in labels.iter().enumerate() {
        if !seen.insert((&l.question_id, &l.language)) {
            return Err(FormatError::Duplicate {
                line: i + 1,
                question_id: l.question_id.clone(),
                language: l.language.clone(),
            });
        }
    }
    write_jsonl(labels, sink)
}

pub fn read_corpus<R: BufRead>(source: R) -> Result<Vec<CorpusItem>> {
    read_jsonl(source, |line, c: &CorpusItem| c.validate().map_err(schema(line)))
}

pub fn write_corpus<W: Write>(items: &[CorpusItem], sink: W) -> Result<()> {
    for (i, c) in items.iter().enumerate() {
        c.validate().map_err(schema(i + 1))?;
    }
    write_jsonl(items, sink)
}
