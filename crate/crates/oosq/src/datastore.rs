//! Newline-delimited JSON record files, digests and the run manifest.
//!
//! Records are written one compact JSON object per line in struct field
//! order, so the bytes (and therefore the SHA-256 digest) of a file depend
//! only on the records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use oosq_core::forge::Claim;
use oosq_core::harness::{Judgement, ResponseRecord};
use oosq_core::metrics::LabelRecord;
use oosq_core::probe::{EpochLog, ProbeModel};
use oosq_core::{Document, QuestionRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {index}: field `{field}` {reason}")]
    Schema { path: PathBuf, index: usize, field: &'static str, reason: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

/// A field-level problem found by [`Schema::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub reason: String,
}

impl Violation {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Violation { field, reason: reason.into() }
    }
}

/// A record type that can live in a record file.
pub trait Schema: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<(), Violation> {
        Ok(())
    }
}

fn non_empty(field: &'static str, value: &str) -> Result<(), Violation> {
    if value.trim().is_empty() {
        Err(Violation::new(field, "is empty"))
    } else {
        Ok(())
    }
}

impl Schema for Document {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("doc_id", &self.doc_id)?;
        non_empty("topic", &self.topic)?;
        non_empty("text", &self.text)?;
        let words = self.text.split_whitespace().count();
        if words != self.word_count {
            return Err(Violation::new("word_count", format!("is {} but text has {words} words", self.word_count)));
        }
        Ok(())
    }
}

impl Schema for Claim {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("doc_id", &self.doc_id)?;
        if self.index == 0 {
            return Err(Violation::new("index", "must be at least 1"));
        }
        Ok(())
    }
}

impl Schema for QuestionRecord {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("question_id", &self.question_id)?;
        non_empty("doc_id", &self.doc_id)?;
        non_empty("text", &self.text)
    }
}

impl Schema for ResponseRecord {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("question_id", &self.question_id)?;
        non_empty("responder_model", &self.responder_model)
    }
}

impl Schema for Judgement {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("question_id", &self.question_id)?;
        if self.votes.is_empty() {
            return Err(Violation::new("votes", "is empty"));
        }
        if self.votes.len() != self.explanations.len() {
            return Err(Violation::new("explanations", "length differs from votes"));
        }
        Ok(())
    }
}

impl Schema for LabelRecord {
    fn validate(&self) -> Result<(), Violation> {
        non_empty("question_id", &self.question_id)?;
        non_empty("annotator", &self.annotator)
    }
}

impl Schema for EpochLog {}

impl Schema for ProbeModel {
    fn validate(&self) -> Result<(), Violation> {
        self.params.check_shapes().map_err(|e| Violation::new("params", e.to_string()))?;
        if !self.params.is_finite() {
            return Err(Violation::new("params", "contains a non-finite value"));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
    Ok(sha256_hex(&bytes))
}

/// Serializes `records` to NDJSON bytes after validating every record.
pub fn encode_records<T: Schema>(path: &Path, records: &[T]) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|v| StoreError::Schema { path: path.into(), index, field: v.field, reason: v.reason })?;
        serde_json::to_writer(&mut out, r).map_err(|e| StoreError::Parse {
            path: path.into(),
            line: index + 1,
            message: e.to_string(),
        })?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes bytes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |source| StoreError::Io { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Validates and writes `records`, returning the SHA-256 of the file bytes.
pub fn write_records<T: Schema>(path: &Path, records: &[T]) -> Result<String, StoreError> {
    let bytes = encode_records(path, records)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Fields present in a line that the schema does not know about.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownFields {
    pub line: usize,
    pub fields: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct ReadOutcome<T> {
    pub records: Vec<T>,
    pub unknown: Vec<UnknownFields>,
    pub digest: String,
}

fn known_keys<T: Serialize>(record: &T) -> Option<Vec<String>> {
    match serde_json::to_value(record).ok()? {
        Value::Object(map) => Some(map.into_iter().map(|(k, _)| k).collect()),
        _ => None,
    }
}

pub fn parse_records<T: Schema>(path: &Path, bytes: &[u8]) -> Result<ReadOutcome<T>, StoreError> {
    let text = std::str::from_utf8(bytes).map_err(|e| StoreError::Parse {
        path: path.into(),
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut records = Vec::new();
    let mut unknown = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| StoreError::Parse { path: path.into(), line: line_no, message };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(map) = &value else {
            return Err(parse_err("expected a JSON object".into()));
        };
        let record: T = T::deserialize(&value).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|v| StoreError::Schema {
            path: path.into(),
            index: records.len(),
            field: v.field,
            reason: v.reason,
        })?;
        if let Some(keys) = known_keys(&record) {
            let extra: Map<String, Value> = map
                .iter()
                .filter(|(k, v)| !keys.contains(k) && !v.is_null())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            if !extra.is_empty() {
                log::warn!("{}:{line_no}: unknown field(s) {:?}", path.display(), extra.keys().collect::<Vec<_>>());
                unknown.push(UnknownFields { line: line_no, fields: extra });
            }
        }
        records.push(record);
    }
    Ok(ReadOutcome { records, unknown, digest: sha256_hex(bytes) })
}

/// Reads and strictly validates a record file.
pub fn read_records<T: Schema>(path: &Path) -> Result<ReadOutcome<T>, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
    parse_records(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub records: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Output file name (relative to the output directory) to its digest.
    pub outputs: BTreeMap<String, OutputFile>,
    /// Input path to digest at the time the stage ran.
    pub inputs: BTreeMap<String, String>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub created_at: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Schema for RunManifest {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resume {
    Skip,
    Rerun(String),
}

impl RunManifest {
    pub fn new(run_id: &str, config_digest: &str) -> Self {
        RunManifest {
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the single-record manifest file, or `None` when absent.
    pub fn load(path: &Path) -> Result<Option<Self>, StoreError> {
        if !path.exists() {
            return Ok(None);
        }
        let mut out = read_records::<RunManifest>(path)?;
        match out.records.len() {
            1 => Ok(out.records.pop()),
            n => Err(StoreError::Parse { path: path.into(), line: 1, message: format!("expected 1 manifest record, found {n}") }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_records(path, std::slice::from_ref(self)).map(|_| ())
    }

    /// Decides whether `stage` can be skipped: every recorded output must
    /// still match its digest and the config and input digests must be
    /// unchanged.
    pub fn resume(&self, stage: &str, out_dir: &Path, config_digest: &str, inputs: &BTreeMap<String, String>) -> Resume {
        let Some(rec) = self.stages.get(stage) else {
            return Resume::Rerun("stage has not run".into());
        };
        if rec.config_digest != config_digest {
            return Resume::Rerun("config changed".into());
        }
        if &rec.inputs != inputs {
            return Resume::Rerun("inputs changed".into());
        }
        for (name, out) in &rec.outputs {
            match file_digest(&out_dir.join(name)) {
                Ok(d) if d == out.digest => {}
                Ok(_) => return Resume::Rerun(format!("{name} digest mismatch")),
                Err(_) => return Resume::Rerun(format!("{name} is missing")),
            }
        }
        Resume::Skip
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        self.stages.insert(stage.into(), record);
    }
}
