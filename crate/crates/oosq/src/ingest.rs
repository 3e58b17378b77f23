use std::collections::BTreeSet;
use std::path::Path;

use oosq_core::corpus::CorpusError;
use oosq_core::Document;
use serde::{Deserialize, Serialize};

use crate::datastore::{read_records, Schema, Violation};
use crate::error::{AppError, Result};

/// A line of the raw documents file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<String>,
    pub text: String,
}

/// Accepts `YYYY-MM-DD` or an RFC 3339 timestamp; returns the date part.
pub fn normalize_date(s: &str) -> Option<String> {
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.format("%Y-%m-%d").to_string());
    }
    chrono::DateTime::parse_from_rfc3339(s).ok().map(|t| t.date_naive().format("%Y-%m-%d").to_string())
}

impl Schema for RawDocument {
    fn validate(&self) -> Result<(), Violation> {
        if self.doc_id.trim().is_empty() {
            return Err(Violation::new("doc_id", "is empty"));
        }
        if let Some(d) = &self.published_at {
            if normalize_date(d).is_none() {
                return Err(Violation::new("published_at", format!("{d:?} is not an ISO-8601 date")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub admitted: Vec<Document>,
    /// `(doc_id, word_count)` of documents at or under the word minimum.
    pub rejected: Vec<(String, usize)>,
    /// Documents over the cap with no sentence boundary to cut at.
    pub kept_whole: Vec<String>,
}

/// Reads raw documents, applies the length filter and truncation, and
/// checks doc_id uniqueness. A record's own topic wins over `fallback_topic`.
pub fn ingest_documents(path: &Path, fallback_topic: Option<&str>, min_words: usize, cap: usize) -> Result<IngestReport> {
    let raw = read_records::<RawDocument>(path)?.records;
    let mut seen = BTreeSet::new();
    let mut report = IngestReport::default();
    for r in raw {
        if !seen.insert(r.doc_id.clone()) {
            return Err(AppError::Validation(format!("{}: duplicate doc_id {}", path.display(), r.doc_id)));
        }
        let topic = r
            .topic
            .clone()
            .filter(|t| !t.trim().is_empty())
            .or_else(|| fallback_topic.map(String::from))
            .ok_or_else(|| AppError::Validation(format!("{}: document {} has no topic", path.display(), r.doc_id)))?;
        let date = r.published_at.as_deref().and_then(normalize_date);
        match Document::admit(r.doc_id.clone(), topic, date, &r.text, min_words, cap) {
            Ok((doc, whole)) => {
                if whole {
                    log::warn!("document {} has no sentence boundary past {cap} words; kept whole", doc.doc_id);
                    report.kept_whole.push(doc.doc_id.clone());
                }
                report.admitted.push(doc);
            }
            Err(CorpusError::Rejected { word_count }) => report.rejected.push((r.doc_id, word_count)),
            Err(e @ CorpusError::InvalidBounds { .. }) => return Err(AppError::Config(e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::write_records;

    fn words(n: usize) -> String {
        vec!["word"; n].join(" ")
    }

    fn raw(id: &str, text: String) -> RawDocument {
        RawDocument { doc_id: id.into(), topic: Some("sports".into()), published_at: Some("2024-06-01".into()), text }
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        std::fs::write(&p, "").unwrap();
        assert_eq!(ingest_documents(&p, None, 150, 300).unwrap(), IngestReport::default());
    }

    #[test]
    fn truncates_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        let five: Vec<String> = (0..5).map(|_| format!("{}.", words(80))).collect();
        write_records(&p, &[raw("long", five.join(" ")), raw("short", format!("{}.", words(150)))]).unwrap();
        let r = ingest_documents(&p, None, 150, 300).unwrap();
        assert_eq!(r.admitted.len(), 1);
        assert_eq!(r.admitted[0].word_count, 320);
        assert_eq!(r.admitted[0].published_at.as_deref(), Some("2024-06-01"));
        assert_eq!(r.rejected, vec![("short".to_string(), 150)]);
    }

    #[test]
    fn duplicate_ids_and_bad_dates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        write_records(&p, &[raw("a", words(200)), raw("a", words(200))]).unwrap();
        let err = ingest_documents(&p, None, 150, 300).unwrap_err();
        assert!(err.to_string().contains("duplicate doc_id a"), "{err}");
        let mut bad = raw("b", words(200));
        bad.published_at = Some("June 1st".into());
        assert!(write_records(&p, &[bad]).is_err());
    }

    #[test]
    fn topic_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.jsonl");
        let mut r = raw("a", words(200));
        r.topic = None;
        write_records(&p, &[r]).unwrap();
        assert!(ingest_documents(&p, None, 150, 300).is_err());
        assert_eq!(ingest_documents(&p, Some("science"), 150, 300).unwrap().admitted[0].topic, "science");
    }

    #[test]
    fn dates() {
        assert_eq!(normalize_date("2024-02-29").as_deref(), Some("2024-02-29"));
        assert_eq!(normalize_date("2024-03-01T10:00:00Z").as_deref(), Some("2024-03-01"));
        assert_eq!(normalize_date("2023-02-29"), None);
    }
}
