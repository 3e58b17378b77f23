//! Vector files: one `{id, dim, values, label?}` record per line, as
//! written by the external hidden-state extractor or an embedding job.

use std::collections::BTreeMap;
use std::path::Path;

use oosq_core::forge::Scope;
use oosq_core::probe::{build_nli_features, FeatureRecord, Split};
use oosq_core::retrieval::DenseVector;
use oosq_core::QuestionRecord;
use serde::{Deserialize, Serialize};

use crate::datastore::{read_records, Schema, Violation};
use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub id: String,
    pub dim: usize,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl Schema for VectorRecord {
    fn validate(&self) -> Result<(), Violation> {
        if self.id.is_empty() {
            return Err(Violation::new("id", "is empty"));
        }
        if self.values.len() != self.dim {
            return Err(Violation::new("values", format!("has {} entries, dim is {}", self.values.len(), self.dim)));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Violation::new("values", "contains a non-finite number"));
        }
        if matches!(self.label, Some(l) if l > 1) {
            return Err(Violation::new("label", "must be 0 or 1"));
        }
        Ok(())
    }
}

/// Reads a vector file and checks that every record shares one dimension.
pub fn read_vectors(path: &Path) -> Result<Vec<VectorRecord>> {
    let records = read_records::<VectorRecord>(path)?.records;
    if let Some(first) = records.first() {
        if let Some(bad) = records.iter().find(|r| r.dim != first.dim) {
            return Err(AppError::Validation(format!(
                "{}: record {} has dim {}, expected {}",
                path.display(),
                bad.id,
                bad.dim,
                first.dim
            )));
        }
    }
    Ok(records)
}

pub fn to_features(records: Vec<VectorRecord>) -> Vec<FeatureRecord> {
    records
        .into_iter()
        .map(|r| FeatureRecord { id: r.id, vector: r.values, label: r.label, split: Split::Unassigned })
        .collect()
}

pub fn to_dense(records: Vec<VectorRecord>) -> Vec<DenseVector> {
    records.into_iter().map(|r| DenseVector { id: r.id, values: r.values }).collect()
}

/// `[e_d; e_q; |e_d - e_q|]` features for every question that has both a
/// question vector and a vector for its document. The label comes from
/// the question vector record, falling back to the question's scope.
pub fn nli_features(
    questions: &[QuestionRecord],
    doc_vectors: Vec<VectorRecord>,
    question_vectors: Vec<VectorRecord>,
) -> Result<Vec<FeatureRecord>> {
    let docs: BTreeMap<String, VectorRecord> = doc_vectors.into_iter().map(|v| (v.id.clone(), v)).collect();
    let qvecs: BTreeMap<String, VectorRecord> = question_vectors.into_iter().map(|v| (v.id.clone(), v)).collect();
    let mut out = Vec::new();
    for q in questions {
        let Some(qv) = qvecs.get(&q.question_id) else { continue };
        let dv = docs.get(&q.doc_id).ok_or_else(|| {
            AppError::Validation(format!("no document vector for {} (question {})", q.doc_id, q.question_id))
        })?;
        let vector = build_nli_features(&dv.values, &qv.values).map_err(|e| AppError::Validation(format!("{}: {e}", q.question_id)))?;
        let label = qv.label.or(Some(u8::from(q.scope == Scope::In)));
        out.push(FeatureRecord { id: q.question_id.clone(), vector, label, split: Split::Unassigned });
    }
    Ok(out)
}
