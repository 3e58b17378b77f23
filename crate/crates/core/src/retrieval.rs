//! BM25 over an in-memory inverted index, plus cosine ranking of
//! externally supplied vectors.
//!
//! Documents are stored in ascending `doc_id` order, so a stable sort by
//! score alone already yields the ascending-id tie rule.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::metrics;

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;
/// Relevant documents ranked below this depth count as misses.
pub const DEFAULT_DEPTH: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("duplicate doc_id {0}")]
    DuplicateDoc(String),
    #[error("unknown doc_id {0}")]
    UnknownDoc(String),
    #[error("vector for {id} has dimension {got}, expected {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("question {question_id} has no {what}")]
    Unresolvable { question_id: String, what: &'static str },
    #[error("top_k must be at least 1")]
    ZeroTopK,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerOptions {
    pub lowercase: bool,
    pub stopwords: BTreeSet<String>,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions { lowercase: true, stopwords: BTreeSet::new() }
    }
}

/// Maximal alphanumeric runs, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, &TokenizerOptions::default())
}

pub fn tokenize_with(text: &str, opts: &TokenizerOptions) -> Vec<String> {
    let mut out = Vec::new();
    for run in text.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()) {
        let term: String = if opts.lowercase { run.chars().flat_map(char::to_lowercase).collect() } else { run.into() };
        if !opts.stopwords.contains(&term) {
            out.push(term);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: DEFAULT_K1, b: DEFAULT_B }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub doc_ids: Vec<String>,
    pub doc_len: Vec<usize>,
    pub avgdl: f64,
    /// term -> (document position, term frequency), positions ascending.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
    pub params: Bm25Params,
    pub tokenizer: TokenizerOptions,
}

/// Builds the index over `(doc_id, text)` pairs. Input order does not matter.
pub fn build_index<'a, I>(docs: I, params: Bm25Params, tokenizer: TokenizerOptions) -> Result<InvertedIndex, RetrievalError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut sorted: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, text) in docs {
        if sorted.insert(id, text).is_some() {
            return Err(RetrievalError::DuplicateDoc(id.into()));
        }
    }
    if sorted.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut doc_ids = Vec::with_capacity(sorted.len());
    let mut doc_len = Vec::with_capacity(sorted.len());
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    for (pos, (id, text)) in sorted.into_iter().enumerate() {
        let terms = tokenize_with(text, &tokenizer);
        doc_ids.push(String::from(id));
        doc_len.push(terms.len());
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (t, f) in tf {
            postings.entry(t).or_default().push((pos as u32, f));
        }
    }
    let avgdl = doc_len.iter().sum::<usize>() as f64 / doc_ids.len() as f64;
    Ok(InvertedIndex { doc_ids, doc_len, avgdl, postings, params, tokenizer })
}

impl InvertedIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    fn term_weight(&self, tf: u32, dl: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        // avgdl is 0 only when every document is empty, in which case no term matches
        let norm = if self.avgdl > 0.0 { dl as f64 / self.avgdl } else { 1.0 };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    /// Scores for every document, in index order. Repeated query terms
    /// count once per occurrence.
    pub fn score_all(&self, query: &[String]) -> Vec<f64> {
        let mut scores = alloc::vec![0.0; self.len()];
        for term in query {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(pos, tf) in list {
                let pos = pos as usize;
                scores[pos] += idf * self.term_weight(tf, self.doc_len[pos]);
            }
        }
        scores
    }
}

pub fn bm25_score(index: &InvertedIndex, query: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
    let pos = index.position(doc_id).ok_or_else(|| RetrievalError::UnknownDoc(doc_id.into()))?;
    let mut score = 0.0;
    for term in query {
        let Some(list) = index.postings.get(term) else { continue };
        if let Ok(i) = list.binary_search_by_key(&(pos as u32), |&(p, _)| p) {
            score += index.idf(list.len()) * index.term_weight(list[i].1, index.doc_len[pos]);
        }
    }
    Ok(score)
}

/// Positions sorted by descending score, stable on ties.
fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// 1-based rank of `target` under the descending-score, ascending-position rule.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}

/// Top `top_k` documents for a raw query string.
pub fn rank(index: &InvertedIndex, query: &str, top_k: usize) -> Result<Vec<(String, f64)>, RetrievalError> {
    if top_k == 0 {
        return Err(RetrievalError::ZeroTopK);
    }
    let terms = tokenize_with(query, &index.tokenizer);
    let scores = index.score_all(&terms);
    Ok(order_by_score(&scores)
        .into_iter()
        .take(top_k)
        .map(|p| (index.doc_ids[p].clone(), scores[p]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseRanking {
    pub ranked: Vec<(String, f64)>,
    /// Documents whose similarity was forced to 0 because a norm was 0.
    pub zero_norm: Vec<String>,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn cosine_scores(docs: &[DenseVector], query: &[f64]) -> Result<(Vec<f64>, Vec<String>), RetrievalError> {
    let qn = norm(query);
    let mut zero = Vec::new();
    let mut scores = Vec::with_capacity(docs.len());
    for d in docs {
        if d.values.len() != query.len() {
            return Err(RetrievalError::DimMismatch { id: d.id.clone(), expected: query.len(), got: d.values.len() });
        }
        let dn = norm(&d.values);
        if dn == 0.0 || qn == 0.0 {
            zero.push(d.id.clone());
            scores.push(0.0);
            continue;
        }
        let dot: f64 = d.values.iter().zip(query).map(|(a, b)| a * b).sum();
        scores.push(dot / (dn * qn));
    }
    Ok((scores, zero))
}

fn sorted_by_id(docs: &[DenseVector]) -> Result<Vec<DenseVector>, RetrievalError> {
    let mut docs = docs.to_vec();
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(RetrievalError::DuplicateDoc(w[0].id.clone()));
    }
    Ok(docs)
}

/// Descending cosine similarity, ties by ascending id.
pub fn dense_rank(docs: &[DenseVector], query: &[f64], top_k: usize) -> Result<DenseRanking, RetrievalError> {
    if top_k == 0 {
        return Err(RetrievalError::ZeroTopK);
    }
    let docs = sorted_by_id(docs)?;
    let (scores, zero_norm) = cosine_scores(&docs, query)?;
    let ranked = order_by_score(&scores)
        .into_iter()
        .take(top_k)
        .map(|p| (docs[p].id.clone(), scores[p]))
        .collect();
    Ok(DenseRanking { ranked, zero_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub retriever: String,
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub depth: usize,
}

impl RetrievalReport {
    pub fn from_ranks(retriever: &str, ranks: &[Option<usize>], depth: usize) -> Self {
        RetrievalReport {
            retriever: retriever.into(),
            queries: ranks.len(),
            recall_at_1: metrics::recall_at_k(ranks, 1),
            recall_at_5: metrics::recall_at_k(ranks, 5),
            recall_at_10: metrics::recall_at_k(ranks, 10),
            mrr: metrics::mrr(ranks),
            depth,
        }
    }
}

/// A query with the document it was generated from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenancedQuery<'a> {
    pub question_id: &'a str,
    pub text: &'a str,
    pub source_doc: &'a str,
}

fn cut(rank: usize, depth: usize) -> Option<usize> {
    (rank <= depth).then_some(rank)
}

/// Rank of each query's source document under BM25, `None` past `depth`.
pub fn bm25_ranks(index: &InvertedIndex, queries: &[ProvenancedQuery<'_>], depth: usize) -> Result<Vec<Option<usize>>, RetrievalError> {
    queries
        .iter()
        .map(|q| {
            let target = index.position(q.source_doc).ok_or_else(|| RetrievalError::Unresolvable {
                question_id: q.question_id.into(),
                what: "indexed source document",
            })?;
            let scores = index.score_all(&tokenize_with(q.text, &index.tokenizer));
            Ok(cut(rank_of(&scores, target), depth))
        })
        .collect()
}

pub fn evaluate_bm25(index: &InvertedIndex, queries: &[ProvenancedQuery<'_>], depth: usize) -> Result<RetrievalReport, RetrievalError> {
    let ranks = bm25_ranks(index, queries, depth)?;
    Ok(RetrievalReport::from_ranks("bm25", &ranks, depth))
}

/// Dense evaluation: `query_vectors` are looked up by question id.
pub fn evaluate_dense(
    retriever: &str,
    docs: &[DenseVector],
    query_vectors: &BTreeMap<String, Vec<f64>>,
    queries: &[ProvenancedQuery<'_>],
    depth: usize,
) -> Result<(RetrievalReport, Vec<String>), RetrievalError> {
    let docs = sorted_by_id(docs)?;
    let mut ranks = Vec::with_capacity(queries.len());
    let mut zero_norm = BTreeSet::new();
    for q in queries {
        let target = docs.binary_search_by(|d| d.id.as_str().cmp(q.source_doc)).map_err(|_| RetrievalError::Unresolvable {
            question_id: q.question_id.into(),
            what: "source document vector",
        })?;
        let qv = query_vectors.get(q.question_id).ok_or_else(|| RetrievalError::Unresolvable {
            question_id: q.question_id.into(),
            what: "query vector",
        })?;
        let (scores, zero) = cosine_scores(&docs, qv)?;
        zero_norm.extend(zero);
        ranks.push(cut(rank_of(&scores, target), depth));
    }
    Ok((RetrievalReport::from_ranks(retriever, &ranks, depth), zero_norm.into_iter().collect()))
}
