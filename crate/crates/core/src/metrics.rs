//! Agreement and accuracy statistics plus rank metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn from_bool(yes: bool) -> Self {
        if yes {
            YesNo::Yes
        } else {
            YesNo::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == YesNo::Yes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("degenerate marginals: chance agreement is 1 but observed agreement is not")]
    DegenerateMarginals,
    #[error("annotators agree on no items")]
    EmptyConsensus,
    #[error("group {0} does not have exactly two annotators")]
    GroupSize(String),
    #[error("duplicate label for question {question_id} by {annotator}")]
    DuplicateLabel { question_id: String, annotator: String },
}

fn check_lengths<T, U>(a: &[T], b: &[U]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Fraction of index-wise matches.
pub fn accuracy(pred: &[YesNo], gold: &[YesNo]) -> Result<f64, MetricsError> {
    check_lengths(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 2x2 counts with `Yes` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix2x2 {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix2x2 {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn record(&mut self, pred: YesNo, gold: YesNo) {
        match (pred, gold) {
            (YesNo::Yes, YesNo::Yes) => self.tp += 1,
            (YesNo::Yes, YesNo::No) => self.fp += 1,
            (YesNo::No, YesNo::Yes) => self.fn_ += 1,
            (YesNo::No, YesNo::No) => self.tn += 1,
        }
    }
}

pub fn confusion_matrix(pred: &[YesNo], gold: &[YesNo]) -> Result<ConfusionMatrix2x2, MetricsError> {
    check_lengths(pred, gold)?;
    let mut cm = ConfusionMatrix2x2::default();
    for (&p, &g) in pred.iter().zip(gold) {
        cm.record(p, g);
    }
    Ok(cm)
}

/// Cohen's kappa for two binary raters. When chance agreement is 1 (both
/// raters constant and equal) perfect agreement scores 1.0.
pub fn cohens_kappa(a: &[YesNo], b: &[YesNo]) -> Result<f64, MetricsError> {
    check_lengths(a, b)?;
    let n = a.len() as f64;
    let mut agree = 0usize;
    let mut a_yes = 0usize;
    let mut b_yes = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        agree += usize::from(x == y);
        a_yes += usize::from(x.is_yes());
        b_yes += usize::from(y.is_yes());
    }
    let p_o = agree as f64 / n;
    let (pa, pb) = (a_yes as f64 / n, b_yes as f64 / n);
    let p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
    if p_e == 1.0 {
        return if p_o == 1.0 { Ok(1.0) } else { Err(MetricsError::DegenerateMarginals) };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Accuracy of `system` with one annotator's labels as ground truth.
pub fn annotator_acc(system: &[YesNo], annotator: &[YesNo]) -> Result<f64, MetricsError> {
    accuracy(system, annotator)
}

/// Accuracy restricted to items where both annotators agree, with that
/// consensus as ground truth.
pub fn group_agree_acc(system: &[YesNo], a: &[YesNo], b: &[YesNo]) -> Result<f64, MetricsError> {
    check_lengths(system, a)?;
    check_lengths(a, b)?;
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((&s, &x), &y) in system.iter().zip(a).zip(b) {
        if x == y {
            total += 1;
            hits += usize::from(s == x);
        }
    }
    if total == 0 {
        return Err(MetricsError::EmptyConsensus);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScore {
    pub topic: String,
    pub records: usize,
    pub correct: usize,
    /// Accuracy in percent.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTopicReport {
    pub topics: Vec<TopicScore>,
    /// Unweighted mean of the topic percentages.
    pub avg: f64,
    /// Sample (n-1) standard deviation over topic percentages.
    pub std_dev: f64,
    /// False when there is a single topic and the sample deviation is
    /// undefined; `std_dev` is then reported as 0.0.
    pub std_dev_defined: bool,
}

/// Per-topic accuracy (in percent), topics in ascending name order.
pub fn per_topic_report<S: AsRef<str>>(records: &[(S, bool)]) -> Result<PerTopicReport, MetricsError> {
    let mut by_topic: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (topic, correct) in records {
        let entry = by_topic.entry(topic.as_ref()).or_default();
        entry.0 += 1;
        entry.1 += usize::from(*correct);
    }
    if by_topic.is_empty() {
        return Err(MetricsError::Empty);
    }
    let topics: Vec<TopicScore> = by_topic
        .into_iter()
        .map(|(topic, (n, c))| TopicScore {
            topic: topic.into(),
            records: n,
            correct: c,
            percent: 100.0 * c as f64 / n as f64,
        })
        .collect();
    let values: Vec<f64> = topics.iter().map(|t| t.percent).collect();
    let (avg, std_dev, std_dev_defined) = mean_and_sample_std(&values);
    Ok(PerTopicReport { topics, avg, std_dev, std_dev_defined })
}

/// Mean and sample standard deviation; a single value has deviation 0.0
/// flagged as undefined.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0, false);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, libm::sqrt(ss / (n - 1.0)), true)
}

/// Fraction of queries whose relevant item sits at rank `<= k`. `None` is a
/// miss. An empty query list scores 0.0.
pub fn recall_at_k(rank_of_relevant: &[Option<usize>], k: usize) -> f64 {
    if rank_of_relevant.is_empty() {
        return 0.0;
    }
    let hits = rank_of_relevant
        .iter()
        .filter(|r| matches!(r, Some(rank) if *rank <= k))
        .count();
    hits as f64 / rank_of_relevant.len() as f64
}

/// Mean reciprocal rank; misses contribute 0.
pub fn mrr(rank_of_relevant: &[Option<usize>]) -> f64 {
    if rank_of_relevant.is_empty() {
        return 0.0;
    }
    let sum: f64 = rank_of_relevant
        .iter()
        .map(|r| r.map_or(0.0, |rank| 1.0 / rank as f64))
        .sum();
    sum / rank_of_relevant.len() as f64
}

/// One human (or system) label for a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub question_id: String,
    pub annotator: String,
    pub group: String,
    pub confusion_label: YesNo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defusion_label: Option<YesNo>,
}

/// Reserved annotator name for the pipeline's own labels.
pub const SYSTEM_ANNOTATOR: &str = "system";
/// Reserved annotator name for the adjudicated final labels.
pub const GROUND_TRUTH_ANNOTATOR: &str = "ground_truth";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelTask {
    Confusion,
    Defusion,
}

impl LabelRecord {
    pub fn label(&self, task: LabelTask) -> Option<YesNo> {
        match task {
            LabelTask::Confusion => Some(self.confusion_label),
            LabelTask::Defusion => self.defusion_label,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub out_of_scope: Option<f64>,
    pub defusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRow {
    pub annotator: String,
    pub annotator_acc: TaskPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub kappa: TaskPair,
    pub group_agree_acc: TaskPair,
    pub annotators: Vec<AnnotatorRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub groups: Vec<GroupRow>,
    pub ground_truth_acc: TaskPair,
    pub out_of_scope_matrix: Option<ConfusionMatrix2x2>,
    pub defusion_matrix: Option<ConfusionMatrix2x2>,
}

type LabelTable<'a> = BTreeMap<&'a str, BTreeMap<&'a str, &'a LabelRecord>>;

/// Aligned label vectors over the question ids where every listed
/// annotator has a label for `task`.
fn aligned(table: &LabelTable<'_>, annotators: &[&str], task: LabelTask) -> Vec<Vec<YesNo>> {
    let mut out = alloc::vec![Vec::new(); annotators.len()];
    let Some(first) = table.get(annotators[0]) else {
        return out;
    };
    for qid in first.keys() {
        let labels: Option<Vec<YesNo>> = annotators
            .iter()
            .map(|a| table.get(a).and_then(|m| m.get(qid)).and_then(|r| r.label(task)))
            .collect();
        if let Some(labels) = labels {
            for (slot, l) in out.iter_mut().zip(labels) {
                slot.push(l);
            }
        }
    }
    out
}

/// Agreement statistics over a label file.
///
/// Records whose annotator is [`SYSTEM_ANNOTATOR`] hold the pipeline's
/// labels and [`GROUND_TRUTH_ANNOTATOR`] the adjudicated ones; every other
/// annotator belongs to a group of exactly two.
pub fn agreement_report(records: &[LabelRecord]) -> Result<AgreementReport, MetricsError> {
    let mut table: LabelTable<'_> = BTreeMap::new();
    let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let slot = table.entry(r.annotator.as_str()).or_default();
        if slot.insert(r.question_id.as_str(), r).is_some() {
            return Err(MetricsError::DuplicateLabel {
                question_id: r.question_id.clone(),
                annotator: r.annotator.clone(),
            });
        }
        if r.annotator != SYSTEM_ANNOTATOR && r.annotator != GROUND_TRUTH_ANNOTATOR {
            groups.entry(r.group.as_str()).or_default().insert(r.annotator.as_str());
        }
    }

    let per_task = |f: &dyn Fn(LabelTask) -> Option<f64>| TaskPair {
        out_of_scope: f(LabelTask::Confusion),
        defusion: f(LabelTask::Defusion),
    };

    let mut group_rows = Vec::new();
    for (group, members) in &groups {
        let members: Vec<&str> = members.iter().copied().collect();
        let [a, b] = members[..] else {
            return Err(MetricsError::GroupSize((*group).into()));
        };
        let kappa = per_task(&|task| {
            let v = aligned(&table, &[a, b], task);
            cohens_kappa(&v[0], &v[1]).ok()
        });
        let group_agree = per_task(&|task| {
            let v = aligned(&table, &[SYSTEM_ANNOTATOR, a, b], task);
            group_agree_acc(&v[0], &v[1], &v[2]).ok()
        });
        let annotators = [a, b]
            .into_iter()
            .map(|name| AnnotatorRow {
                annotator: name.into(),
                annotator_acc: per_task(&|task| {
                    let v = aligned(&table, &[SYSTEM_ANNOTATOR, name], task);
                    annotator_acc(&v[0], &v[1]).ok()
                }),
            })
            .collect();
        group_rows.push(GroupRow {
            group: (*group).into(),
            kappa,
            group_agree_acc: group_agree,
            annotators,
        });
    }

    let matrix = |task| {
        let v = aligned(&table, &[SYSTEM_ANNOTATOR, GROUND_TRUTH_ANNOTATOR], task);
        confusion_matrix(&v[0], &v[1]).ok()
    };
    let out_of_scope_matrix = matrix(LabelTask::Confusion);
    let defusion_matrix = matrix(LabelTask::Defusion);
    Ok(AgreementReport {
        groups: group_rows,
        ground_truth_acc: TaskPair {
            out_of_scope: out_of_scope_matrix.map(|m| m.accuracy()),
            defusion: defusion_matrix.map(|m| m.accuracy()),
        },
        out_of_scope_matrix,
        defusion_matrix,
    })
}
