//! RAG responses under three prompt variants, self-consistency judging of
//! confusion and defusion, and the per-topic defusion benchmark.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::forge::{QuestionRecord, Scope};
use crate::gateway::{ChatGateway, ChatRequest, GatewayError, GENERATION_TEMPERATURE, JUDGE_TEMPERATURE};
use crate::metrics::{self, PerTopicReport};
use crate::prompt::{bindings, parse_verdict, PromptError, PromptKit, TemplateId, VerdictValue};

pub use crate::prompt::Verdict as Vote;

/// Aggregated outcome of a self-consistency vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Basic,
    #[serde(alias = "two-shot")]
    TwoShot,
    #[serde(alias = "zero-shot-cot")]
    ZeroShotCot,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [PromptVariant::Basic, PromptVariant::TwoShot, PromptVariant::ZeroShotCot];

    pub fn template(self) -> TemplateId {
        match self {
            PromptVariant::Basic => TemplateId::RagBasic,
            PromptVariant::TwoShot => TemplateId::RagTwoShot,
            PromptVariant::ZeroShotCot => TemplateId::RagZeroShotCot,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Basic => "basic",
            PromptVariant::TwoShot => "two-shot",
            PromptVariant::ZeroShotCot => "zero-shot-cot",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "basic" => Ok(PromptVariant::Basic),
            "two-shot" => Ok(PromptVariant::TwoShot),
            "zero-shot-cot" => Ok(PromptVariant::ZeroShotCot),
            _ => Err(HarnessError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Confusion,
    Defusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub question_id: String,
    pub responder_model: String,
    pub prompt_variant: PromptVariant,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub question_id: String,
    pub task: Task,
    pub judge_model: String,
    /// Responder whose answer was judged (defusion only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_variant: Option<PromptVariant>,
    pub votes: Vec<Vote>,
    pub verdict: Verdict,
    pub explanations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("self-consistency sample count must be odd and positive, got {0}")]
    EvenSampleCount(u32),
    #[error("unknown prompt variant {0}")]
    UnknownVariant(String),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("gateway error for question {question_id}: {source}")]
    Gateway { question_id: String, source: GatewayError },
}

/// Strict majority of parsed votes; equal counts, including no parsed votes
/// at all, are `Indeterminate`.
pub fn majority_vote(votes: &[Vote]) -> Result<Verdict, HarnessError> {
    majority_of(votes.iter().map(|v| v.value))
}

pub fn majority_of(values: impl IntoIterator<Item = VerdictValue>) -> Result<Verdict, HarnessError> {
    let mut seen = false;
    let (mut yes, mut no) = (0usize, 0usize);
    for v in values {
        seen = true;
        match v {
            VerdictValue::Yes => yes += 1,
            VerdictValue::No => no += 1,
            VerdictValue::Unparseable => {}
        }
    }
    if !seen {
        return Err(HarnessError::PreconditionViolation("empty vote list".into()));
    }
    Ok(match yes.cmp(&no) {
        core::cmp::Ordering::Greater => Verdict::Yes,
        core::cmp::Ordering::Less => Verdict::No,
        core::cmp::Ordering::Equal => Verdict::Indeterminate,
    })
}

/// Judge model and self-consistency settings. `m` is always odd.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeSettings {
    m: u32,
    pub model: String,
    pub temperature: f64,
    pub parallelism: usize,
}

impl JudgeSettings {
    pub fn new(model: &str, m: u32) -> Result<Self, HarnessError> {
        if m == 0 || m.is_multiple_of(2) {
            return Err(HarnessError::EvenSampleCount(m));
        }
        Ok(JudgeSettings {
            m,
            model: model.into(),
            temperature: if m > 1 { JUDGE_TEMPERATURE } else { GENERATION_TEMPERATURE },
            parallelism: 1,
        })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    fn requests(&self, system: String, user: String) -> Vec<ChatRequest> {
        (0..self.m)
            .map(|i| ChatRequest::new(&self.model, system.clone(), user.clone()).with_sample(self.temperature, i))
            .collect()
    }
}

fn judgement_from_texts(
    question_id: &str,
    task: Task,
    settings: &JudgeSettings,
    texts: Vec<String>,
) -> Judgement {
    let votes: Vec<Vote> = texts.iter().map(|t| parse_verdict(t)).collect();
    let verdict = majority_vote(&votes).unwrap_or(Verdict::Indeterminate);
    Judgement {
        question_id: question_id.into(),
        task,
        judge_model: settings.model.clone(),
        responder_model: None,
        prompt_variant: None,
        votes,
        verdict,
        explanations: texts,
    }
}

fn collect_texts(
    question_id: &str,
    results: Vec<Result<crate::gateway::ChatResponse, GatewayError>>,
) -> Result<Vec<String>, HarnessError> {
    results
        .into_iter()
        .map(|r| {
            r.map(|resp| resp.text).map_err(|source| HarnessError::Gateway {
                question_id: question_id.into(),
                source,
            })
        })
        .collect()
}

fn confusion_prompt(kit: &PromptKit, doc: &Document, question_text: &str) -> Result<(String, String), HarnessError> {
    Ok(kit.render(
        TemplateId::OosJudgement,
        &bindings([("document", doc.text.as_str()), ("question", question_text)]),
    )?)
}

fn defusion_prompt(
    kit: &PromptKit,
    doc: &Document,
    question: &QuestionRecord,
    response: &ResponseRecord,
) -> Result<(String, String), HarnessError> {
    if question.scope != Scope::Out {
        return Err(HarnessError::PreconditionViolation(format!(
            "defusion judgement requires an out-of-scope question, {} is in-scope",
            question.question_id
        )));
    }
    let (_, instruction) = kit.render(TemplateId::DefusionInstruction, &Default::default())?;
    Ok(kit.render_with_exemplar(
        TemplateId::DefusionJudgement,
        &bindings([
            ("defusion_instruction", instruction.as_str()),
            ("document", doc.text.as_str()),
            ("question", question.text.as_str()),
            ("LLM_response", response.response_text.as_str()),
        ]),
    )?)
}

fn respond_request(
    kit: &PromptKit,
    doc: &Document,
    question: &QuestionRecord,
    variant: PromptVariant,
    responder_model: &str,
) -> Result<ChatRequest, HarnessError> {
    let b = bindings([("document", doc.text.as_str()), ("question", question.text.as_str())]);
    let (system, user) = match variant {
        PromptVariant::TwoShot => kit.render_with_exemplar(variant.template(), &b)?,
        _ => kit.render(variant.template(), &b)?,
    };
    Ok(ChatRequest::new(responder_model, system, user))
}

/// Answers `question` over `doc` with one RAG prompt variant.
pub fn respond<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    doc: &Document,
    question: &QuestionRecord,
    variant: PromptVariant,
    responder_model: &str,
    gateway: &G,
) -> Result<ResponseRecord, HarnessError> {
    let request = respond_request(kit, doc, question, variant, responder_model)?;
    let response = gateway.complete(&request).map_err(|source| HarnessError::Gateway {
        question_id: question.question_id.clone(),
        source,
    })?;
    Ok(ResponseRecord {
        question_id: question.question_id.clone(),
        responder_model: responder_model.into(),
        prompt_variant: variant,
        response_text: response.text,
    })
}

/// m-sample judgement of whether `question_text` mentions entities absent
/// from `doc`. `Yes` means the question is out of scope.
pub fn judge_confusion<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    doc: &Document,
    question_id: &str,
    question_text: &str,
    settings: &JudgeSettings,
    gateway: &G,
) -> Result<Judgement, HarnessError> {
    let (system, user) = confusion_prompt(kit, doc, question_text)?;
    let results = gateway.complete_batch(&settings.requests(system, user), settings.parallelism);
    let texts = collect_texts(question_id, results)?;
    Ok(judgement_from_texts(question_id, Task::Confusion, settings, texts))
}

/// m-sample judgement of whether `response` defused an out-of-scope
/// question. `Yes` means it did.
pub fn judge_defusion<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    doc: &Document,
    question: &QuestionRecord,
    response: &ResponseRecord,
    settings: &JudgeSettings,
    gateway: &G,
) -> Result<Judgement, HarnessError> {
    let (system, user) = defusion_prompt(kit, doc, question, response)?;
    let results = gateway.complete_batch(&settings.requests(system, user), settings.parallelism);
    let texts = collect_texts(&question.question_id, results)?;
    let mut j = judgement_from_texts(&question.question_id, Task::Defusion, settings, texts);
    j.responder_model = Some(response.responder_model.clone());
    j.prompt_variant = Some(response.prompt_variant);
    Ok(j)
}

/// Documents keyed by id plus the question set that refers to them.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub documents: BTreeMap<String, Document>,
    pub questions: Vec<QuestionRecord>,
}

impl Dataset {
    pub fn new(documents: Vec<Document>, questions: Vec<QuestionRecord>) -> Result<Self, HarnessError> {
        let documents: BTreeMap<String, Document> =
            documents.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
        if let Some(q) = questions.iter().find(|q| !documents.contains_key(&q.doc_id)) {
            return Err(HarnessError::PreconditionViolation(format!(
                "question {} refers to unknown document {}",
                q.question_id, q.doc_id
            )));
        }
        Ok(Dataset { documents, questions })
    }

    pub fn document_of(&self, question: &QuestionRecord) -> &Document {
        &self.documents[&question.doc_id]
    }

    /// The run's topic set, in ascending order.
    pub fn topics(&self) -> Vec<String> {
        self.documents
            .values()
            .map(|d| d.topic.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Generates responses for many questions with a single gateway batch.
/// Failures are returned positionally.
pub fn respond_all<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    dataset: &Dataset,
    questions: &[&QuestionRecord],
    variant: PromptVariant,
    responder_model: &str,
    gateway: &G,
    parallelism: usize,
) -> Result<Vec<Result<ResponseRecord, HarnessError>>, HarnessError> {
    let requests = questions
        .iter()
        .map(|q| respond_request(kit, dataset.document_of(q), q, variant, responder_model))
        .collect::<Result<Vec<_>, _>>()?;
    let results = gateway.complete_batch(&requests, parallelism);
    Ok(questions
        .iter()
        .zip(results)
        .map(|(q, r)| {
            r.map(|resp| ResponseRecord {
                question_id: q.question_id.clone(),
                responder_model: responder_model.into(),
                prompt_variant: variant,
                response_text: resp.text,
            })
            .map_err(|source| HarnessError::Gateway { question_id: q.question_id.clone(), source })
        })
        .collect())
}

fn judge_all<G: ChatGateway + ?Sized>(
    prompts: Vec<(String, (String, String))>,
    task: Task,
    settings: &JudgeSettings,
    gateway: &G,
) -> Vec<Result<Judgement, HarnessError>> {
    let m = settings.m as usize;
    let mut requests = Vec::with_capacity(prompts.len() * m);
    for (_, (system, user)) in &prompts {
        requests.extend(settings.requests(system.clone(), user.clone()));
    }
    let mut results = gateway.complete_batch(&requests, settings.parallelism).into_iter();
    prompts
        .into_iter()
        .map(|(qid, _)| {
            let chunk: Vec<_> = results.by_ref().take(m).collect();
            collect_texts(&qid, chunk).map(|texts| judgement_from_texts(&qid, task, settings, texts))
        })
        .collect()
}

/// Confusion judgements for many questions in one gateway batch.
pub fn judge_confusion_all<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    dataset: &Dataset,
    questions: &[&QuestionRecord],
    settings: &JudgeSettings,
    gateway: &G,
) -> Result<Vec<Result<Judgement, HarnessError>>, HarnessError> {
    let prompts = questions
        .iter()
        .map(|q| Ok((q.question_id.clone(), confusion_prompt(kit, dataset.document_of(q), &q.text)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(judge_all(prompts, Task::Confusion, settings, gateway))
}

/// Defusion judgements for many responses in one gateway batch.
pub fn judge_defusion_all<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    dataset: &Dataset,
    pairs: &[(&QuestionRecord, &ResponseRecord)],
    settings: &JudgeSettings,
    gateway: &G,
) -> Result<Vec<Result<Judgement, HarnessError>>, HarnessError> {
    let prompts = pairs
        .iter()
        .map(|(q, r)| Ok((q.question_id.clone(), defusion_prompt(kit, dataset.document_of(q), q, r)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut out = judge_all(prompts, Task::Defusion, settings, gateway);
    for (j, (_, r)) in out.iter_mut().zip(pairs) {
        if let Ok(j) = j {
            j.responder_model = Some(r.responder_model.clone());
            j.prompt_variant = Some(r.prompt_variant);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCell {
    pub topic: String,
    /// Judgements that completed.
    pub evaluated: usize,
    pub defused: usize,
    /// Questions whose response or judgement failed.
    pub failed: usize,
    /// Defusion accuracy in percent over completed judgements.
    pub percent: Option<f64>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub evaluated: usize,
    pub correct: usize,
    pub failed: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub prompt_variant: PromptVariant,
    pub model: String,
    pub cells: Vec<TopicCell>,
    pub avg: Option<f64>,
    pub std_dev: Option<f64>,
    pub std_dev_defined: bool,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub topics: Vec<String>,
    pub rows: Vec<BenchmarkRow>,
    /// Always "sample": the (n-1) denominator.
    pub std_dev_kind: String,
    pub indeterminate_counts_as_failure: bool,
}

/// Everything produced by one benchmark run.
#[derive(Debug, Clone, Default)]
pub struct BenchmarkRun {
    pub responses: Vec<ResponseRecord>,
    pub defusion: Vec<Judgement>,
    pub confusion: Vec<Judgement>,
    pub failures: Vec<HarnessError>,
}

/// Builds one report row from defusion outcomes. `outcomes` holds
/// `(topic, Some(defused))` for completed judgements and `(topic, None)` for
/// failures.
pub fn benchmark_row(
    topics: &[String],
    variant: PromptVariant,
    model: &str,
    outcomes: &[(String, Option<bool>)],
    detection: Option<DetectionSummary>,
) -> BenchmarkRow {
    let mut cells: Vec<TopicCell> = topics
        .iter()
        .map(|t| TopicCell {
            topic: t.clone(),
            evaluated: 0,
            defused: 0,
            failed: 0,
            percent: None,
            complete: false,
        })
        .collect();
    let mut completed: Vec<(&str, bool)> = Vec::new();
    for (topic, outcome) in outcomes {
        let Some(cell) = cells.iter_mut().find(|c| &c.topic == topic) else {
            continue;
        };
        match outcome {
            Some(defused) => {
                cell.evaluated += 1;
                cell.defused += usize::from(*defused);
                completed.push((topic.as_str(), *defused));
            }
            None => cell.failed += 1,
        }
    }
    let summary: Option<PerTopicReport> = metrics::per_topic_report(&completed).ok();
    for cell in &mut cells {
        cell.complete = cell.evaluated > 0 && cell.failed == 0;
        cell.percent = summary
            .as_ref()
            .and_then(|s| s.topics.iter().find(|t| t.topic == cell.topic))
            .map(|t| t.percent);
    }
    let complete = cells.iter().all(|c| c.complete);
    BenchmarkRow {
        prompt_variant: variant,
        model: model.into(),
        avg: summary.as_ref().map(|s| s.avg),
        std_dev: summary.as_ref().map(|s| s.std_dev),
        std_dev_defined: summary.as_ref().is_some_and(|s| s.std_dev_defined),
        cells,
        complete,
        detection,
    }
}

/// Indeterminate defusion verdicts count as not defused.
pub fn defused(verdict: Verdict) -> bool {
    verdict == Verdict::Yes
}

/// A confusion verdict is correct when it says `Yes` exactly for
/// out-of-scope questions; `Indeterminate` is always wrong.
pub fn detection_correct(verdict: Verdict, scope: Scope) -> bool {
    matches!((verdict, scope), (Verdict::Yes, Scope::Out) | (Verdict::No, Scope::In))
}

/// Runs respond, defusion judgement and confusion judgement for every
/// responder model and assembles the per-topic report.
///
/// Confusion detection is judged by the responder model itself; defusion by
/// `judge.model`.
pub fn run_benchmark<G: ChatGateway + ?Sized>(
    kit: &PromptKit,
    dataset: &Dataset,
    responder_models: &[String],
    variant: PromptVariant,
    judge: &JudgeSettings,
    gateway: &G,
) -> Result<(BenchmarkReport, BenchmarkRun), HarnessError> {
    let topics = dataset.topics();
    let out_of_scope: Vec<&QuestionRecord> =
        dataset.questions.iter().filter(|q| q.scope == Scope::Out).collect();
    let all: Vec<&QuestionRecord> = dataset.questions.iter().collect();
    let mut run = BenchmarkRun::default();
    let mut rows = Vec::new();

    for model in responder_models {
        let responses = respond_all(kit, dataset, &out_of_scope, variant, model, gateway, judge.parallelism)?;
        let mut outcomes: Vec<(String, Option<bool>)> = Vec::new();
        let mut pairs = Vec::new();
        let mut answered = Vec::new();
        for (q, r) in out_of_scope.iter().zip(responses) {
            match r {
                Ok(r) => answered.push((*q, r)),
                Err(e) => {
                    outcomes.push((dataset.document_of(q).topic.clone(), None));
                    run.failures.push(e);
                }
            }
        }
        for (q, r) in &answered {
            pairs.push((*q, r));
        }
        let judgements = judge_defusion_all(kit, dataset, &pairs, judge, gateway)?;
        for ((q, r), j) in pairs.iter().zip(judgements) {
            let topic = dataset.document_of(q).topic.clone();
            match j {
                Ok(j) => {
                    outcomes.push((topic, Some(defused(j.verdict))));
                    run.defusion.push(j);
                }
                Err(e) => {
                    outcomes.push((topic, None));
                    run.failures.push(e);
                }
            }
            run.responses.push((*r).clone());
        }

        let mut detector = judge.clone();
        detector.model = model.clone();
        let confusion = judge_confusion_all(kit, dataset, &all, &detector, gateway)?;
        let mut detection = DetectionSummary { evaluated: 0, correct: 0, failed: 0, accuracy: None };
        for (q, j) in all.iter().zip(confusion) {
            match j {
                Ok(j) => {
                    detection.evaluated += 1;
                    detection.correct += usize::from(detection_correct(j.verdict, q.scope));
                    run.confusion.push(j);
                }
                Err(e) => {
                    detection.failed += 1;
                    run.failures.push(e);
                }
            }
        }
        if detection.evaluated > 0 {
            detection.accuracy = Some(detection.correct as f64 / detection.evaluated as f64);
        }
        rows.push(benchmark_row(&topics, variant, model, &outcomes, Some(detection)));
    }

    Ok((
        BenchmarkReport {
            topics,
            rows,
            std_dev_kind: "sample".into(),
            indeterminate_counts_as_failure: true,
        },
        run,
    ))
}
