//! Guided hallucination: claim extraction, partitioned mask-and-recover
//! rounds, supported-claim removal, out-of-scope question generation and
//! answerability filtering, plus in-scope question generation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::gateway::{ChatGateway, ChatRequest, GatewayError, GENERATION_TEMPERATURE};
use crate::harness::{self, HarnessError, JudgeSettings, Judgement, Verdict};
use crate::prompt::{bindings, parse_numbered_list, PromptError, PromptKit, TemplateId};
use crate::text::{collapse_whitespace, numbered_list, word_count};

/// Text that stands in for a masked claim.
pub const MISSING: &str = "(missing)";
/// Inclusive word band requested for generated questions.
pub const QUESTION_WORDS: (usize, usize) = (13, 18);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    Original,
    Hallucinated,
    RemovedSupported,
    RemovedAnswerable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub doc_id: String,
    /// 1-based position in the extracted claim list.
    pub index: u32,
    pub text: String,
    pub kind: ClaimKind,
    /// 0 for originals, otherwise the round of the last rewrite.
    pub round_born: u32,
}

/// Disjoint subsets `S_j = { i : i mod k = j - 1 }` of `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub n: usize,
    pub k: usize,
    /// Members of every subset, subset by subset, each ascending.
    members: Vec<usize>,
    /// `starts[j]..starts[j + 1]` is subset `j` in `members`.
    starts: Vec<usize>,
}

impl Partition {
    pub fn subset(&self, j: usize) -> &[usize] {
        &self.members[self.starts[j]..self.starts[j + 1]]
    }

    pub fn subsets(&self) -> impl ExactSizeIterator<Item = &[usize]> + '_ {
        (0..self.k).map(|j| self.subset(j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub doc_id: String,
    pub text: String,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_claim_index: Option<u32>,
    pub word_count: usize,
    pub length_ok: bool,
}

impl QuestionRecord {
    pub fn new(question_id: String, doc_id: &str, text: String, scope: Scope, source: Option<u32>) -> Self {
        let word_count = word_count(&text);
        QuestionRecord {
            question_id,
            doc_id: doc_id.into(),
            text,
            scope,
            source_claim_index: source,
            word_count,
            length_ok: (QUESTION_WORDS.0..=QUESTION_WORDS.1).contains(&word_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub num_fact: usize,
    pub k: usize,
    pub rounds: usize,
    pub num_q_inscope: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig { num_fact: 9, k: 3, rounds: 3, num_q_inscope: 5 }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.num_fact == 0 || self.k == 0 || self.rounds == 0 || self.num_q_inscope == 0 {
            return Err(ForgeError::InvalidConfig("all forge parameters must be positive".into()));
        }
        if self.num_fact < self.k {
            return Err(ForgeError::InvalidConfig(format!(
                "num_fact ({}) must be at least k ({})",
                self.num_fact, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ForgeError {
    #[error("invalid partition: k={k} for n={n}")]
    InvalidPartition { n: usize, k: usize },
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error("document {doc_id} skipped: {reason}")]
    DocumentSkipped { doc_id: String, reason: String },
    #[error("gateway error during {stage} for {doc_id}: {source}")]
    Gateway { stage: &'static str, doc_id: String, source: GatewayError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

/// Non-fatal conditions met while forging one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum ForgeWarning {
    ExtractionShortfall { requested: usize, parsed: usize },
    ExtractionRenumbered { stated: Vec<u32> },
    PartitionClamped { n: usize, k: usize },
    RecoveryMissing { round: usize, index: usize },
    ShortRecovery { round: usize, returned: usize, expected: usize },
    FilterIndexOutsideCandidates { index: u32 },
    QuestionOutOfRange { number: u32 },
    DuplicateQuestionNumber { number: u32 },
    AnswerabilityIndeterminate { question_id: String },
    InscopeShortfall { requested: usize, parsed: usize },
    IgnoredLines { stage: String, count: usize },
}

impl fmt::Display for ForgeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForgeWarning::ExtractionShortfall { requested, parsed } => {
                write!(f, "extraction returned {parsed} of {requested} claims")
            }
            ForgeWarning::ExtractionRenumbered { stated } => {
                write!(f, "extracted claims renumbered by position (stated numbers {stated:?})")
            }
            ForgeWarning::PartitionClamped { n, k } => {
                write!(f, "only {n} claims for k={k}; partition uses k={n}")
            }
            ForgeWarning::RecoveryMissing { round, index } => {
                write!(f, "round {round}: claim {index} was not recovered")
            }
            ForgeWarning::ShortRecovery { round, returned, expected } => {
                write!(f, "round {round}: recovery returned {returned} of {expected} claims")
            }
            ForgeWarning::FilterIndexOutsideCandidates { index } => {
                write!(f, "supported-claim filter returned non-candidate index {index}")
            }
            ForgeWarning::QuestionOutOfRange { number } => {
                write!(f, "question number {number} has no matching hallucinated claim")
            }
            ForgeWarning::DuplicateQuestionNumber { number } => {
                write!(f, "question number {number} appears more than once")
            }
            ForgeWarning::AnswerabilityIndeterminate { question_id } => {
                write!(f, "answerability vote for {question_id} was indeterminate; question removed")
            }
            ForgeWarning::InscopeShortfall { requested, parsed } => {
                write!(f, "in-scope generation returned {parsed} of {requested} questions")
            }
            ForgeWarning::IgnoredLines { stage, count } => {
                write!(f, "{stage}: ignored {count} unnumbered line(s)")
            }
        }
    }
}

/// Splits `1..=n` by residue modulo `k`.
pub fn partition_claims(n: usize, k: usize) -> Result<Partition, ForgeError> {
    if k == 0 || k > n {
        return Err(ForgeError::InvalidPartition { n, k });
    }
    let mut members = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(k + 1);
    for r in 0..k {
        starts.push(members.len());
        let first = if r == 0 { k } else { r };
        members.extend((first..=n).step_by(k));
    }
    starts.push(n);
    Ok(Partition { n, k, members, starts })
}

fn same_claim(a: &str, b: &str) -> bool {
    collapse_whitespace(a) == collapse_whitespace(b)
}

/// Outcome of one mask-and-recover call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub claims: Vec<String>,
    /// Masked positions the model did not return; they keep [`MISSING`].
    pub unrecovered: Vec<usize>,
    pub short_recovery: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HallucinationOutcome {
    pub originals: Vec<Claim>,
    /// Final text per position after every round.
    pub working: Vec<String>,
    pub candidates: Vec<Claim>,
    pub recovery_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportFilterOutcome {
    pub survivors: Vec<Claim>,
    pub removed: Vec<Claim>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerabilityOutcome {
    pub kept: Vec<QuestionRecord>,
    pub removed: Vec<QuestionRecord>,
    pub judgements: Vec<Judgement>,
}

/// Everything produced for one document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ForgeOutput {
    pub claims: Vec<Claim>,
    pub questions: Vec<QuestionRecord>,
    pub judgements: Vec<Judgement>,
    pub warnings: Vec<ForgeWarning>,
}

/// Runs the generation steps against a gateway.
///
/// Every call to the generator uses `generator_model` at `temperature`; the
/// answerability filter uses `judge`, whose model is normally the generator
/// as well.
pub struct Forge<'a, G: ?Sized> {
    pub kit: &'a PromptKit,
    pub gateway: &'a G,
    pub generator_model: String,
    /// Sampling temperature of every generator call.
    pub temperature: f64,
    pub judge: JudgeSettings,
    pub config: ForgeConfig,
    warnings: Vec<ForgeWarning>,
}

impl<'a, G: ChatGateway + ?Sized> Forge<'a, G> {
    pub fn new(
        kit: &'a PromptKit,
        gateway: &'a G,
        generator_model: &str,
        judge: JudgeSettings,
        config: ForgeConfig,
    ) -> Result<Self, ForgeError> {
        config.validate()?;
        Ok(Forge {
            kit,
            gateway,
            generator_model: generator_model.into(),
            temperature: GENERATION_TEMPERATURE,
            judge,
            config,
            warnings: Vec::new(),
        })
    }

    /// Warnings collected since the last call to this method.
    pub fn take_warnings(&mut self) -> Vec<ForgeWarning> {
        core::mem::take(&mut self.warnings)
    }

    fn call(&self, stage: &'static str, doc_id: &str, system: String, user: String) -> Result<String, ForgeError> {
        let request = ChatRequest::new(&self.generator_model, system, user).with_sample(self.temperature, 0);
        self.gateway
            .complete(&request)
            .map(|r| r.text)
            .map_err(|source| ForgeError::Gateway { stage, doc_id: doc_id.into(), source })
    }

    fn note_ignored(&mut self, stage: &str, count: usize) {
        if count > 0 {
            self.warnings.push(ForgeWarning::IgnoredLines { stage: stage.into(), count });
        }
    }

    pub fn extract_claims(&mut self, doc: &Document, num_fact: usize) -> Result<Vec<Claim>, ForgeError> {
        let (system, user) = self.kit.render(
            TemplateId::ExtractClaims,
            &bindings([("num_fact", num_fact.to_string()), ("document", doc.text.clone())]),
        )?;
        let response = self.call("extract_claims", &doc.doc_id, system, user)?;
        let parsed = parse_numbered_list(&response);
        self.note_ignored("extract_claims", parsed.ignored_lines);
        if parsed.items.is_empty() {
            return Err(ForgeError::DocumentSkipped {
                doc_id: doc.doc_id.clone(),
                reason: "claim extraction returned no numbered facts".into(),
            });
        }
        if parsed.items.len() < num_fact {
            self.warnings.push(ForgeWarning::ExtractionShortfall {
                requested: num_fact,
                parsed: parsed.items.len(),
            });
        }
        let stated: Vec<u32> = parsed.items.iter().map(|(n, _)| *n).collect();
        if stated.iter().enumerate().any(|(pos, n)| *n as usize != pos + 1) {
            self.warnings.push(ForgeWarning::ExtractionRenumbered { stated });
        }
        Ok(parsed
            .items
            .into_iter()
            .enumerate()
            .map(|(pos, (_, text))| Claim {
                doc_id: doc.doc_id.clone(),
                index: pos as u32 + 1,
                text,
                kind: ClaimKind::Original,
                round_born: 0,
            })
            .collect())
    }

    /// Masks `subset` (1-based positions) and asks the generator to fill the
    /// gaps from the remaining claims alone; the document is not sent.
    pub fn hallucinate_round(
        &mut self,
        doc_id: &str,
        claims: &[String],
        subset: &[usize],
        round: usize,
    ) -> Result<RoundOutcome, ForgeError> {
        let n = claims.len();
        if let Some(bad) = subset.iter().find(|&&i| i == 0 || i > n) {
            return Err(ForgeError::PreconditionViolation(format!("mask index {bad} outside 1..={n}")));
        }
        if subset.is_empty() {
            return Ok(RoundOutcome { claims: claims.to_vec(), unrecovered: Vec::new(), short_recovery: false });
        }
        let masked: BTreeSet<usize> = subset.iter().copied().collect();
        let list = numbered_list(claims.iter().enumerate().map(|(pos, text)| {
            let i = pos + 1;
            (i, if masked.contains(&i) { MISSING } else { text.as_str() })
        }));
        let (system, user) = self.kit.render(
            TemplateId::RecoverMissing,
            &bindings([("num_fact", n.to_string()), ("document", list)]),
        )?;
        let response = self.call("recover_missing", doc_id, system, user)?;
        let parsed = parse_numbered_list(&response);
        self.note_ignored("recover_missing", parsed.ignored_lines);

        let mut recovered: BTreeMap<usize, String> = BTreeMap::new();
        for (number, text) in &parsed.items {
            recovered.entry(*number as usize).or_insert_with(|| text.clone());
        }
        let short_recovery = parsed.items.len() < n;
        if short_recovery {
            self.warnings.push(ForgeWarning::ShortRecovery { round, returned: parsed.items.len(), expected: n });
        }
        let mut out = claims.to_vec();
        let mut unrecovered = Vec::new();
        for &i in &masked {
            match recovered.get(&i) {
                Some(text) => out[i - 1] = text.clone(),
                None => {
                    out[i - 1] = MISSING.into();
                    unrecovered.push(i);
                    self.warnings.push(ForgeWarning::RecoveryMissing { round, index: i });
                }
            }
        }
        Ok(RoundOutcome { claims: out, unrecovered, short_recovery })
    }

    /// Runs `rounds x k` recovery calls, round-major and subset-ascending,
    /// over a cumulative working list seeded with `originals`.
    pub fn hallucinate(&mut self, doc_id: &str, originals: &[Claim]) -> Result<HallucinationOutcome, ForgeError> {
        let n = originals.len();
        let mut k = self.config.k;
        if k > n {
            self.warnings.push(ForgeWarning::PartitionClamped { n, k });
            k = n;
        }
        let partition = partition_claims(n, k)?;
        let mut working: Vec<String> = originals.iter().map(|c| c.text.clone()).collect();
        let mut born = alloc::vec![0u32; n];
        let mut calls = 0usize;
        for round in 1..=self.config.rounds {
            for subset in partition.subsets() {
                let outcome = self.hallucinate_round(doc_id, &working, subset, round)?;
                calls += usize::from(!subset.is_empty());
                for &i in subset {
                    if !same_claim(&outcome.claims[i - 1], &working[i - 1]) {
                        born[i - 1] = round as u32;
                    }
                }
                working = outcome.claims;
            }
        }
        let candidates = originals
            .iter()
            .zip(&working)
            .zip(&born)
            .filter(|((orig, now), _)| now.as_str() != MISSING && !same_claim(&orig.text, now))
            .map(|((orig, now), &round)| Claim {
                doc_id: doc_id.into(),
                index: orig.index,
                text: now.clone(),
                kind: ClaimKind::Hallucinated,
                round_born: round.max(1),
            })
            .collect();
        Ok(HallucinationOutcome { originals: originals.to_vec(), working, candidates, recovery_calls: calls })
    }

    /// Extraction followed by the mask-and-recover rounds.
    pub fn run_guided_hallucination(&mut self, doc: &Document) -> Result<HallucinationOutcome, ForgeError> {
        let originals = self.extract_claims(doc, self.config.num_fact)?;
        self.hallucinate(&doc.doc_id, &originals)
    }

    /// Keeps the candidates the generator reports as unsupported by the
    /// document and the original claims.
    pub fn filter_supported_claims(
        &mut self,
        doc: &Document,
        originals: &[Claim],
        candidates: &[Claim],
    ) -> Result<SupportFilterOutcome, ForgeError> {
        if candidates.is_empty() {
            return Ok(SupportFilterOutcome { survivors: Vec::new(), removed: Vec::new() });
        }
        let true_facts = numbered_list(originals.iter().map(|c| (c.index as usize, c.text.as_str())));
        let false_facts = numbered_list(candidates.iter().map(|c| (c.index as usize, c.text.as_str())));
        let (system, user) = self.kit.render_with_exemplar(
            TemplateId::RemoveClaims,
            &bindings([
                ("num_true_fact", originals.len().to_string()),
                ("num_false_fact", candidates.len().to_string()),
                ("document", doc.text.clone()),
                ("true_facts", true_facts),
                ("hallucinated_facts", false_facts),
            ]),
        )?;
        let response = self.call("remove_claims", &doc.doc_id, system, user)?;
        let parsed = parse_numbered_list(&response);
        self.note_ignored("remove_claims", parsed.ignored_lines);

        let candidate_ids: BTreeSet<u32> = candidates.iter().map(|c| c.index).collect();
        let mut kept = BTreeSet::new();
        for (number, _) in &parsed.items {
            if candidate_ids.contains(number) {
                kept.insert(*number);
            } else {
                self.warnings.push(ForgeWarning::FilterIndexOutsideCandidates { index: *number });
            }
        }
        let (survivors, mut removed): (Vec<Claim>, Vec<Claim>) =
            candidates.iter().cloned().partition(|c| kept.contains(&c.index));
        for c in &mut removed {
            c.kind = ClaimKind::RemovedSupported;
        }
        Ok(SupportFilterOutcome { survivors, removed })
    }

    /// One question per surviving claim, linked by list position.
    pub fn generate_oos_questions(
        &mut self,
        doc: &Document,
        survivors: &[Claim],
    ) -> Result<Vec<QuestionRecord>, ForgeError> {
        if survivors.is_empty() {
            return Err(ForgeError::PreconditionViolation("no surviving claims".into()));
        }
        let facts = numbered_list(survivors.iter().enumerate().map(|(pos, c)| (pos + 1, c.text.as_str())));
        let (system, user) = self.kit.render(
            TemplateId::OosGen,
            &bindings([("document", doc.text.clone()), ("hallucinated_facts", facts)]),
        )?;
        let response = self.call("oos_gen", &doc.doc_id, system, user)?;
        let parsed = parse_numbered_list(&response);
        self.note_ignored("oos_gen", parsed.ignored_lines);

        let mut used = BTreeSet::new();
        let mut questions = Vec::new();
        for (number, text) in parsed.items {
            let pos = number as usize;
            if pos == 0 || pos > survivors.len() {
                self.warnings.push(ForgeWarning::QuestionOutOfRange { number });
                continue;
            }
            if !used.insert(pos) {
                self.warnings.push(ForgeWarning::DuplicateQuestionNumber { number });
                continue;
            }
            let claim = &survivors[pos - 1];
            questions.push(QuestionRecord::new(
                format!("{}-out-{}", doc.doc_id, claim.index),
                &doc.doc_id,
                text,
                Scope::Out,
                Some(claim.index),
            ));
        }
        Ok(questions)
    }

    /// Drops questions the judge does not find confusing. Ties and
    /// all-unparseable votes also drop the question.
    pub fn filter_answerable(
        &mut self,
        doc: &Document,
        questions: &[QuestionRecord],
    ) -> Result<AnswerabilityOutcome, ForgeError> {
        if let Some(q) = questions.iter().find(|q| q.scope != Scope::Out) {
            return Err(ForgeError::PreconditionViolation(format!(
                "answerability filter received in-scope question {}",
                q.question_id
            )));
        }
        let mut out = AnswerabilityOutcome { kept: Vec::new(), removed: Vec::new(), judgements: Vec::new() };
        for q in questions {
            let j = harness::judge_confusion(self.kit, doc, &q.question_id, &q.text, &self.judge, self.gateway)?;
            match j.verdict {
                Verdict::Yes => out.kept.push(q.clone()),
                Verdict::No => out.removed.push(q.clone()),
                Verdict::Indeterminate => {
                    self.warnings.push(ForgeWarning::AnswerabilityIndeterminate {
                        question_id: q.question_id.clone(),
                    });
                    out.removed.push(q.clone());
                }
            }
            out.judgements.push(j);
        }
        Ok(out)
    }

    pub fn generate_inscope_questions(
        &mut self,
        doc: &Document,
        num_q: usize,
    ) -> Result<Vec<QuestionRecord>, ForgeError> {
        let (system, user) = self.kit.render(
            TemplateId::InscopeGen,
            &bindings([("num_q", num_q.to_string()), ("document", doc.text.clone())]),
        )?;
        let response = self.call("inscope_gen", &doc.doc_id, system, user)?;
        let parsed = parse_numbered_list(&response);
        self.note_ignored("inscope_gen", parsed.ignored_lines);
        if parsed.items.len() < num_q {
            self.warnings.push(ForgeWarning::InscopeShortfall { requested: num_q, parsed: parsed.items.len() });
        }
        Ok(parsed
            .items
            .into_iter()
            .enumerate()
            .map(|(pos, (_, text))| {
                QuestionRecord::new(format!("{}-in-{}", doc.doc_id, pos + 1), &doc.doc_id, text, Scope::In, None)
            })
            .collect())
    }

    /// The whole generation pipeline for one document.
    pub fn forge_document(&mut self, doc: &Document) -> Result<ForgeOutput, ForgeError> {
        let hallucination = self.run_guided_hallucination(doc)?;
        let filtered = self.filter_supported_claims(doc, &hallucination.originals, &hallucination.candidates)?;

        let mut answerability =
            AnswerabilityOutcome { kept: Vec::new(), removed: Vec::new(), judgements: Vec::new() };
        if !filtered.survivors.is_empty() {
            let questions = self.generate_oos_questions(doc, &filtered.survivors)?;
            answerability = self.filter_answerable(doc, &questions)?;
        }
        let inscope = self.generate_inscope_questions(doc, self.config.num_q_inscope)?;

        let removed_answerable: BTreeSet<u32> =
            answerability.removed.iter().filter_map(|q| q.source_claim_index).collect();
        let mut hallucinated: Vec<Claim> = filtered
            .survivors
            .into_iter()
            .map(|mut c| {
                if removed_answerable.contains(&c.index) {
                    c.kind = ClaimKind::RemovedAnswerable;
                }
                c
            })
            .chain(filtered.removed)
            .collect();
        hallucinated.sort_by_key(|c| c.index);

        let mut claims = hallucination.originals;
        claims.extend(hallucinated);
        let mut questions = answerability.kept;
        questions.extend(inscope);
        Ok(ForgeOutput {
            claims,
            questions,
            judgements: answerability.judgements,
            warnings: self.take_warnings(),
        })
    }
}
