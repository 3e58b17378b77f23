//! Subcommands. Each stage reads its inputs from the output directory,
//! writes NDJSON or table files back into it and records digests in the
//! run manifest so an unchanged stage is skipped on the next invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand};
use oosq_core::forge::{Claim, Forge, ForgeError, ForgeOutput, ForgeWarning, Scope};
use oosq_core::harness::{
    self, benchmark_row, BenchmarkReport, Dataset, HarnessError, Judgement, PromptVariant, ResponseRecord,
};
use oosq_core::metrics::{self, LabelRecord};
use oosq_core::probe::{self, FeatureRecord, ProbeModel, Split};
use oosq_core::prompt::{Exemplar, PromptKit, PromptTemplate, TemplateId};
use oosq_core::retrieval::{self, ProvenancedQuery, RetrievalReport, TokenizerOptions};
use oosq_core::{Document, GatewayError, QuestionRecord};
use serde::{Deserialize, Serialize};

use crate::config::{BackendChoice, Overrides, RunConfig};
use crate::datastore::{file_digest, read_records, write_atomic, write_records, OutputFile, Resume, RunManifest, Schema, StageRecord, Violation};
use crate::error::{AppError, Result};
use crate::gateway::{Backend, Gateway, HttpBackend, MockBackend, ResponseCache, RetryPolicy};
use crate::ingest::ingest_documents;
use crate::report;
use crate::vectors::{nli_features, read_vectors, to_dense, to_features};

#[derive(Debug, Parser)]
#[command(name = "oosq", version, about = "Generate and evaluate out-of-scope questions over a document corpus")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Maximum concurrent backend calls.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Seed for data splits and probe training
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// RAG prompt variant: basic, two-shot or zero-shot-cot.
    #[arg(long, global = true)]
    pub variant: Option<PromptVariant>,
    /// Judge samples per question (odd).
    #[arg(long, global = true)]
    pub m: Option<u32>,
    /// Print what would run; make no backend calls and write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Rerun even if the manifest says the stage is up to date.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and truncate raw documents into documents.jsonl.
    Ingest {
        /// Raw documents file; defaults to paths.corpus.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Topic for records that carry none.
        #[arg(long)]
        topic: Option<String>,
    },
    /// Forge claims and in/out-of-scope questions for every document.
    Generate,
    /// Answer out-of-scope questions with each responder model.
    Respond,
    /// Judge whether each question is out of scope.
    JudgeConfusion,
    /// Judge whether each response defused its question.
    JudgeDefusion,
    /// Respond, judge and tabulate in one pass.
    Benchmark,
    /// Train the MLP probe on labelled vectors.
    TrainProbe,
    /// Evaluate the trained probe on held-out vectors.
    EvalProbe,
    /// Source-document retrieval with BM25 and, if vectors exist, dense ranking.
    EvalRetrieval,
    /// Inter-annotator agreement over the labels file.
    Agree,
    /// Per-topic defusion table from stored judgements.
    Report,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Generate => "generate",
            Command::Respond => "respond",
            Command::JudgeConfusion => "judge-confusion",
            Command::JudgeDefusion => "judge-defusion",
            Command::Benchmark => "benchmark",
            Command::TrainProbe => "train-probe",
            Command::EvalProbe => "eval-probe",
            Command::EvalRetrieval => "eval-retrieval",
            Command::Agree => "agree",
            Command::Report => "report",
        }
    }
}

pub const DOCUMENTS: &str = "documents.jsonl";
pub const CLAIMS: &str = "claims.jsonl";
pub const QUESTIONS: &str = "questions.jsonl";
pub const FORGE_JUDGEMENTS: &str = "forge_judgements.jsonl";
pub const FORGE_WARNINGS: &str = "forge_warnings.jsonl";
pub const CONFUSION: &str = "confusion_judgements.jsonl";
pub const PROBE_MODEL: &str = "probe_model.jsonl";
pub const PROBE_LOG: &str = "probe_log.jsonl";
pub const MANIFEST: &str = "manifest.jsonl";

pub fn responses_file(v: PromptVariant) -> String {
    format!("responses-{v}.jsonl")
}

pub fn defusion_file(v: PromptVariant) -> String {
    format!("defusion_judgements-{v}.jsonl")
}

/// A non-fatal forge condition, or a skipped document, tagged with its
/// document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarningRecord {
    pub doc_id: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<ForgeWarning>,
}

impl Schema for WarningRecord {
    fn validate(&self) -> std::result::Result<(), Violation> {
        if self.doc_id.is_empty() {
            return Err(Violation::new("doc_id", "is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub records: usize,
    pub dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub best_epoch: usize,
    pub train_acc: f64,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub records: usize,
    pub accuracy: f64,
    pub matrix: metrics::ConfusionMatrix2x2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutput {
    pub reports: Vec<RetrievalReport>,
    /// Documents or queries whose dense vector had zero norm.
    pub zero_norm: Vec<String>,
}

fn backend_error(e: &GatewayError) -> AppError {
    match e {
        GatewayError::AuthMissing { .. } => AppError::Config(e.to_string()),
        _ => AppError::Backend(e.to_string()),
    }
}

impl From<HarnessError> for AppError {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::Gateway { source, .. } => match backend_error(source) {
                AppError::Config(_) => AppError::Config(e.to_string()),
                _ => AppError::Backend(e.to_string()),
            },
            HarnessError::EvenSampleCount(_) | HarnessError::UnknownVariant(_) => AppError::Config(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl From<ForgeError> for AppError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Gateway { ref source, .. } => match backend_error(source) {
                AppError::Config(_) => AppError::Config(e.to_string()),
                _ => AppError::Backend(e.to_string()),
            },
            ForgeError::Harness(h) => h.into(),
            ForgeError::InvalidConfig(_) => AppError::Config(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Validation(e.to_string())
}

/// Loads template overrides: `<dir>/<template_id>.txt` and
/// `<dir>/exemplars/<template_id>.txt`.
pub fn load_kit(dir: Option<&Path>) -> Result<PromptKit> {
    let mut kit = PromptKit::builtin();
    let Some(dir) = dir else { return Ok(kit) };
    if !dir.is_dir() {
        return Err(AppError::Config(format!("template directory {} does not exist", dir.display())));
    }
    for id in TemplateId::ALL {
        let path = dir.join(format!("{id}.txt"));
        if path.exists() {
            let src = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
            let t = PromptTemplate::parse(&src).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
            if t.template_id != id {
                return Err(AppError::Config(format!("{} declares template {}", path.display(), t.template_id)));
            }
            kit.set_template(t);
        }
        let path = dir.join("exemplars").join(format!("{id}.txt"));
        if path.exists() {
            let src = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
            let ex = Exemplar::parse(&src).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
            kit.set_exemplar(ex);
        }
    }
    Ok(kit)
}

/// Builds the configured gateway; `backend` replaces the configured
/// backend when given.
pub fn build_gateway(cfg: &RunConfig, backend: Option<Arc<dyn Backend>>) -> Result<Gateway> {
    let backend: Box<dyn Backend> = match (backend, cfg.backend.kind) {
        (Some(b), _) => Box::new(b),
        (None, BackendChoice::Mock) => Box::new(MockBackend::load(&cfg.paths.fixtures, cfg.backend.prefix_fallback)?),
        (None, BackendChoice::Live) => {
            Box::new(HttpBackend::new(&cfg.backend.base_url, &cfg.backend.api_key_env, cfg.timeout()))
        }
    };
    let retry = RetryPolicy {
        max_retries: cfg.backend.max_retries,
        base_delay: Duration::from_millis(cfg.backend.retry_base_ms),
    };
    Ok(Gateway::new(backend, Some(ResponseCache::new(&cfg.paths.cache_dir)), retry, cfg.parallelism))
}

struct Ctx {
    cfg: RunConfig,
    kit: PromptKit,
    out: PathBuf,
    dry_run: bool,
    force: bool,
    digest: String,
    backend: Option<Arc<dyn Backend>>,
}

impl Ctx {
    fn gateway(&self) -> Result<Gateway> {
        build_gateway(&self.cfg, self.backend.clone())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Reads an upstream output, naming the producing stage if it is absent.
    fn upstream<T: Schema>(&self, stage: &'static str, name: &str) -> Result<Vec<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Err(AppError::MissingStage { stage, path });
        }
        Ok(read_records::<T>(&path)?.records)
    }

    fn input_digests(&self, paths: &[&Path]) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
            .collect()
    }

    fn manifest(&self) -> Result<RunManifest> {
        let path = self.path(MANIFEST);
        Ok(RunManifest::load(&path)?.unwrap_or_else(|| {
            let run_id = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
            RunManifest::new(&run_id, &self.digest)
        }))
    }

    /// True when `stage` can be skipped.
    fn up_to_date(&self, stage: &str, inputs: &BTreeMap<String, String>) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        match self.manifest()?.resume(stage, &self.out, &self.digest, inputs) {
            Resume::Skip => {
                log::info!("{stage}: outputs are up to date; pass --force to rerun");
                Ok(true)
            }
            Resume::Rerun(why) => {
                log::debug!("{stage}: running ({why})");
                Ok(false)
            }
        }
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| AppError::io(&self.out, e))
    }

    fn write<T: Schema>(&self, outputs: &mut BTreeMap<String, OutputFile>, name: &str, records: &[T]) -> Result<()> {
        let digest = write_records(&self.path(name), records)?;
        outputs.insert(name.into(), OutputFile { records: records.len(), digest });
        Ok(())
    }

    fn write_json<T: Serialize>(&self, outputs: &mut BTreeMap<String, OutputFile>, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
        bytes.push(b'\n');
        let path = self.path(name);
        write_atomic(&path, &bytes)?;
        outputs.insert(name.into(), OutputFile { records: 1, digest: file_digest(&path)? });
        Ok(())
    }

    fn write_table<T: Serialize>(
        &self,
        outputs: &mut BTreeMap<String, OutputFile>,
        stem: &str,
        tsv: &str,
        value: &T,
    ) -> Result<()> {
        for name in report::write_table(&self.out, stem, tsv, value)? {
            let digest = file_digest(&self.path(&name))?;
            outputs.insert(name, OutputFile { records: 1, digest });
        }
        Ok(())
    }

    fn complete(&self, stage: &str, inputs: BTreeMap<String, String>, outputs: BTreeMap<String, OutputFile>) -> Result<()> {
        let mut manifest = self.manifest()?;
        manifest.config_digest = self.digest.clone();
        manifest.record(stage, StageRecord { outputs, inputs, config_digest: self.digest.clone() });
        manifest.save(&self.path(MANIFEST))?;
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        let docs = self.upstream::<Document>("ingest", DOCUMENTS)?;
        let questions = self.upstream::<QuestionRecord>("generate", QUESTIONS)?;
        Dataset::new(docs, questions).map_err(validation)
    }
}

fn dry(msg: impl AsRef<str>) {
    println!("dry-run: {}", msg.as_ref());
}

fn ingest(ctx: &Ctx, input: Option<PathBuf>, topic: Option<String>) -> Result<()> {
    let input = input.unwrap_or_else(|| ctx.cfg.paths.corpus.clone());
    if !input.exists() {
        return Err(AppError::io(&input, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus file not found")));
    }
    let fallback = topic.or_else(|| ctx.cfg.corpus.default_topic.clone());
    let inputs = ctx.input_digests(&[&input])?;
    if !ctx.dry_run && ctx.up_to_date("ingest", &inputs)? {
        return Ok(());
    }
    let rep = ingest_documents(&input, fallback.as_deref(), ctx.cfg.corpus.min_words, ctx.cfg.corpus.cap)?;
    for (id, words) in &rep.rejected {
        log::info!("rejected {id}: {words} words");
    }
    if ctx.dry_run {
        dry(format!("ingest would admit {} and reject {} documents", rep.admitted.len(), rep.rejected.len()));
        return Ok(());
    }
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, DOCUMENTS, &rep.admitted)?;
    println!("ingest: admitted {}, rejected {}", rep.admitted.len(), rep.rejected.len());
    ctx.complete("ingest", inputs, outputs)
}

/// Runs `f` over `items` on `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
        .collect()
}

fn generate(ctx: &Ctx) -> Result<()> {
    let docs = ctx.upstream::<Document>("ingest", DOCUMENTS)?;
    let cfg = &ctx.cfg;
    if ctx.dry_run {
        let f = &cfg.forge;
        let per_doc = 1 + f.rounds * f.k + 3;
        dry(format!(
            "generate would forge {} documents with {} (at least {} generator calls plus {} answerability samples per question)",
            docs.len(),
            cfg.models.generator,
            per_doc * docs.len(),
            cfg.judge.m
        ));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS)])?;
    if ctx.up_to_date("generate", &inputs)? {
        return Ok(());
    }
    let gw = ctx.gateway()?;
    // The answerability filter runs on the generator model.
    let judge = cfg.judge_settings(&cfg.models.generator)?;
    let results: Vec<std::result::Result<ForgeOutput, ForgeError>> = parallel_map(&docs, cfg.parallelism, |doc| {
        let mut forge = Forge::new(&ctx.kit, &gw, &cfg.models.generator, judge.clone(), cfg.forge.clone())?;
        forge.temperature = cfg.generation.temperature;
        forge.forge_document(doc)
    });

    let mut claims: Vec<Claim> = Vec::new();
    let mut questions: Vec<QuestionRecord> = Vec::new();
    let mut judgements: Vec<Judgement> = Vec::new();
    let mut warnings: Vec<WarningRecord> = Vec::new();
    for (doc, r) in docs.iter().zip(results) {
        match r {
            Ok(out) => {
                for w in out.warnings {
                    log::warn!("{}: {w}", doc.doc_id);
                    warnings.push(WarningRecord { doc_id: doc.doc_id.clone(), message: w.to_string(), detail: Some(w) });
                }
                claims.extend(out.claims);
                questions.extend(out.questions);
                judgements.extend(out.judgements);
            }
            Err(ForgeError::DocumentSkipped { doc_id, reason }) => {
                log::warn!("document {doc_id} skipped: {reason}");
                warnings.push(WarningRecord { doc_id, message: format!("skipped: {reason}"), detail: None });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let oos = questions.iter().filter(|q| q.scope == Scope::Out).count();
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, CLAIMS, &claims)?;
    ctx.write(&mut outputs, QUESTIONS, &questions)?;
    ctx.write(&mut outputs, FORGE_JUDGEMENTS, &judgements)?;
    ctx.write(&mut outputs, FORGE_WARNINGS, &warnings)?;
    println!(
        "generate: {} questions ({} out of scope, {} in scope) from {} documents; {} backend calls",
        questions.len(),
        oos,
        questions.len() - oos,
        docs.len(),
        gw.stats.backend_calls()
    );
    ctx.complete("generate", inputs, outputs)
}

/// Splits positional results into successes, failing the stage on any error.
fn all_ok<T>(results: Vec<std::result::Result<T, HarnessError>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut first_err = None;
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        None => Ok(ok),
        Some(e) => {
            let app: AppError = e.into();
            Err(match app {
                AppError::Backend(m) => AppError::Backend(format!("{failed} request(s) failed; first: {m}")),
                other => other,
            })
        }
    }
}

fn respond(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let variant = cfg.eval.variant;
    let oos: Vec<&QuestionRecord> = ds.questions.iter().filter(|q| q.scope == Scope::Out).collect();
    if ctx.dry_run {
        dry(format!(
            "respond would send {} requests ({} out-of-scope questions x {} responders, variant {variant})",
            oos.len() * cfg.models.responders.len(),
            oos.len(),
            cfg.models.responders.len()
        ));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS), &ctx.path(QUESTIONS)])?;
    if ctx.up_to_date("respond", &inputs)? {
        return Ok(());
    }
    let gw = ctx.gateway()?;
    let mut responses = Vec::new();
    for model in &cfg.models.responders {
        let rs = harness::respond_all(&ctx.kit, &ds, &oos, variant, model, &gw, cfg.parallelism)?;
        responses.extend(all_ok(rs)?);
    }
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, &responses_file(variant), &responses)?;
    println!("respond: {} responses ({variant})", responses.len());
    ctx.complete("respond", inputs, outputs)
}

fn judge_confusion(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let all: Vec<&QuestionRecord> = ds.questions.iter().collect();
    if ctx.dry_run {
        dry(format!("judge-confusion would send {} requests ({} questions x m={})", all.len() * cfg.judge.m as usize, all.len(), cfg.judge.m));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS), &ctx.path(QUESTIONS)])?;
    if ctx.up_to_date("judge-confusion", &inputs)? {
        return Ok(());
    }
    let gw = ctx.gateway()?;
    let settings = cfg.judge_settings(&cfg.models.judge)?;
    let judgements = all_ok(harness::judge_confusion_all(&ctx.kit, &ds, &all, &settings, &gw)?)?;
    let correct = all
        .iter()
        .zip(&judgements)
        .filter(|(q, j)| harness::detection_correct(j.verdict, q.scope))
        .count();
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, CONFUSION, &judgements)?;
    if !judgements.is_empty() {
        println!(
            "judge-confusion: {} judgements, detection accuracy {:.2}%",
            judgements.len(),
            100.0 * correct as f64 / judgements.len() as f64
        );
    }
    ctx.complete("judge-confusion", inputs, outputs)
}

fn judge_defusion(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let variant = cfg.eval.variant;
    let responses = ctx.upstream::<ResponseRecord>("respond", &responses_file(variant))?;
    let by_id: BTreeMap<&str, &QuestionRecord> = ds.questions.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let pairs = responses
        .iter()
        .map(|r| {
            by_id
                .get(r.question_id.as_str())
                .map(|q| (*q, r))
                .ok_or_else(|| AppError::Validation(format!("response for unknown question {}", r.question_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if ctx.dry_run {
        dry(format!("judge-defusion would send {} requests ({} responses x m={})", pairs.len() * cfg.judge.m as usize, pairs.len(), cfg.judge.m));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS), &ctx.path(QUESTIONS), &ctx.path(&responses_file(variant))])?;
    if ctx.up_to_date("judge-defusion", &inputs)? {
        return Ok(());
    }
    let gw = ctx.gateway()?;
    let settings = cfg.judge_settings(&cfg.models.judge)?;
    let judgements = all_ok(harness::judge_defusion_all(&ctx.kit, &ds, &pairs, &settings, &gw)?)?;
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, &defusion_file(variant), &judgements)?;
    println!("judge-defusion: {} judgements ({variant})", judgements.len());
    ctx.complete("judge-defusion", inputs, outputs)
}

/// Builds the per-topic table from defusion judgements, one row per
/// responder model in configuration order.
pub fn report_from_judgements(
    ds: &Dataset,
    variant: PromptVariant,
    models: &[String],
    judgements: &[Judgement],
) -> Result<BenchmarkReport> {
    let topics = ds.topics();
    let topic_of: BTreeMap<&str, &str> = ds
        .questions
        .iter()
        .map(|q| (q.question_id.as_str(), ds.document_of(q).topic.as_str()))
        .collect();
    let mut rows = Vec::new();
    for model in models {
        let mut outcomes = Vec::new();
        for j in judgements.iter().filter(|j| j.responder_model.as_deref() == Some(model.as_str())) {
            let topic = topic_of
                .get(j.question_id.as_str())
                .ok_or_else(|| AppError::Validation(format!("judgement for unknown question {}", j.question_id)))?;
            outcomes.push((topic.to_string(), Some(harness::defused(j.verdict))));
        }
        rows.push(benchmark_row(&topics, variant, model, &outcomes, None));
    }
    Ok(BenchmarkReport { topics, rows, std_dev_kind: "sample".into(), indeterminate_counts_as_failure: true })
}

fn report_stage(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let variant = ctx.cfg.eval.variant;
    let judgements = ctx.upstream::<Judgement>("judge-defusion", &defusion_file(variant))?;
    let rep = report_from_judgements(&ds, variant, &ctx.cfg.models.responders, &judgements)?;
    let tsv = report::benchmark_tsv(&rep);
    if ctx.dry_run {
        dry(format!("report would write report-{variant}.tsv/json"));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS), &ctx.path(QUESTIONS), &ctx.path(&defusion_file(variant))])?;
    let mut outputs = BTreeMap::new();
    ctx.write_table(&mut outputs, &format!("report-{variant}"), &tsv, &rep)?;
    print!("{tsv}");
    ctx.complete("report", inputs, outputs)
}

fn benchmark(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let variant = cfg.eval.variant;
    if ctx.dry_run {
        let oos = ds.questions.iter().filter(|q| q.scope == Scope::Out).count();
        let n = ds.questions.len();
        let m = cfg.judge.m as usize;
        let per_model = oos + oos * m + n * m;
        dry(format!(
            "benchmark would send {} requests over {} responders (variant {variant}, m={m})",
            per_model * cfg.models.responders.len(),
            cfg.models.responders.len()
        ));
        return Ok(());
    }
    let inputs = ctx.input_digests(&[&ctx.path(DOCUMENTS), &ctx.path(QUESTIONS)])?;
    if ctx.up_to_date("benchmark", &inputs)? {
        return Ok(());
    }
    let gw = ctx.gateway()?;
    let settings = cfg.judge_settings(&cfg.models.judge)?;
    let (rep, run) = harness::run_benchmark(&ctx.kit, &ds, &cfg.models.responders, variant, &settings, &gw)?;
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, &format!("benchmark_responses-{variant}.jsonl"), &run.responses)?;
    ctx.write(&mut outputs, &format!("benchmark_defusion-{variant}.jsonl"), &run.defusion)?;
    ctx.write(&mut outputs, &format!("benchmark_confusion-{variant}.jsonl"), &run.confusion)?;
    let tsv = report::benchmark_tsv(&rep);
    ctx.write_table(&mut outputs, &format!("benchmark-{variant}"), &tsv, &rep)?;
    print!("{tsv}");
    if !run.failures.is_empty() {
        for f in &run.failures {
            log::error!("{f}");
        }
        // The table is written with incomplete cells marked, but the stage
        // is left unrecorded so the next run retries.
        return Err(AppError::Backend(format!("{} request(s) failed; table is incomplete", run.failures.len())));
    }
    ctx.complete("benchmark", inputs, outputs)
}

fn probe_features(ctx: &Ctx) -> Result<(Vec<FeatureRecord>, Vec<PathBuf>)> {
    let p = &ctx.cfg.paths;
    if ctx.cfg.probe.nli {
        let questions = ctx.upstream::<QuestionRecord>("generate", QUESTIONS)?;
        let feats = nli_features(&questions, read_vectors(&p.doc_vectors)?, read_vectors(&p.question_vectors)?)?;
        Ok((feats, vec![ctx.path(QUESTIONS), p.doc_vectors.clone(), p.question_vectors.clone()]))
    } else {
        Ok((to_features(read_vectors(&p.vectors)?), vec![p.vectors.clone()]))
    }
}

fn train_probe(ctx: &Ctx) -> Result<()> {
    let (mut feats, input_paths) = probe_features(ctx)?;
    let cfg = &ctx.cfg;
    let [a, b, c] = cfg.probe.split;
    probe::split_dataset(&mut feats, (a, b, c), cfg.seed).map_err(validation)?;
    let count = |s: Split| feats.iter().filter(|r| r.split == s).count();
    if ctx.dry_run {
        dry(format!(
            "train-probe would train on {} records (train {}, val {}, test {}) for {} epochs",
            feats.len(),
            count(Split::Train),
            count(Split::Val),
            count(Split::Test),
            cfg.probe.epochs
        ));
        return Ok(());
    }
    let refs: Vec<&Path> = input_paths.iter().map(PathBuf::as_path).collect();
    let inputs = ctx.input_digests(&refs)?;
    if ctx.up_to_date("train-probe", &inputs)? {
        return Ok(());
    }
    let outcome = probe::train_probe(&feats, &cfg.train_config()).map_err(validation)?;
    let rep = ProbeReport {
        records: feats.len(),
        dim: outcome.model.params.dim,
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
        best_epoch: outcome.model.best_epoch,
        train_acc: outcome.train_acc,
        best_val_acc: outcome.best_val_acc,
        test_acc: outcome.test_acc,
    };
    ctx.ensure_out()?;
    let mut outputs = BTreeMap::new();
    ctx.write(&mut outputs, PROBE_MODEL, std::slice::from_ref(&outcome.model))?;
    ctx.write(&mut outputs, PROBE_LOG, &outcome.log)?;
    ctx.write_json(&mut outputs, "probe_report.json", &rep)?;
    println!(
        "train-probe: best epoch {}, train {:.4}, val {:.4}, test {}",
        rep.best_epoch,
        rep.train_acc,
        rep.best_val_acc,
        rep.test_acc.map_or("-".into(), |t| format!("{t:.4}"))
    );
    ctx.complete("train-probe", inputs, outputs)
}

fn eval_probe(ctx: &Ctx) -> Result<()> {
    let mut models = ctx.upstream::<ProbeModel>("train-probe", PROBE_MODEL)?;
    let model = match models.len() {
        1 => models.pop().expect("one model"),
        n => return Err(AppError::Validation(format!("{PROBE_MODEL} holds {n} records, expected 1"))),
    };
    let path = &ctx.cfg.paths.eval_vectors;
    let feats = to_features(read_vectors(path)?);
    if ctx.dry_run {
        dry(format!("eval-probe would score {} records", feats.len()));
        return Ok(());
    }
    let (accuracy, matrix) = probe::evaluate_probe(&model, &feats).map_err(validation)?;
    let inputs = ctx.input_digests(&[&ctx.path(PROBE_MODEL), path])?;
    let mut outputs = BTreeMap::new();
    ctx.write_json(&mut outputs, "probe_eval.json", &ProbeEval { records: feats.len(), accuracy, matrix })?;
    println!("eval-probe: accuracy {accuracy:.4} on {} records", feats.len());
    ctx.complete("eval-probe", inputs, outputs)
}

fn eval_retrieval(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let queries: Vec<ProvenancedQuery<'_>> = ds
        .questions
        .iter()
        .filter(|q| cfg.retrieval.queries.admits(q.scope))
        .map(|q| ProvenancedQuery { question_id: &q.question_id, text: &q.text, source_doc: &q.doc_id })
        .collect();
    let p = &cfg.paths;
    let dense = p.doc_vectors.exists() && p.question_vectors.exists();
    if ctx.dry_run {
        dry(format!(
            "eval-retrieval would rank {} documents for {} queries (bm25{})",
            ds.documents.len(),
            queries.len(),
            if dense { " and dense" } else { "" }
        ));
        return Ok(());
    }
    let index = retrieval::build_index(
        ds.documents.values().map(|d| (d.doc_id.as_str(), d.text.as_str())),
        cfg.bm25(),
        TokenizerOptions::default(),
    )
    .map_err(validation)?;
    let mut reports = vec![retrieval::evaluate_bm25(&index, &queries, cfg.retrieval.depth).map_err(validation)?];
    let mut zero_norm = Vec::new();
    let mut input_paths = vec![ctx.path(DOCUMENTS), ctx.path(QUESTIONS)];
    if dense {
        let docs = to_dense(read_vectors(&p.doc_vectors)?);
        let qv: BTreeMap<String, Vec<f64>> = read_vectors(&p.question_vectors)?.into_iter().map(|v| (v.id, v.values)).collect();
        let (r, zn) = retrieval::evaluate_dense("dense", &docs, &qv, &queries, cfg.retrieval.depth).map_err(validation)?;
        reports.push(r);
        zero_norm = zn;
        input_paths.extend([p.doc_vectors.clone(), p.question_vectors.clone()]);
    }
    for id in &zero_norm {
        log::warn!("{id}: zero-norm vector scores 0 against everything");
    }
    let refs: Vec<&Path> = input_paths.iter().map(PathBuf::as_path).collect();
    let inputs = ctx.input_digests(&refs)?;
    let tsv = report::retrieval_tsv(&reports);
    let mut outputs = BTreeMap::new();
    ctx.write_table(&mut outputs, "retrieval", &tsv, &RetrievalOutput { reports, zero_norm })?;
    print!("{tsv}");
    ctx.complete("eval-retrieval", inputs, outputs)
}

fn agree(ctx: &Ctx) -> Result<()> {
    let path = &ctx.cfg.paths.labels;
    if !path.exists() {
        return Err(AppError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "labels file not found")));
    }
    let labels = read_records::<LabelRecord>(path)?.records;
    let rep = metrics::agreement_report(&labels).map_err(validation)?;
    let tsv = report::agreement_tsv(&rep);
    if ctx.dry_run {
        dry(format!("agree would write agreement.tsv/json from {} labels", labels.len()));
        return Ok(());
    }
    ctx.ensure_out()?;
    let inputs = ctx.input_digests(&[path])?;
    let mut outputs = BTreeMap::new();
    ctx.write_table(&mut outputs, "agreement", &tsv, &rep)?;
    print!("{tsv}");
    ctx.complete("agree", inputs, outputs)
}

pub fn run(cli: Cli) -> Result<()> {
    run_with_backend(cli, None)
}

/// Like [`run`], with every backend call going to `backend`.
pub fn run_with_backend(cli: Cli, backend: Option<Arc<dyn Backend>>) -> Result<()> {
    let overrides = Overrides { parallelism: cli.parallelism, seed: cli.seed, variant: cli.variant, m: cli.m };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let kit = load_kit(cfg.paths.templates.as_deref())?;
    let ctx = Ctx {
        out: cfg.paths.out_dir.clone(),
        digest: cfg.digest(),
        cfg,
        kit,
        dry_run: cli.dry_run,
        force: cli.force,
        backend,
    };
    log::debug!("stage {}", cli.command.stage());
    match cli.command {
        Command::Ingest { input, topic } => ingest(&ctx, input, topic),
        Command::Generate => generate(&ctx),
        Command::Respond => respond(&ctx),
        Command::JudgeConfusion => judge_confusion(&ctx),
        Command::JudgeDefusion => judge_defusion(&ctx),
        Command::Benchmark => benchmark(&ctx),
        Command::TrainProbe => train_probe(&ctx),
        Command::EvalProbe => eval_probe(&ctx),
        Command::EvalRetrieval => eval_retrieval(&ctx),
        Command::Agree => agree(&ctx),
        Command::Report => report_stage(&ctx),
    }
}
