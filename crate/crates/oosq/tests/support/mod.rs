//! A deterministic stand-in for every model role in the pipeline, used to
//! produce mock fixtures and to drive end-to-end tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use oosq::datastore::write_records;
use oosq::gateway::{Backend, BackendFailure};
use oosq_core::corpus::split_sentences;
use oosq_core::forge::Scope;
use oosq_core::gateway::BackendKind;
use oosq_core::prompt::parse_numbered_list;
use oosq_core::{ChatRequest, Document, GatewayError, QuestionRecord};

/// (entity, fabricated fact, question about the fact).
pub const POOL: [(&str, &str, &str); 9] = [
    ("Brindlemoor", "The Brindlemoor Harbor Council approved a new ferry tariff after a public vote.", "Why did the Brindlemoor Harbor Council approve the new ferry tariff mentioned in this local report?"),
    ("Quillfort", "The Quillfort weather office issued a storm warning for the whole northern coast.", "When did the Quillfort weather office issue its storm warning for the whole northern coast?"),
    ("Ostrava Lines", "The shipping company Ostrava Lines cancelled three cargo routes earlier this month.", "How many cargo routes did Ostrava Lines cancel before the events described in this article?"),
    ("Tessaly", "Mayor Idris Tessaly opened a new public library on the east side of town.", "What did Mayor Idris Tessaly say when opening the new public library on the east side?"),
    ("Varnholm", "The Varnholm Institute funded a study of seabird migration along the coast.", "How much money did the Varnholm Institute provide for the seabird migration study along the coast?"),
    ("Celadon Park", "A concert in Celadon Park attracted more than nine thousand visitors last weekend.", "Which performers appeared at the Celadon Park concert that attracted more than nine thousand visitors?"),
    ("Pellamy", "Senator Ruth Pellamy proposed a tax credit for rural broadband providers.", "Why did Senator Ruth Pellamy propose a tax credit for rural broadband providers this year?"),
    ("Drummore", "The Drummore Ferry Company bought two electric vessels from a Norwegian shipyard.", "What price did the Drummore Ferry Company pay for its two electric vessels from Norway?"),
    ("Aldergate", "The Aldergate Trust restored a medieval bridge using donations from local residents.", "How long did the Aldergate Trust take to restore the medieval bridge using local donations?"),
];

const FALLBACK_ENTITY: &str = "Farrowdale";

pub const DEFUSING_ANSWER: &str = "The document does not mention this, so the question cannot be answered.";
pub const EAGER_ANSWER: &str = "Yes, the document confirms this and gives the full details.";

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let s = text.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &text[s..];
    &rest[..rest.find(end).unwrap_or(rest.len())]
}

fn last_between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let s = text.rfind(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &text[s..];
    &rest[..rest.find(end).unwrap_or(rest.len())]
}

fn first_quoted(text: &str) -> &str {
    between(text, "\"\"\"", "\"\"\"")
}

fn number_after(text: &str, prefix: &str) -> usize {
    let rest = between(text, prefix, " ");
    rest.trim().parse().unwrap_or(5)
}

fn verdict(ans: &str) -> String {
    format!("I compared the entities in the question with the document. The answer is: {ans}.")
}

/// How a responder model treats out-of-scope questions, picked from its name.
fn responder(model: &str, question: &str) -> &'static str {
    if model.contains("eager") {
        EAGER_ANSWER
    } else if model.contains("mixed") {
        if question.split_whitespace().count().is_multiple_of(2) {
            DEFUSING_ANSWER
        } else {
            EAGER_ANSWER
        }
    } else {
        DEFUSING_ANSWER
    }
}

pub fn scripted(req: &ChatRequest) -> String {
    let u = &req.user_text;
    if u.starts_with("Read the document and list") {
        let n = number_after(u, "Read the document and list ");
        let doc = first_quoted(u);
        split_sentences(doc).iter().take(n).enumerate().map(|(i, s)| format!("{}. {}\n", i + 1, s.trim())).collect()
    } else if u.starts_with("Read the document below with a list of") && req.system_text.is_empty() {
        parse_numbered_list(first_quoted(u))
            .items
            .iter()
            .map(|(i, t)| {
                let t = if t == "(missing)" { POOL[(*i as usize - 1) % POOL.len()].1 } else { t.as_str() };
                format!("{i}. {t}\n")
            })
            .collect()
    } else if u.contains("Remaining hallucinated facts:") {
        let head = &u[..u.rfind("Remaining hallucinated facts:").unwrap()];
        let block = &head[head.rfind("hallucinated facts:\n").unwrap() + "hallucinated facts:\n".len()..];
        parse_numbered_list(block)
            .items
            .iter()
            .filter(|(i, _)| i % 8 != 0)
            .map(|(i, t)| format!("{i}. {t}\n"))
            .collect()
    } else if u.contains("review the list of hallucinated facts") {
        let block = last_between(u, "hallucinated facts:\n", "\n\nQuestions:");
        parse_numbered_list(block)
            .items
            .iter()
            .map(|(pos, fact)| match POOL.iter().find(|p| p.1 == fact) {
                Some(p) => format!("{pos}. {}\n", p.2),
                None => format!(
                    "{pos}. What did the {FALLBACK_ENTITY} planning board decide about the matter described in claim {pos}?\n"
                ),
            })
            .collect()
    } else if u.contains("Check if the question contains any confusing parts") {
        let q = between(u, "Question:\n", "\n\nDoes the question");
        let ans = if q.contains("Quillfort") {
            "No"
        } else if q.contains("Tessaly") {
            ["Yes", "No", "unsure"][req.sample_index as usize % 3]
        } else if POOL.iter().any(|p| q.contains(p.0)) || q.contains(FALLBACK_ENTITY) {
            "Yes"
        } else {
            "No"
        };
        verdict(ans)
    } else if u.contains("compile a numbered list of the top") {
        let n = number_after(u, "compile a numbered list of the top ");
        split_sentences(first_quoted(u))
            .iter()
            .take(n)
            .enumerate()
            .map(|(i, s)| {
                let w: Vec<&str> = s.split_whitespace().take(2).collect();
                format!(
                    "{}. What does the article report in its sentence number {} that begins with the words {}?\n",
                    i + 1,
                    i + 1,
                    w.join(" ")
                )
            })
            .collect()
    } else if u.contains("The question presented is confusing and unanswerable") {
        let response = last_between(u, "Answer:\n", "\n\nThe question presented");
        verdict(if response.contains("cannot be answered") { "Yes" } else { "No" })
    } else if u.contains("answer the question based on the document") || u.contains("reason step by step") {
        let q = last_between(u, "Question:\n", "\n\nAnswer:");
        responder(&req.model_id, q).to_string()
    } else {
        panic!("scripted backend got an unrecognised prompt:\n{u}")
    }
}

/// Backend answering with [`scripted`] and logging every exchange.
#[derive(Default)]
pub struct Scripted {
    pub log: Mutex<Vec<(ChatRequest, String)>>,
    /// Requests for these models fail with a non-retryable error.
    pub failing_models: Vec<String>,
}

impl Backend for Scripted {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        if self.failing_models.contains(&req.model_id) {
            return Err(BackendFailure::Fatal(GatewayError::Rejected(format!("{} is down", req.model_id))));
        }
        let text = scripted(req);
        self.log.lock().unwrap().push((req.clone(), text.clone()));
        Ok(text)
    }
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Writes a mock-backend config into `dir` that reads the fixture corpus
/// and fixtures, with `extra` appended verbatim.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures_dir();
    let text = format!(
        "seed = 7\nparallelism = 4\n\n[models]\ngenerator = \"gen-model\"\nresponders = [\"careful-model\", \"mixed-model\"]\njudge = \"judge-model\"\n\n\
         [backend]\nkind = \"mock\"\nmax_retries = 0\nretry_base_ms = 1\n\n\
         [paths]\ncorpus = {corpus:?}\nfixtures = {fixtures:?}\nout_dir = \"out\"\ncache_dir = \"cache\"\n{extra}\n",
        corpus = f.join("corpus.jsonl").display().to_string(),
        fixtures = f.join("mock_responses.jsonl").display().to_string(),
    );
    let p = dir.join("oosq.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub const TOPICS: [&str; 10] = [
    "business", "culture", "education", "environment", "health", "politics", "science", "sports", "technology", "travel",
];

/// Backend for the ten-topic dataset: `careful-model` always defuses,
/// `half-model` defuses only questions about the first fair, and
/// `hedging-model` gets unparseable defusion verdicts.
pub struct TenTopicWorld;

fn tail<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let s = text.rfind(start).unwrap() + start.len();
    let rest = &text[s..];
    &rest[..rest.find(end).unwrap_or(rest.len())]
}

impl Backend for TenTopicWorld {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        let u = &req.user_text;
        if req.model_id == "down-model" {
            return Err(BackendFailure::Fatal(GatewayError::Rejected("down".into())));
        }
        let verdict = |a: &str| format!("Some reasoning. The answer is: {a}.");
        Ok(if u.contains("The question presented is confusing and unanswerable") {
            let response = tail(u, "Answer:\n", "\n\nThe question presented");
            if response.contains("cannot be answered") {
                verdict("Yes")
            } else if response.contains("Perhaps") {
                "I am not sure.".into()
            } else {
                verdict("No")
            }
        } else if u.contains("Check if the question contains any confusing parts") {
            verdict(if tail(u, "Question:\n", "\n\nDoes").contains("Zorvath") { "Yes" } else { "No" })
        } else {
            let q = tail(u, "Question:\n", "\n\nAnswer:");
            let defuse = match req.model_id.as_str() {
                "careful-model" => true,
                "half-model" => q.contains("first"),
                "hedging-model" => return Ok("Perhaps.".into()),
                m => panic!("unknown model {m}"),
            };
            if defuse { "The question cannot be answered from the document." } else { "Yes, it happened." }.into()
        })
    }
}

/// Writes documents, questions (two out of scope, one in scope per topic)
/// and a config into `dir`.
pub fn ten_topic_setup(dir: &Path, responders: &str) -> std::path::PathBuf {
    let out = dir.join("out");
    std::fs::create_dir_all(&out).unwrap();
    let mut docs = Vec::new();
    let mut qs = Vec::new();
    for (i, t) in TOPICS.iter().enumerate() {
        let text = format!("Document {i} about {t} says the town fair opened on Monday.");
        let id = format!("d{i}");
        docs.push(Document {
            doc_id: id.clone(),
            topic: t.to_string(),
            published_at: None,
            word_count: text.split_whitespace().count(),
            text,
        });
        for (k, which) in ["first", "second"].iter().enumerate() {
            qs.push(QuestionRecord::new(
                format!("{id}-out-{}", k + 1),
                &id,
                format!("Why did the Zorvath council ask about the {which} fair?"),
                Scope::Out,
                Some(k as u32 + 1),
            ));
        }
        qs.push(QuestionRecord::new(format!("{id}-in-1"), &id, "When did the town fair open?".into(), Scope::In, None));
    }
    write_records(&out.join("documents.jsonl"), &docs).unwrap();
    write_records(&out.join("questions.jsonl"), &qs).unwrap();
    let cfg = dir.join("oosq.toml");
    std::fs::write(
        &cfg,
        format!("[models]\nresponders = {responders}\njudge = \"judge-model\"\n[judge]\nm = 3\n[paths]\nout_dir = \"out\"\n"),
    )
    .unwrap();
    cfg
}
