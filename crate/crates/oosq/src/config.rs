//! TOML run configuration. Relative paths resolve against the directory
//! holding the config file. Credentials are never read from here; only the
//! name of the environment variable that holds the API key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use oosq_core::corpus::{DEFAULT_CAP, DEFAULT_MIN_WORDS};
use oosq_core::forge::ForgeConfig;
use oosq_core::harness::{JudgeSettings, PromptVariant};
use oosq_core::probe::TrainConfig;
use oosq_core::retrieval::{Bm25Params, DEFAULT_B, DEFAULT_DEPTH, DEFAULT_K1};
use serde::{Deserialize, Serialize};

use crate::datastore::sha256_hex;
use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub models: ModelsConfig,
    pub generation: GenerationConfig,
    pub judge: JudgeConfig,
    pub forge: ForgeConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    pub paths: PathsConfig,
    pub retrieval: RetrievalConfig,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub generator: String,
    pub responders: Vec<String>,
    pub judge: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub m: u32,
    /// Defaults to 0.7 when `m > 1` and 0.0 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_words: usize,
    pub cap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default_topic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    pub base_url: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub prefix_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw documents file read by `ingest`.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub fixtures: PathBuf,
    /// Optional directory of template overrides named `<template_id>.txt`,
    /// with exemplars under `exemplars/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub labels: PathBuf,
    /// Labelled vectors for the probe.
    pub vectors: PathBuf,
    /// Held-out labelled vectors for `eval-probe`.
    pub eval_vectors: PathBuf,
    /// Document and question embeddings for dense retrieval and NLI features.
    pub doc_vectors: PathBuf,
    pub question_vectors: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k1: f64,
    pub b: f64,
    pub depth: usize,
    /// Which questions are used as queries.
    pub queries: QueryScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryScope {
    Out,
    In,
    All,
}

impl QueryScope {
    pub fn admits(self, scope: oosq_core::forge::Scope) -> bool {
        use oosq_core::forge::Scope;
        matches!((self, scope), (QueryScope::All, _) | (QueryScope::Out, Scope::Out) | (QueryScope::In, Scope::In))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub split: [f64; 3],
    /// Build `[e_d; e_q; |e_d - e_q|]` features from document and question
    /// vectors instead of reading `paths.vectors`.
    pub nli: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallelism: 4,
            models: ModelsConfig::default(),
            generation: GenerationConfig::default(),
            judge: JudgeConfig::default(),
            forge: ForgeConfig::default(),
            eval: EvalConfig::default(),
            corpus: CorpusConfig::default(),
            backend: BackendConfig::default(),
            paths: PathsConfig::default(),
            retrieval: RetrievalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            generator: "gpt-4o-mini".into(),
            responders: vec!["llama-3.1-8b-instruct".into()],
            judge: "gpt-4o-mini".into(),
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: oosq_core::gateway::GENERATION_TEMPERATURE }
    }
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig { m: 3, temperature: None }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { variant: PromptVariant::Basic }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { min_words: DEFAULT_MIN_WORDS, cap: DEFAULT_CAP, default_topic: None }
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendChoice::Mock,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OOSQ_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            retry_base_ms: 1000,
            prefix_fallback: false,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "corpus.jsonl".into(),
            out_dir: "out".into(),
            cache_dir: ".oosq-cache".into(),
            fixtures: "fixtures.jsonl".into(),
            templates: None,
            labels: "labels.jsonl".into(),
            vectors: "vectors.jsonl".into(),
            eval_vectors: "eval_vectors.jsonl".into(),
            doc_vectors: "doc_vectors.jsonl".into(),
            question_vectors: "question_vectors.jsonl".into(),
        }
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k1: DEFAULT_K1, b: DEFAULT_B, depth: DEFAULT_DEPTH, queries: QueryScope::Out }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ProbeConfig {
            hidden: t.hidden,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            dropout: t.dropout,
            split: [0.8, 0.1, 0.1],
            nli: false,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<PromptVariant>,
    pub m: Option<u32>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    /// Reads `path` (or defaults when `None`), applies overrides, resolves
    /// relative paths and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AppError::Config(format!("cannot read {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (Self::from_toml(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        cfg.apply(overrides);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.parallelism {
            self.parallelism = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(v) = o.variant {
            self.eval.variant = v;
        }
        if let Some(m) = o.m {
            self.judge.m = m;
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.corpus,
            &mut p.out_dir,
            &mut p.cache_dir,
            &mut p.fixtures,
            &mut p.labels,
            &mut p.vectors,
            &mut p.eval_vectors,
            &mut p.doc_vectors,
            &mut p.question_vectors,
        ] {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(t) = p.templates.as_mut().filter(|t| t.is_relative()) {
            *t = base.join(&*t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AppError::Config(msg));
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.judge.m == 0 || self.judge.m.is_multiple_of(2) {
            return bad(format!("judge.m must be odd, got {}", self.judge.m));
        }
        for (name, t) in [("generation.temperature", Some(self.generation.temperature)), ("judge.temperature", self.judge.temperature)] {
            if let Some(t) = t {
                if !(t.is_finite() && t >= 0.0) {
                    return bad(format!("{name} must be a non-negative number"));
                }
            }
        }
        self.forge.validate().map_err(|e| AppError::Config(e.to_string()))?;
        if self.corpus.min_words >= self.corpus.cap {
            return bad("corpus.min_words must be below corpus.cap".into());
        }
        if self.models.responders.is_empty() {
            return bad("models.responders must list at least one model".into());
        }
        if self.retrieval.depth == 0 || self.retrieval.k1 < 0.0 || !(0.0..=1.0).contains(&self.retrieval.b) {
            return bad("retrieval needs depth >= 1, k1 >= 0 and b in [0, 1]".into());
        }
        let pr = &self.probe;
        if pr.hidden == 0 || pr.epochs == 0 || pr.batch == 0 || !pr.lr.is_finite() || pr.lr <= 0.0 || !(0.0..1.0).contains(&pr.dropout) {
            return bad("probe needs positive hidden, epochs, batch, lr and dropout in [0, 1)".into());
        }
        if pr.split.iter().any(|r| *r < 0.0) || (pr.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("probe.split must be three non-negative ratios summing to 1".into());
        }
        Ok(())
    }

    /// Digest of everything that influences stage outputs.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.parallelism = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn judge_settings(&self, model: &str) -> Result<JudgeSettings> {
        let mut s = JudgeSettings::new(model, self.judge.m).map_err(|e| AppError::Config(e.to_string()))?;
        if let Some(t) = self.judge.temperature {
            s.temperature = t;
        }
        s.parallelism = self.parallelism;
        Ok(s)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.probe.hidden,
            epochs: self.probe.epochs,
            batch: self.probe.batch,
            lr: self.probe.lr,
            dropout: self.probe.dropout,
            seed: self.seed,
        }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.retrieval.k1, b: self.retrieval.b }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.backend.timeout_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn example_file_spells_out_the_defaults() {
        let cfg = RunConfig::from_toml(include_str!("../../../oosq.example.toml")).unwrap();
        let mut want = RunConfig::default();
        want.backend.kind = BackendChoice::Live;
        assert_eq!(cfg, want);
    }

    #[test]
    fn partial_file_and_overrides() {
        let mut cfg = RunConfig::from_toml("seed = 5\n[judge]\nm = 9\n[forge]\nk = 2\n[eval]\nvariant = \"zero_shot_cot\"\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.judge.m, 9);
        assert_eq!(cfg.forge.k, 2);
        assert_eq!(cfg.forge.num_fact, 9);
        assert_eq!(cfg.eval.variant, PromptVariant::ZeroShotCot);
        cfg.apply(&Overrides { m: Some(1), variant: Some(PromptVariant::TwoShot), ..Default::default() });
        assert_eq!(cfg.judge.m, 1);
        assert_eq!(cfg.eval.variant, PromptVariant::TwoShot);
    }

    #[test]
    fn rejects_even_m_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.judge.m = 4;
        assert!(matches!(cfg.validate(), Err(AppError::Config(_))));
        assert!(RunConfig::from_toml("api_key = \"x\"").is_err());
        let cfg = RunConfig::from_toml("[forge]\nnum_fact = 2\nk = 3").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn judge_temperature_follows_m() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.judge_settings("j").unwrap().temperature, 0.7);
        cfg.judge.m = 1;
        assert_eq!(cfg.judge_settings("j").unwrap().temperature, 0.0);
        cfg.judge.temperature = Some(0.3);
        assert_eq!(cfg.judge_settings("j").unwrap().temperature, 0.3);
    }

    #[test]
    fn digest_ignores_parallelism() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.parallelism = 32;
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\nout_dir = \"results\"\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(cfg.paths.out_dir, dir.path().join("results"));
    }
}
