//! Prompt templates, placeholder rendering, and parsing of model output.
//!
//! Template files start with a front-matter line
//! `template_id: <id>; placeholders: <a>, <b>`, followed by the system text,
//! a `---` separator line, and the user text. Placeholders are written
//! `{name}`. Exemplar files (content for the few-shot slots) use
//! `exemplar_id: <id>; fields: ...` followed by `@@ <field>` sections.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ExtractClaims,
    RecoverMissing,
    OosJudgement,
    DefusionJudgement,
    DefusionInstruction,
    RagBasic,
    RagTwoShot,
    RagZeroShotCot,
    InscopeGen,
    OosGen,
    RemoveClaims,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::ExtractClaims,
        TemplateId::RecoverMissing,
        TemplateId::OosJudgement,
        TemplateId::DefusionJudgement,
        TemplateId::DefusionInstruction,
        TemplateId::RagBasic,
        TemplateId::RagTwoShot,
        TemplateId::RagZeroShotCot,
        TemplateId::InscopeGen,
        TemplateId::OosGen,
        TemplateId::RemoveClaims,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ExtractClaims => "extract_claims",
            TemplateId::RecoverMissing => "recover_missing",
            TemplateId::OosJudgement => "oos_judgement",
            TemplateId::DefusionJudgement => "defusion_judgement",
            TemplateId::DefusionInstruction => "defusion_instruction",
            TemplateId::RagBasic => "rag_basic",
            TemplateId::RagTwoShot => "rag_two_shot",
            TemplateId::RagZeroShotCot => "rag_zero_shot_cot",
            TemplateId::InscopeGen => "inscope_gen",
            TemplateId::OosGen => "oos_gen",
            TemplateId::RemoveClaims => "remove_claims",
        }
    }

    pub fn builtin_source(self) -> &'static str {
        match self {
            TemplateId::ExtractClaims => include_str!("../templates/extract_claims.txt"),
            TemplateId::RecoverMissing => include_str!("../templates/recover_missing.txt"),
            TemplateId::OosJudgement => include_str!("../templates/oos_judgement.txt"),
            TemplateId::DefusionJudgement => include_str!("../templates/defusion_judgement.txt"),
            TemplateId::DefusionInstruction => include_str!("../templates/defusion_instruction.txt"),
            TemplateId::RagBasic => include_str!("../templates/rag_basic.txt"),
            TemplateId::RagTwoShot => include_str!("../templates/rag_two_shot.txt"),
            TemplateId::RagZeroShotCot => include_str!("../templates/rag_zero_shot_cot.txt"),
            TemplateId::InscopeGen => include_str!("../templates/inscope_gen.txt"),
            TemplateId::OosGen => include_str!("../templates/oos_gen.txt"),
            TemplateId::RemoveClaims => include_str!("../templates/remove_claims.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("binding {0} is not a placeholder of this template")]
    UnknownPlaceholder(String),
    #[error("unknown template id {0}")]
    UnknownTemplate(String),
    #[error("malformed template file: {0}")]
    Malformed(String),
    #[error("declared placeholders do not match the template text: {0}")]
    PlaceholderMismatch(String),
    #[error("no exemplar loaded for {0}")]
    MissingExemplar(TemplateId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text_with_placeholders: String,
    pub placeholders: BTreeSet<String>,
    segments: Vec<Segment>,
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn segment(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                literal.push_str(&rest[..open]);
                if !literal.is_empty() {
                    segments.push(Segment::Literal(core::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(after[..close].to_string()));
                rest = &after[close + 1..];
            }
            _ => {
                literal.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

/// Splits `key: value; key: value` front matter.
fn front_matter<'a>(line: &'a str, keys: [&str; 2]) -> Result<[&'a str; 2], PromptError> {
    let mut out = ["", ""];
    for (slot, part) in line.split(';').enumerate() {
        let (key, value) = part
            .split_once(':')
            .ok_or_else(|| PromptError::Malformed(line.to_string()))?;
        if slot >= 2 || key.trim() != keys[slot] {
            return Err(PromptError::Malformed(line.to_string()));
        }
        out[slot] = value.trim();
    }
    Ok(out)
}

fn name_list(list: &str) -> BTreeSet<String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ToString::to_string)
        .collect()
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| PromptError::Malformed("empty template".into()))?;
        let [id, placeholder_list] = front_matter(header, ["template_id", "placeholders"])?;
        let template_id: TemplateId = id.parse()?;
        let placeholders = name_list(placeholder_list);

        let mut system = Vec::new();
        let mut found_separator = false;
        for line in lines.by_ref() {
            if line == "---" {
                found_separator = true;
                break;
            }
            system.push(line);
        }
        if !found_separator {
            return Err(PromptError::Malformed("missing --- separator".into()));
        }
        let user: Vec<&str> = lines.collect();
        let user_text = user.join("\n").trim_end().to_string();

        let segments = segment(&user_text);
        let used: BTreeSet<String> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.clone()),
                Segment::Literal(_) => None,
            })
            .collect();
        if used != placeholders {
            let diff: Vec<&str> = used
                .symmetric_difference(&placeholders)
                .map(String::as_str)
                .collect();
            return Err(PromptError::PlaceholderMismatch(diff.join(", ")));
        }

        Ok(PromptTemplate {
            template_id,
            system_text: system.join("\n"),
            user_text_with_placeholders: user_text,
            placeholders,
            segments,
        })
    }

    /// Substitutes every placeholder in one pass; bound values are never
    /// re-scanned for placeholders.
    pub fn render(&self, bindings: &Bindings) -> Result<(String, String), PromptError> {
        if let Some(extra) = bindings.keys().find(|k| !self.placeholders.contains(*k)) {
            return Err(PromptError::UnknownPlaceholder(extra.clone()));
        }
        if let Some(missing) = self.placeholders.iter().find(|p| !bindings.contains_key(*p)) {
            return Err(PromptError::MissingBinding(missing.clone()));
        }
        let mut user = String::with_capacity(self.user_text_with_placeholders.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => user.push_str(text),
                Segment::Slot(name) => user.push_str(&bindings[name]),
            }
        }
        Ok((self.system_text.clone(), user))
    }
}

/// Named field values for the few-shot slots of a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub template_id: TemplateId,
    pub fields: BTreeMap<String, String>,
}

impl Exemplar {
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| PromptError::Malformed("empty exemplar".into()))?;
        let [id, field_list] = front_matter(header, ["exemplar_id", "fields"])?;
        let template_id: TemplateId = id.parse()?;
        let declared = name_list(field_list);

        let mut fields = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for line in lines {
            if let Some(name) = line.strip_prefix("@@ ") {
                if let Some((name, body)) = current.take() {
                    fields.insert(name, body.join("\n").trim().to_string());
                }
                current = Some((name.trim().to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::Malformed("text before the first @@ section".into()));
            }
        }
        if let Some((name, body)) = current {
            fields.insert(name, body.join("\n").trim().to_string());
        }
        let present: BTreeSet<String> = fields.keys().cloned().collect();
        if present != declared {
            let diff: Vec<&str> = present
                .symmetric_difference(&declared)
                .map(String::as_str)
                .collect();
            return Err(PromptError::PlaceholderMismatch(diff.join(", ")));
        }
        Ok(Exemplar { template_id, fields })
    }

    /// Adds every exemplar field to `bindings`.
    pub fn bind_into(&self, bindings: &mut Bindings) {
        for (k, v) in &self.fields {
            bindings.insert(k.clone(), v.clone());
        }
    }
}

/// The full prompt kit: one template per id plus the exemplar content for
/// the templates that need it.
#[derive(Debug, Clone)]
pub struct PromptKit {
    templates: BTreeMap<TemplateId, PromptTemplate>,
    exemplars: BTreeMap<TemplateId, Exemplar>,
}

impl PromptKit {
    /// The templates and exemplars compiled into the crate.
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let t = PromptTemplate::parse(id.builtin_source())
                    .unwrap_or_else(|e| panic!("builtin template {id} is invalid: {e}"));
                assert_eq!(t.template_id, id, "builtin template file declares the wrong id");
                (id, t)
            })
            .collect();
        let exemplars = [
            include_str!("../templates/exemplars/rag_two_shot.txt"),
            include_str!("../templates/exemplars/defusion_judgement.txt"),
            include_str!("../templates/exemplars/remove_claims.txt"),
        ]
        .into_iter()
        .map(|src| {
            let ex = Exemplar::parse(src).unwrap_or_else(|e| panic!("builtin exemplar is invalid: {e}"));
            (ex.template_id, ex)
        })
        .collect();
        PromptKit { templates, exemplars }
    }

    pub fn template(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn exemplar(&self, id: TemplateId) -> Result<&Exemplar, PromptError> {
        self.exemplars.get(&id).ok_or(PromptError::MissingExemplar(id))
    }

    pub fn set_template(&mut self, template: PromptTemplate) {
        self.templates.insert(template.template_id, template);
    }

    pub fn set_exemplar(&mut self, exemplar: Exemplar) {
        self.exemplars.insert(exemplar.template_id, exemplar);
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings) -> Result<(String, String), PromptError> {
        self.template(id).render(bindings)
    }

    /// Renders `id`, filling its few-shot slots from the loaded exemplar.
    pub fn render_with_exemplar(
        &self,
        id: TemplateId,
        bindings: &Bindings,
    ) -> Result<(String, String), PromptError> {
        let mut all = bindings.clone();
        self.exemplar(id)?.bind_into(&mut all);
        self.render(id, &all)
    }
}

impl Default for PromptKit {
    fn default() -> Self {
        PromptKit::builtin()
    }
}

/// Builds a [`Bindings`] map from string pairs.
pub fn bindings<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictValue {
    Yes,
    No,
    Unparseable,
}

/// One parsed judge vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub raw_tail: String,
}

impl Verdict {
    pub fn unparseable() -> Self {
        Verdict { value: VerdictValue::Unparseable, raw_tail: String::new() }
    }
}

const TRAILER: &str = "the answer is";

fn is_trailer_filler(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”')
}

/// Finds the last "the answer is ... yes|no" trailer, case-insensitively.
pub fn parse_verdict(response_text: &str) -> Verdict {
    // ASCII lowercasing keeps byte offsets aligned with the original.
    let lowered = response_text.to_ascii_lowercase();
    let mut best = None;
    for (start, _) in lowered.match_indices(TRAILER) {
        let after = start + TRAILER.len();
        let rest = &lowered[after..];
        let skipped = rest.len() - rest.trim_start_matches(is_trailer_filler).len();
        let word_start = after + skipped;
        let word = &lowered[word_start..];
        for (token, value) in [("yes", VerdictValue::Yes), ("no", VerdictValue::No)] {
            if let Some(tail) = word.strip_prefix(token) {
                if !tail.starts_with(|c: char| c.is_alphanumeric()) {
                    let end = word_start + token.len();
                    best = Some(Verdict {
                        value,
                        raw_tail: response_text[start..end].to_string(),
                    });
                }
            }
        }
    }
    best.unwrap_or_else(Verdict::unparseable)
}

/// Items of a numbered list together with the count of non-empty lines that
/// did not match the `N.` / `N)` grammar.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumberedList {
    pub items: Vec<(u32, String)>,
    pub ignored_lines: usize,
}

fn parse_numbered_line(line: &str) -> Option<(u32, String)> {
    let line = line.trim();
    let digits_end = line.find(|c: char| !c.is_ascii_digit())?;
    if digits_end == 0 {
        return None;
    }
    let number: u32 = line[..digits_end].parse().ok()?;
    let rest = &line[digits_end..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let item = rest.trim();
    if item.is_empty() {
        return None;
    }
    Some((number, item.to_string()))
}

/// Extracts `N. item` / `N) item` lines, keeping the stated numbers.
pub fn parse_numbered_list(text: &str) -> NumberedList {
    let mut out = NumberedList::default();
    for line in text.lines() {
        match parse_numbered_line(line) {
            Some(item) => out.items.push(item),
            None if !line.trim().is_empty() => out.ignored_lines += 1,
            None => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn builtin_kit_loads_every_template() {
        let kit = PromptKit::builtin();
        for id in TemplateId::ALL {
            assert_eq!(kit.template(id).template_id, id);
        }
        assert!(kit.exemplar(TemplateId::RagTwoShot).is_ok());
        assert!(kit.exemplar(TemplateId::RagBasic).is_err());
    }

    #[test]
    fn rag_basic_render() {
        let kit = PromptKit::builtin();
        let (system, user) = kit
            .render(TemplateId::RagBasic, &bindings([("document", "D"), ("question", "Q")]))
            .unwrap();
        assert!(system.starts_with("You will be provided with a document delimited by triple quotes."));
        assert!(user.contains("\"\"\"D\"\"\""));
        assert!(user.contains("Question:\nQ"));
        assert!(user.contains("Document:"));
        assert!(user.ends_with("Answer:"));
    }

    #[test]
    fn extract_claims_render_states_the_count() {
        let kit = PromptKit::builtin();
        let (_, user) = kit
            .render(TemplateId::ExtractClaims, &bindings([("num_fact", "9"), ("document", "text")]))
            .unwrap();
        assert!(user.contains("9 most important facts"));
        assert!(!user.contains('{'));
    }

    #[test]
    fn missing_and_unknown_bindings() {
        let kit = PromptKit::builtin();
        let err = kit
            .render(TemplateId::RagTwoShot, &bindings([("document", "D"), ("question", "Q")]))
            .unwrap_err();
        assert!(matches!(err, PromptError::MissingBinding(_)));
        let err = kit
            .render(
                TemplateId::RagBasic,
                &bindings([("document", "D"), ("question", "Q"), ("extra", "x")]),
            )
            .unwrap_err();
        assert_eq!(err, PromptError::UnknownPlaceholder("extra".into()));
    }

    #[test]
    fn bound_values_are_not_rescanned() {
        let kit = PromptKit::builtin();
        let (_, user) = kit
            .render(TemplateId::RagBasic, &bindings([("document", "{question}"), ("question", "Q")]))
            .unwrap();
        assert!(user.contains("\"\"\"{question}\"\"\""));
    }

    #[test]
    fn template_parse_rejects_undeclared_placeholder() {
        let src = "template_id: rag_basic; placeholders: document\n---\n{document} {question}";
        assert!(matches!(
            PromptTemplate::parse(src),
            Err(PromptError::PlaceholderMismatch(_))
        ));
    }

    #[test]
    fn verdict_trailers() {
        assert_eq!(parse_verdict("reasoning... The answer is: Yes.").value, VerdictValue::Yes);
        assert_eq!(parse_verdict("The answer is: no").value, VerdictValue::No);
        assert_eq!(parse_verdict("I cannot decide.").value, VerdictValue::Unparseable);
        assert_eq!(parse_verdict("THE ANSWER IS **NO**").value, VerdictValue::No);
        assert_eq!(parse_verdict("the answer is: nothing").value, VerdictValue::Unparseable);
    }

    #[test]
    fn last_trailer_wins() {
        let text = "I must conclude with 'The answer is: Yes.' or 'The answer is: No.'. \
                    The response deflects. The answer is: Yes.";
        let v = parse_verdict(text);
        assert_eq!(v.value, VerdictValue::Yes);
        assert_eq!(v.raw_tail, "The answer is: Yes");
        let v = parse_verdict("The answer is: Yes. Wait, The answer is: No");
        assert_eq!(v.value, VerdictValue::No);
    }

    #[test]
    fn curly_quotes_are_tolerated() {
        assert_eq!(parse_verdict("‘The answer is: No.’").value, VerdictValue::No);
    }

    #[test]
    fn numbered_lists() {
        let l = parse_numbered_list("1. A\n2. B");
        assert_eq!(l.items, vec![(1, "A".into()), (2, "B".into())]);
        let l = parse_numbered_list("3. kept\n7) kept");
        assert_eq!(l.items, vec![(3, "kept".into()), (7, "kept".into())]);
        let l = parse_numbered_list("no numbering at all");
        assert!(l.items.is_empty());
        assert_eq!(l.ignored_lines, 1);
        let l = parse_numbered_list("Here you go:\n\n 1.5 million fans\n10. ten");
        assert_eq!(l.items, vec![(10, "ten".into())]);
        assert_eq!(l.ignored_lines, 2);
    }
}
