//! Document admission: sentence splitting, the length filter and
//! sentence-prefix truncation.
//!
//! A word is a maximal run of non-whitespace characters. A sentence ends
//! after a word whose last character is `.`, `!` or `?`; there is no
//! abbreviation list, so `"Dr. Smith"` splits after `"Dr."`.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::text::{collapse_whitespace, word_count};

/// Documents must have strictly more words than this to be admitted.
pub const DEFAULT_MIN_WORDS: usize = 150;
/// Truncation stops at the first sentence boundary past this many words.
pub const DEFAULT_CAP: usize = 300;

/// The ten news categories of the reference corpus.
pub const NEWS_TOPICS: [&str; 10] = [
    "business",
    "entertainment",
    "food",
    "music",
    "news",
    "politics",
    "science",
    "sport",
    "tech",
    "travel",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub topic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_at: Option<String>,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("document rejected: {word_count} words is not more than the minimum")]
    Rejected { word_count: usize },
    #[error("invalid length bounds: min_words {min_words} must be below cap {cap}")]
    InvalidBounds { min_words: usize, cap: usize },
}

/// Result of [`truncate_document`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncated {
    pub text: String,
    pub word_count: usize,
    /// Set when the source exceeded the cap but had no interior sentence
    /// boundary to cut at, so it was kept whole.
    pub kept_whole_over_cap: bool,
}

/// Splits `raw` into sentences. Inter-word whitespace inside each sentence is
/// collapsed to a single space.
pub fn split_sentences(raw: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for word in raw.split_whitespace() {
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(word);
        if word.ends_with(['.', '!', '?']) {
            sentences.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// Applies the length filter and truncates to the shortest sentence prefix
/// whose word count exceeds `cap`.
pub fn truncate_document(raw: &str, min_words: usize, cap: usize) -> Result<Truncated, CorpusError> {
    if min_words >= cap {
        return Err(CorpusError::InvalidBounds { min_words, cap });
    }
    let total = word_count(raw);
    if total <= min_words {
        return Err(CorpusError::Rejected { word_count: total });
    }
    if total <= cap {
        return Ok(Truncated {
            text: collapse_whitespace(raw),
            word_count: total,
            kept_whole_over_cap: false,
        });
    }

    let sentences = split_sentences(raw);
    let mut kept = 0usize;
    let mut words = 0usize;
    for sentence in &sentences {
        kept += 1;
        words += word_count(sentence);
        if words > cap {
            break;
        }
    }
    Ok(Truncated {
        text: sentences[..kept].join(" "),
        word_count: words,
        kept_whole_over_cap: sentences.len() == 1,
    })
}

impl Document {
    /// Builds an admitted document from a raw record.
    ///
    /// The boolean is the `kept_whole_over_cap` warning from truncation.
    pub fn admit(
        doc_id: String,
        topic: String,
        published_at: Option<String>,
        raw_text: &str,
        min_words: usize,
        cap: usize,
    ) -> Result<(Document, bool), CorpusError> {
        let truncated = truncate_document(raw_text, min_words, cap)?;
        Ok((
            Document {
                doc_id,
                topic,
                published_at,
                text: truncated.text,
                word_count: truncated.word_count,
            },
            truncated.kept_whole_over_cap,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn words(n: usize, tag: &str) -> String {
        let mut s = String::new();
        for i in 0..n {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&format!("{tag}{i}"));
        }
        s
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        assert_eq!(split_sentences("A b. C d!"), vec!["A b.", "C d!"]);
        assert_eq!(
            split_sentences("No terminal punctuation"),
            vec!["No terminal punctuation"]
        );
        assert_eq!(
            split_sentences("Dr. Smith ran. He won."),
            vec!["Dr.", "Smith ran.", "He won."]
        );
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n\t").is_empty());
    }

    #[test]
    fn punctuation_inside_a_word_is_not_a_boundary() {
        assert_eq!(split_sentences("v1.2 is out? yes"), vec!["v1.2 is out?", "yes"]);
    }

    #[test]
    fn rejects_at_exactly_min_words() {
        let raw = words(150, "w");
        assert_eq!(
            truncate_document(&raw, 150, 300),
            Err(CorpusError::Rejected { word_count: 150 })
        );
        assert!(truncate_document(&words(151, "w"), 150, 300).is_ok());
    }

    #[test]
    fn keeps_sub_cap_documents_whole() {
        let raw = words(280, "w");
        let t = truncate_document(&raw, 150, 300).unwrap();
        assert_eq!(t.word_count, 280);
        assert_eq!(t.text, raw);
        assert!(!t.kept_whole_over_cap);
    }

    #[test]
    fn five_sentences_of_eighty_words_keep_four() {
        let raw: Vec<String> = (0..5).map(|i| format!("{}.", words(80, &format!("s{i}w")))).collect();
        let raw = raw.join("  \n");
        let t = truncate_document(&raw, 150, 300).unwrap();
        assert_eq!(t.word_count, 320);
        assert_eq!(split_sentences(&t.text).len(), 4);
        assert!(t.text.ends_with("s3w79."));
    }

    #[test]
    fn unsplittable_long_document_is_kept_whole_with_flag() {
        let raw = words(420, "w");
        let t = truncate_document(&raw, 150, 300).unwrap();
        assert_eq!(t.word_count, 420);
        assert!(t.kept_whole_over_cap);
    }

    #[test]
    fn invalid_bounds() {
        assert_eq!(
            truncate_document("a", 300, 300),
            Err(CorpusError::InvalidBounds { min_words: 300, cap: 300 })
        );
    }
}
