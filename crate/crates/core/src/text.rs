use alloc::string::String;
use core::fmt::Write;

/// Number of maximal non-whitespace runs.
pub(crate) fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub(crate) fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (i, word) in text.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Renders `(number, text)` pairs as `"1. text\n2. text"`.
pub(crate) fn numbered_list<'a, I>(items: I) -> String
where
    I: IntoIterator<Item = (usize, &'a str)>,
{
    let mut out = String::new();
    for (i, (number, item)) in items.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{number}. {item}");
    }
    out
}
