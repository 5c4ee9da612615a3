//! Text normalization and tokenization shared by retrieval, routing and evaluation.

use std::collections::HashSet;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Small English stopword list used by the groundedness check of the focus skill.
const STOPWORDS: &[&str] = &[
    "a", "about", "after", "an", "and", "any", "are", "as", "at", "be", "before", "by", "can",
    "come", "comes", "did", "do", "does", "for", "from", "had", "has", "have", "how", "i", "in",
    "into", "is", "it", "its", "of", "on", "or", "out", "than", "that", "the", "their", "then",
    "there", "these", "this", "those", "to", "was", "were", "what", "when", "where", "which",
    "who", "whom", "whose", "why", "will", "with",
];

/// SQuAD-style answer normalization.
///
/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, removes the articles `a`, `an`, `the` as whole words and
/// collapses whitespace to single spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase, split on anything that is not alphanumeric. No stemming, no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Tokens of `text` with stopwords removed.
pub fn content_tokens(text: &str) -> HashSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}
