//! Tokenization shared by the keyword matcher, the reference metrics and the
//! diversity distances.

/// Lowercased alphanumeric runs; everything else separates words.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Lowercased words grouped into clauses. Phrase matches never cross a
/// clause boundary (sentence or clause punctuation).
pub fn clauses(s: &str) -> Vec<Vec<String>> {
    s.split(is_clause_break)
        .map(tokenize)
        .filter(|c| !c.is_empty())
        .collect()
}

fn is_clause_break(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '[' | ']' | '{' | '}' | '"' | '\n' | '\r')
}

/// Lowercase and collapse whitespace/punctuation into single spaces.
pub fn normalize_phrase(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Collapses runs of whitespace to a single space and trims.
pub fn squash_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "by", "for", "with", "from", "into", "over",
    "as", "is", "are", "was", "were", "be", "been", "will", "would", "may", "might", "can", "could", "should", "it",
    "its", "this", "that", "these", "those", "there", "then", "than", "so", "some", "any", "up", "out", "off", "also",
    "which", "who", "they", "their", "we", "our", "has", "have", "had", "do", "does", "not", "no",
];

/// Tokens that carry content, i.e. not in the function-word list.
pub fn content_words(s: &str) -> Vec<String> {
    tokenize(s).into_iter().filter(|w| !STOPWORDS.contains(&w.as_str())).collect()
}
