use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Tokenizer switches. Both are off by default: tokens are lowercased runs
/// of alphanumeric characters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizerOptions {
    #[serde(default)]
    pub stopwords: bool,
    #[serde(default)]
    pub stemming: bool,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "he", "in", "is", "it", "its", "of", "on",
    "or", "that", "the", "to", "was", "were", "will", "with",
];

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn tokenize(text: &str, options: TokenizerOptions) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !options.stopwords || STOPWORDS.binary_search(&t.as_str()).is_err())
        .map(|t| {
            if options.stemming {
                stemmer().stem(&t).into_owned()
            } else {
                t
            }
        })
        .collect()
}
