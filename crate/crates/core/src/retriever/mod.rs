//! BM25 retrieval over a TSV passage corpus.
//!
//! Scoring is Okapi BM25 with a non-negative idf:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! tf_part(t)  = tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg_len))
//! score(q, d) = sum over unique query terms t of idf(t) * tf_part(t)
//! ```
//!
//! Title and body are indexed into one field. The index is immutable after
//! [`SearchIndex::build`] and can be searched from many threads at once.

mod corpus;
mod snapshot;
mod tokenize;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::Document;
use crate::Scalar;

pub use corpus::{read_corpus, read_corpus_file, CorpusLoad, CorpusRecord};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use tokenize::{tokenize, TokenizerOptions};

/// Default per-document character budget when passages are rendered into prompts.
pub const DEFAULT_BODY_CHARS: usize = 1500;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown doc_id {0:?}")]
    UnknownDocId(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<F> {
    pub k1: F,
    pub b: F,
}

impl<F: Scalar> Default for Bm25Params<F> {
    fn default() -> Self {
        Bm25Params {
            k1: F::lit(1.2),
            b: F::lit(0.75),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct StoredDoc {
    pub(crate) id: String,
    pub(crate) title: String,
    pub(crate) body: String,
    pub(crate) len: u32,
}

/// A scored search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<F> {
    pub doc_id: String,
    pub score: F,
}

#[derive(Debug, Clone)]
pub struct SearchIndex<F> {
    params: Bm25Params<F>,
    tokenizer: TokenizerOptions,
    docs: Vec<StoredDoc>,
    ids: HashMap<String, u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    total_len: u64,
    avg_doc_length: F,
}

impl<F: Scalar> SearchIndex<F> {
    pub fn build<I>(records: I, params: Bm25Params<F>, tokenizer: TokenizerOptions) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = CorpusRecord>,
    {
        let mut docs = Vec::new();
        let mut ids = HashMap::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();

        for record in records {
            let doc = u32::try_from(docs.len()).expect("fewer than 2^32 documents");
            if ids.insert(record.doc_id.clone(), doc).is_some() {
                return Err(IndexError::DuplicateDocId(record.doc_id));
            }
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0u32;
            for token in tokenize(&record.title, tokenizer)
                .into_iter()
                .chain(tokenize(&record.body, tokenizer))
            {
                *counts.entry(token).or_default() += 1;
                len += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { doc, tf });
            }
            docs.push(StoredDoc {
                id: record.doc_id,
                title: record.title,
                body: record.body,
                len,
            });
        }
        if docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        Ok(Self::assemble(params, tokenizer, docs, postings))
    }

    pub(crate) fn assemble(
        params: Bm25Params<F>,
        tokenizer: TokenizerOptions,
        docs: Vec<StoredDoc>,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let ids = docs.iter().enumerate().map(|(i, d)| (d.id.clone(), i as u32)).collect();
        let total_len: u64 = docs.iter().map(|d| u64::from(d.len)).sum();
        let avg_doc_length = F::from_u64(total_len).expect("length fits") / F::count(docs.len());
        SearchIndex {
            params,
            tokenizer,
            docs,
            ids,
            postings,
            total_len,
            avg_doc_length,
        }
    }

    pub fn params(&self) -> Bm25Params<F> {
        self.params
    }

    pub fn tokenizer(&self) -> TokenizerOptions {
        self.tokenizer
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> F {
        self.avg_doc_length
    }

    pub fn total_length(&self) -> u64 {
        self.total_len
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.ids.get(doc_id).map(|&i| self.docs[i as usize].len)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.id.as_str())
    }

    pub(crate) fn stored_docs(&self) -> &[StoredDoc] {
        &self.docs
    }

    pub(crate) fn all_postings(&self) -> &BTreeMap<String, Vec<Posting>> {
        &self.postings
    }

    /// Full stored record for `doc_id`.
    pub fn record(&self, doc_id: &str) -> Option<CorpusRecord> {
        self.ids.get(doc_id).map(|&i| {
            let d = &self.docs[i as usize];
            CorpusRecord {
                doc_id: d.id.clone(),
                body: d.body.clone(),
                title: d.title.clone(),
            }
        })
    }

    fn idf(&self, df: usize) -> F {
        let n = F::count(self.docs.len());
        let df = F::count(df);
        let half = F::lit(0.5);
        (F::one() + (n - df + half) / (df + half)).ln()
    }

    fn term_weight(&self, tf: u32, len: u32) -> F {
        let Bm25Params { k1, b } = self.params;
        let tf = F::from_u32(tf).expect("tf fits");
        let rel_len = if self.avg_doc_length > F::zero() {
            F::from_u32(len).expect("len fits") / self.avg_doc_length
        } else {
            F::one()
        };
        tf * (k1 + F::one()) / (tf + k1 * (F::one() - b + b * rel_len))
    }

    fn query_terms(&self, query: &str) -> Vec<String> {
        let mut terms = tokenize(query, self.tokenizer);
        terms.sort();
        terms.dedup();
        terms
    }

    /// BM25 score of one document for `query`.
    pub fn score(&self, query: &str, doc_id: &str) -> Result<F, IndexError> {
        let &doc = self
            .ids
            .get(doc_id)
            .ok_or_else(|| IndexError::UnknownDocId(doc_id.to_string()))?;
        let len = self.docs[doc as usize].len;
        let mut total = F::zero();
        for term in self.query_terms(query) {
            let postings = self.postings(&term);
            if let Ok(pos) = postings.binary_search_by_key(&doc, |p| p.doc) {
                total = total + self.idf(postings.len()) * self.term_weight(postings[pos].tf, len);
            }
        }
        Ok(total)
    }

    /// Top `k` documents sharing at least one term with `query`, by score
    /// descending and then doc_id ascending.
    pub fn search(&self, query: &str, k: usize) -> Vec<Hit<F>> {
        if k == 0 {
            return Vec::new();
        }
        let mut scores: HashMap<u32, F> = HashMap::new();
        for term in self.query_terms(query) {
            let postings = self.postings(&term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let w = idf * self.term_weight(p.tf, self.docs[p.doc as usize].len);
                let entry = scores.entry(p.doc).or_insert_with(F::zero);
                *entry = *entry + w;
            }
        }
        let mut hits: Vec<(u32, F)> = scores.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.docs[a.0 as usize].id.cmp(&self.docs[b.0 as usize].id))
        });
        hits.truncate(k);
        hits.into_iter()
            .map(|(doc, score)| Hit {
                doc_id: self.docs[doc as usize].id.clone(),
                score,
            })
            .collect()
    }
}

/// Source of passages for the reasoning loop.
pub trait Retriever: Send + Sync {
    /// Top `k` documents for `query`, with full bodies.
    fn retrieve(&self, query: &str, k: usize) -> Vec<Document>;
}

impl<F: Scalar> Retriever for SearchIndex<F> {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Document> {
        self.search(query, k)
            .into_iter()
            .map(|hit| {
                let d = &self.docs[self.ids[&hit.doc_id] as usize];
                Document {
                    doc_id: hit.doc_id,
                    title: d.title.clone(),
                    body: d.body.clone(),
                    score: hit.score.as_f64(),
                }
            })
            .collect()
    }
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Document> {
        (**self).retrieve(query, k)
    }
}

/// Wraps a retriever and counts calls.
pub struct CountingRetriever<R> {
    inner: R,
    calls: AtomicUsize,
}

impl<R> CountingRetriever<R> {
    pub fn new(inner: R) -> Self {
        CountingRetriever {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<R: Retriever> Retriever for CountingRetriever<R> {
    fn retrieve(&self, query: &str, k: usize) -> Vec<Document> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.retrieve(query, k)
    }
}

/// Retrieves `k` passages and prepares them for prompt rendering: each body
/// is flattened onto one line and cut to `body_chars` characters.
pub fn fetch_passages(retriever: &dyn Retriever, query: &str, k: usize, body_chars: usize) -> Vec<Document> {
    retriever
        .retrieve(query, k)
        .into_iter()
        .map(|mut d| {
            d.body = prompt_body(&d.body, body_chars);
            d
        })
        .filter(|d| !d.body.is_empty())
        .collect()
}

/// One-line, length-capped rendering of a passage body.
pub fn prompt_body(body: &str, body_chars: usize) -> String {
    let flat: String = body
        .split(['\n', '\r', '\t'])
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let cut: String = flat.chars().take(body_chars).collect();
    cut.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(id: &str, title: &str, body: &str) -> CorpusRecord {
        CorpusRecord {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    fn three() -> Vec<CorpusRecord> {
        vec![
            rec(
                "1",
                "Inception",
                "Inception is a 2010 film directed by Christopher Nolan.",
            ),
            rec(
                "2",
                "Christopher Nolan",
                "Christopher Nolan was born in London in 1970.",
            ),
            rec("3", "London", "London is the capital of England."),
        ]
    }

    #[test]
    fn build_counts_documents() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        assert_eq!(idx.doc_count(), 3);
        let lens: Vec<u32> = ["1", "2", "3"].iter().map(|id| idx.doc_length(id).unwrap()).collect();
        let mean = lens.iter().map(|&l| f64::from(l)).sum::<f64>() / 3.0;
        assert_relative_eq!(idx.avg_doc_length(), mean, max_relative = 1e-9);
    }

    #[test]
    fn duplicate_and_empty_corpus() {
        let mut records = three();
        records.push(rec("2", "dup", "dup"));
        match SearchIndex::<f64>::build(records, Bm25Params::default(), TokenizerOptions::default()) {
            Err(IndexError::DuplicateDocId(id)) => assert_eq!(id, "2"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            SearchIndex::<f64>::build(Vec::new(), Bm25Params::default(), TokenizerOptions::default()),
            Err(IndexError::EmptyCorpus)
        ));
    }

    #[test]
    fn no_overlap_returns_nothing() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        assert!(idx.search("zebra quantum", 5).is_empty());
        assert!(idx.search("", 5).is_empty());
    }

    #[test]
    fn single_document_first_word() {
        let idx = SearchIndex::<f64>::build(
            vec![rec("only", "", "Paris is the capital of France")],
            Bm25Params::default(),
            TokenizerOptions::default(),
        )
        .unwrap();
        let hits = idx.search("Paris", 3);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "only");
    }

    #[test]
    fn single_doc_closed_form() {
        // one document, one query term with tf 1 and len == avglen
        let idx = SearchIndex::<f64>::build(
            vec![rec("d", "", "nolan")],
            Bm25Params::default(),
            TokenizerOptions::default(),
        )
        .unwrap();
        let expected = (1.0f64 + 0.5 / 1.5).ln() * (1.0 * 2.2) / (1.0 + 1.2);
        assert_relative_eq!(idx.score("nolan", "d").unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, (4.0f64 / 3.0).ln(), max_relative = 1e-12);

        let idx32 = SearchIndex::<f32>::build(
            vec![rec("d", "", "nolan")],
            Bm25Params::default(),
            TokenizerOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(
            idx32.score("nolan", "d").unwrap(),
            (4.0f32 / 3.0).ln(),
            max_relative = 1e-6
        );
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        let base = idx.score("london", "3").unwrap();
        assert_eq!(idx.score("london zebra", "3").unwrap(), base);
        assert_eq!(idx.score("inception", "3").unwrap(), 0.0);
    }

    #[test]
    fn unknown_doc_id() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        assert!(matches!(idx.score("x", "nope"), Err(IndexError::UnknownDocId(_))));
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = SearchIndex::<f64>::build(
            vec![
                rec("b", "", "same words"),
                rec("a", "", "same words"),
                rec("c", "", "other"),
            ],
            Bm25Params::default(),
            TokenizerOptions::default(),
        )
        .unwrap();
        let ids: Vec<_> = idx.search("same", 5).into_iter().map(|h| h.doc_id).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn search_respects_k_and_order() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        let hits = idx.search("Christopher Nolan London", 2);
        assert_eq!(hits.len(), 2);
        assert!(hits[0].score >= hits[1].score);
        assert_eq!(hits[0].doc_id, "2");
        assert!(idx.search("london", 0).is_empty());
    }

    #[test]
    fn passages_are_flattened_and_cut() {
        assert_eq!(prompt_body("a\nb\tc", 100), "a b c");
        assert_eq!(prompt_body("abcdef", 3), "abc");
        assert_eq!(prompt_body("héllo wörld", 4), "héll");
    }

    #[test]
    fn counting_wrapper_counts() {
        let idx = SearchIndex::<f64>::build(three(), Bm25Params::default(), TokenizerOptions::default()).unwrap();
        let counting = CountingRetriever::new(&idx);
        assert_eq!(counting.calls(), 0);
        let docs = fetch_passages(&counting, "london", 3, 20);
        assert_eq!(counting.calls(), 1);
        assert!(docs.iter().all(|d| d.body.chars().count() <= 20));
    }
}
