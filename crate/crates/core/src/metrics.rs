//! Answer scoring, retrieval efficiency, knowledge-boundary calibration and
//! decomposition statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InferenceResult;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no records to score")]
    EmptyInput,
}

/// SQuAD-style normalization: lowercase, drop punctuation and the articles
/// a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punctuation(*c))
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        c,
        '‘' | '’' | '“' | '”' | '\u{2013}' | '\u{2014}' | '…' | '«' | '»' | '¿' | '¡'
    )
}

pub fn exact_match(pred: &str, golds: &[String]) -> bool {
    let p = normalize_answer(pred);
    golds.iter().any(|g| normalize_answer(g) == p)
}

fn f1_single<F: Scalar>(pred: &str, gold: &str) -> F {
    let pred_norm = normalize_answer(pred);
    let gold_norm = normalize_answer(gold);
    let p: Vec<&str> = pred_norm.split_whitespace().collect();
    let g: Vec<&str> = gold_norm.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() {
            F::one()
        } else {
            F::zero()
        };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return F::zero();
    }
    let precision = F::count(common) / F::count(p.len());
    let recall = F::count(common) / F::count(g.len());
    F::lit(2.0) * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1, maximized over gold aliases.
pub fn token_f1<F: Scalar>(pred: &str, golds: &[String]) -> F {
    golds.iter().map(|g| f1_single::<F>(pred, g)).fold(F::zero(), F::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats<F> {
    pub em: F,
    pub avg_retrievals_all: F,
    /// Absent when no result was correct.
    pub avg_retrievals_correct: Option<F>,
    /// Absent when every result was correct.
    pub avg_retrievals_incorrect: Option<F>,
    pub avg_seconds_per_item: F,
}

fn mean<F: Scalar>(values: impl Iterator<Item = F>) -> Option<F> {
    let (sum, n) = values.fold((F::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / F::count(n))
}

pub fn retrieval_stats<F: Scalar>(results: &[(&InferenceResult, bool)]) -> Result<RetrievalStats<F>, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let counts = |want: Option<bool>| {
        results
            .iter()
            .filter(move |(_, c)| want.is_none_or(|w| *c == w))
            .map(|(r, _)| F::count(r.n_retrievals))
    };
    Ok(RetrievalStats {
        em: F::count(results.iter().filter(|(_, c)| *c).count()) / F::count(results.len()),
        avg_retrievals_all: mean(counts(None)).expect("non-empty"),
        avg_retrievals_correct: mean(counts(Some(true))),
        avg_retrievals_incorrect: mean(counts(Some(false))),
        avg_seconds_per_item: mean(results.iter().map(|(r, _)| F::lit(r.wall_time))).expect("non-empty"),
    })
}

/// Per-question calibration record. The positive class is "retrieval required".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub needs_retrieval: bool,
    pub did_retrieve: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_records(records: &[BoundaryRecord]) -> Self {
        records.iter().fold(Confusion::default(), |mut c, r| {
            match (r.needs_retrieval, r.did_retrieve) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
            c
        })
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Shards combine by addition.
    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStats<F> {
    pub f1: F,
    pub accuracy: F,
    pub balanced_accuracy: F,
    pub mcc: F,
    pub confusion: Confusion,
}

impl<F: Scalar> BoundaryStats<F> {
    /// Degenerate denominators give 0 for F1 and MCC, and an undefined rate
    /// contributes 0.5 to balanced accuracy.
    pub fn from_confusion(c: Confusion) -> Result<Self, MetricsError> {
        let n = c.total();
        if n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let [tp, fp, tn, fn_] = [c.tp, c.fp, c.tn, c.fn_].map(F::count);
        let f1_den = F::lit(2.0) * tp + fp + fn_;
        let f1 = if f1_den > F::zero() {
            F::lit(2.0) * tp / f1_den
        } else {
            F::zero()
        };
        let rate = |num: F, den: F| if den > F::zero() { num / den } else { F::lit(0.5) };
        let tpr = rate(tp, tp + fn_);
        let tnr = rate(tn, tn + fp);
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        let mcc = if factors.iter().any(|f| *f == F::zero()) {
            F::zero()
        } else {
            let den = factors.iter().fold(F::one(), |acc, f| acc * *f).sqrt();
            (tp * tn - fp * fn_) / den
        };
        Ok(BoundaryStats {
            f1,
            accuracy: (tp + tn) / F::count(n),
            balanced_accuracy: (tpr + tnr) / F::lit(2.0),
            mcc,
            confusion: c,
        })
    }
}

pub fn boundary_metrics<F: Scalar>(records: &[BoundaryRecord]) -> Result<BoundaryStats<F>, MetricsError> {
    BoundaryStats::from_confusion(Confusion::from_records(records))
}

/// Pairs adaptive results with a parametric-only companion run by question
/// id. A question needs retrieval when the parametric-only answer is wrong.
pub fn boundary_records(
    adaptive: &[(&InferenceResult, bool)],
    parametric: &[(&InferenceResult, bool)],
) -> Vec<BoundaryRecord> {
    let needs: HashMap<&str, bool> = parametric
        .iter()
        .map(|(r, correct)| (r.question_id.as_str(), !*correct))
        .collect();
    adaptive
        .iter()
        .filter_map(|(r, _)| {
            needs
                .get(r.question_id.as_str())
                .map(|&needs_retrieval| BoundaryRecord {
                    needs_retrieval,
                    did_retrieve: r.n_retrievals >= 1,
                })
        })
        .collect()
}

pub const SUBQUERY_BUCKETS: [&str; 7] = ["0", "1", "2", "3", "4", "5", ">=6"];
pub const RETRIEVAL_BUCKETS: [&str; 4] = ["0", "1", "2", ">=3"];

const WH_WORDS: [&str; 9] = ["who", "what", "when", "where", "which", "why", "whose", "whom", "how"];
const CONJUNCTIONS: [&str; 2] = ["and", "or"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionStats<F> {
    /// Counts for buckets [`SUBQUERY_BUCKETS`].
    pub subquery_histogram: Vec<(String, usize)>,
    /// Counts for buckets [`RETRIEVAL_BUCKETS`].
    pub retrieval_histogram: Vec<(String, usize)>,
    pub avg_wh_words: F,
    pub avg_conjunctions: F,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// WH-word and and/or counts for one subquery.
pub fn word_counts(subquery: &str) -> (usize, usize) {
    words(subquery).fold((0, 0), |(wh, conj), w| {
        (
            wh + usize::from(WH_WORDS.contains(&w.as_str())),
            conj + usize::from(CONJUNCTIONS.contains(&w.as_str())),
        )
    })
}

fn histogram(labels: &[&str], values: impl Iterator<Item = usize>) -> Vec<(String, usize)> {
    let mut counts = vec![0usize; labels.len()];
    for v in values {
        counts[v.min(labels.len() - 1)] += 1;
    }
    labels.iter().map(|l| l.to_string()).zip(counts).collect()
}

pub fn decomposition_stats<F: Scalar>(results: &[&InferenceResult]) -> Result<DecompositionStats<F>, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let subqueries: Vec<&str> = results
        .iter()
        .flat_map(|r| r.trajectory.steps.iter().map(|s| s.subquery.as_str()))
        .collect();
    let (wh, conj) = subqueries
        .iter()
        .map(|q| word_counts(q))
        .fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    let per_subquery = |n: usize| {
        if subqueries.is_empty() {
            F::zero()
        } else {
            F::count(n) / F::count(subqueries.len())
        }
    };
    Ok(DecompositionStats {
        subquery_histogram: histogram(&SUBQUERY_BUCKETS, results.iter().map(|r| r.n_subqueries)),
        retrieval_histogram: histogram(&RETRIEVAL_BUCKETS, results.iter().map(|r| r.n_retrievals)),
        avg_wh_words: per_subquery(wh),
        avg_conjunctions: per_subquery(conj),
    })
}

/// Everything the `report` command prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<F> {
    pub mode: Option<String>,
    pub questions: usize,
    pub failed: usize,
    pub em: F,
    pub f1: F,
    pub retrieval: RetrievalStats<F>,
    pub boundary: Option<BoundaryStats<F>>,
    pub decomposition: DecompositionStats<F>,
}

/// A scored result: inference output plus its gold answers.
pub struct Scored<'a> {
    pub result: &'a InferenceResult,
    pub golds: &'a [String],
}

impl<'a> Scored<'a> {
    pub fn correct(&self) -> bool {
        !self.result.failed && exact_match(&self.result.final_answer, self.golds)
    }
}

impl<F: Scalar> Report<F> {
    pub fn build(
        mode: Option<String>,
        results: &[Scored<'_>],
        parametric_companion: Option<&[Scored<'_>]>,
    ) -> Result<Self, MetricsError> {
        if results.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let judged: Vec<(&InferenceResult, bool)> = results.iter().map(|s| (s.result, s.correct())).collect();
        let f1 = mean(results.iter().map(|s| {
            if s.result.failed {
                F::zero()
            } else {
                token_f1::<F>(&s.result.final_answer, s.golds)
            }
        }))
        .expect("non-empty");
        let retrieval = retrieval_stats::<F>(&judged)?;
        let boundary = match parametric_companion {
            Some(companion) => {
                let companion: Vec<(&InferenceResult, bool)> =
                    companion.iter().map(|s| (s.result, s.correct())).collect();
                let records = boundary_records(&judged, &companion);
                Some(boundary_metrics::<F>(&records)?)
            }
            None => None,
        };
        let plain: Vec<&InferenceResult> = judged.iter().map(|(r, _)| *r).collect();
        Ok(Report {
            mode,
            questions: results.len(),
            failed: results.iter().filter(|s| s.result.failed).count(),
            em: retrieval.em,
            f1,
            retrieval,
            boundary,
            decomposition: decomposition_stats::<F>(&plain)?,
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<F>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(out, "mode                      {}", self.mode.as_deref().unwrap_or("-"));
        let _ = writeln!(
            out,
            "questions                 {} ({} failed)",
            self.questions, self.failed
        );
        let _ = writeln!(out, "EM                        {:.4}", self.em);
        let _ = writeln!(out, "F1                        {:.4}", self.f1);
        let _ = writeln!(
            out,
            "avg retrievals (all)      {:.3}",
            self.retrieval.avg_retrievals_all
        );
        let _ = writeln!(
            out,
            "avg retrievals (correct)  {}",
            opt(self.retrieval.avg_retrievals_correct)
        );
        let _ = writeln!(
            out,
            "avg retrievals (wrong)    {}",
            opt(self.retrieval.avg_retrievals_incorrect)
        );
        let _ = writeln!(
            out,
            "avg seconds per item      {:.4}",
            self.retrieval.avg_seconds_per_item
        );
        if let Some(b) = &self.boundary {
            let c = b.confusion;
            let _ = writeln!(
                out,
                "boundary F1/Acc/BAcc/MCC  {:.3} / {:.3} / {:.3} / {:.3}  (tp {} fp {} tn {} fn {})",
                b.f1, b.accuracy, b.balanced_accuracy, b.mcc, c.tp, c.fp, c.tn, c.fn_
            );
        }
        let hist = |h: &[(String, usize)]| h.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ");
        let d = &self.decomposition;
        let _ = writeln!(out, "subqueries per question   {}", hist(&d.subquery_histogram));
        let _ = writeln!(out, "retrievals per question   {}", hist(&d.retrieval_histogram));
        let _ = writeln!(out, "WH-words per subquery     {:.3}", d.avg_wh_words);
        let _ = writeln!(out, "and/or per subquery       {:.3}", d.avg_conjunctions);
        out
    }
}
