//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero when any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use adarag::gateway::protocol::{
    parse_transcript, render_transcript, DEFAULT_INSTRUCTION, FINAL_ANSWER, INTERMEDIATE_ANSWER, RETRIEVE_MARKER,
};
use adarag::gateway::{Gateway, ModelRoles, ScriptedModel};
use adarag::inference::{self, InferenceMode, InferenceResult};
use adarag::mdp::rl_shaped_reward;
use adarag::metrics::{boundary_metrics, exact_match, token_f1, BoundaryRecord};
use adarag::retriever::{read_snapshot, write_snapshot, CorpusRecord, CountingRetriever, TokenizerOptions};
use adarag::search::{enumerate_all, min_correct_retrievals, synthesize, SearchBudget, SearchConfig, SelectionPolicy};
use adarag::synthesis::{build_preference_pairs, to_imitation_example, ImitationExample};
use adarag::world::World;
use adarag::{Bm25Params, Document, QAInstance, Response, SearchIndex, State, Trajectory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const SUITE_SIZE: u64 = 120;
const QUESTIONS_PER_WORLD: usize = 3;

struct Fixture {
    world: World,
    config: SearchConfig,
    index: SearchIndex,
    roles: ModelRoles,
}

impl Fixture {
    fn new(world: World, max_depth: usize) -> Self {
        let config = SearchConfig {
            budget: SearchBudget {
                max_depth,
                ..SearchBudget::default()
            },
            ..SearchConfig::default()
        };
        let index = world.index();
        let script = world.script(&index, &config);
        let model = ScriptedModel::from_entries(script).expect("consistent script");
        let roles = ModelRoles::shared(Arc::new(Gateway::new(Arc::new(model))));
        Fixture {
            world,
            config,
            index,
            roles,
        }
    }

    fn instances(&self) -> Vec<Arc<QAInstance>> {
        self.world.instances()
    }
}

/// Randomized worlds with depth caps 1..=4, plus the demo world at depth 4.
fn build_suite() -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00ac_ce97);
    let mut suite: Vec<Fixture> = (0..SUITE_SIZE)
        .map(|seed| Fixture::new(World::random(seed, QUESTIONS_PER_WORLD), rng.gen_range(1..=4)))
        .collect();
    suite.push(Fixture::new(World::demo(), 4));
    suite
}

static SUITE: OnceLock<(Vec<Fixture>, Duration)> = OnceLock::new();

fn suite() -> &'static (Vec<Fixture>, Duration) {
    SUITE.get_or_init(|| {
        let start = Instant::now();
        let suite = build_suite();
        (suite, start.elapsed())
    })
}

fn optimal(f: &Fixture, q: &Arc<QAInstance>) -> Result<Option<Trajectory>, String> {
    synthesize(Arc::clone(q), &f.roles, &f.index, &f.config, SelectionPolicy::Minimal)
        .map(|o| o.trajectory)
        .map_err(|e| format!("{}: {e}", q.id))
}

fn optimality() -> Outcome {
    let start = Instant::now();
    let (suite, build_time) = suite();
    let mut cases = 0;
    let mut found = 0;
    let mut mismatches = Vec::new();
    for f in suite {
        for (q, wq) in f.instances().iter().zip(&f.world.questions) {
            cases += 1;
            let got = optimal(f, q)?;
            if got
                .as_ref()
                .is_some_and(|t| t.correct != Some(true) || !exact_match(&t.final_answer, &q.gold_answers))
            {
                mismatches.push(format!("{} returned an incorrect trajectory", q.id));
            }
            let got = got.map(|t| t.retrieval_count);
            let tree = enumerate_all(Arc::clone(q), &f.roles, &f.index, &f.config).map_err(|e| e.to_string())?;
            let oracle = min_correct_retrievals(&tree);
            let analytic = wq.expected_min_retrievals(f.config.budget.max_depth);
            if got != oracle || oracle != analytic {
                mismatches.push(format!(
                    "{}: search {got:?}, enumeration {oracle:?}, analytic {analytic:?}",
                    q.id
                ));
            }
            found += usize::from(got.is_some());
        }
    }
    let elapsed = start.elapsed() + *build_time;
    let detail = format!(
        "{} fixtures, {cases} questions ({found} with a correct trajectory), {} mismatches, {:.2}s",
        suite.len(),
        mismatches.len(),
        elapsed.as_secs_f64()
    );
    if !mismatches.is_empty() {
        return Err(format!("{detail}; first: {}", mismatches[0]));
    }
    if suite.len() < 100 {
        return Err(format!("{detail}; fewer than 100 fixtures"));
    }
    if elapsed >= Duration::from_secs(10) {
        return Err(format!("{detail}; over the 10 s limit"));
    }
    Ok(detail)
}

fn monotonicity() -> Outcome {
    let (suite, _) = suite();
    let mut checked = 0;
    let mut violations: HashMap<&str, Vec<String>> = HashMap::new();
    for f in suite {
        for q in f.instances() {
            checked += 1;
            for (name, policy) in [("minimal", SelectionPolicy::Minimal), ("most", SelectionPolicy::Most)] {
                let out =
                    synthesize(Arc::clone(&q), &f.roles, &f.index, &f.config, policy).map_err(|e| e.to_string())?;
                let counts = out.log.dequeued_counts();
                let ok = counts.windows(2).all(|w| match policy {
                    SelectionPolicy::Most => w[0] >= w[1],
                    _ => w[0] <= w[1],
                });
                if !ok {
                    violations.entry(name).or_default().push(format!("{} {counts:?}", q.id));
                }
            }
        }
    }
    let count = |name| violations.get(name).map_or(0, Vec::len);
    let detail = format!(
        "{checked} questions; minimal non-decreasing violations: {}; most non-increasing violations: {}",
        count("minimal"),
        count("most")
    );
    if violations.is_empty() {
        Ok(detail)
    } else {
        let example = violations
            .get("minimal")
            .or_else(|| violations.get("most"))
            .and_then(|v| v.first())
            .cloned()
            .unwrap_or_default();
        Err(format!("{detail}; e.g. {example}"))
    }
}

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "te", "vi", "zo", "é", "qu", "ph"];

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| {
            (0..rng.gen_range(1..=3))
                .map(|_| *SYLLABLES.choose(rng).unwrap())
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_trajectory(rng: &mut ChaCha8Rng, id: usize, pool: &[Document]) -> Trajectory {
    let question = format!("{}, and {}?", pseudo_words(rng, 4), pseudo_words(rng, 2));
    let instance = Arc::new(QAInstance::new(format!("rt-{id}"), question, vec![pseudo_words(rng, 1)]).unwrap());
    let depth = rng.gen_range(0..=6);
    let mut state = State::new(instance, 6);
    for _ in 0..depth {
        let subquery = format!("Which {} of the {}?", pseudo_words(rng, 2), pseudo_words(rng, 2));
        let words = rng.gen_range(1..=3);
        let answer = pseudo_words(rng, words);
        let response = if rng.gen_bool(0.5) {
            let k = rng.gen_range(1..=3);
            Response::retrieved(pool.choose_multiple(rng, k).cloned().collect(), answer)
        } else {
            Response::parametric(answer)
        };
        state = state.append_step(subquery, response).unwrap();
    }
    let words = rng.gen_range(1..=3);
    let final_answer = pseudo_words(rng, words);
    Trajectory::new(state, final_answer)
}

fn document_pool(rng: &mut ChaCha8Rng) -> Vec<Document> {
    (0..40)
        .map(|i| Document {
            doc_id: format!("doc-{i}"),
            title: pseudo_words(rng, 1),
            body: format!(
                "{} \"{}\" ({}) ends: {}.",
                pseudo_words(rng, 6),
                pseudo_words(rng, 2),
                i,
                pseudo_words(rng, 3)
            ),
            score: 1.0,
        })
        .collect()
}

fn protocol_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e01);
    let pool = document_pool(&mut rng);
    let by_body: HashMap<&str, &str> = pool.iter().map(|d| (d.body.as_str(), d.doc_id.as_str())).collect();
    let mut mismatches = Vec::new();
    let mut steps = 0;
    for i in 0..100 {
        let traj = random_trajectory(&mut rng, i, &pool);
        steps += traj.steps().len();
        let text = format!(
            "{}\n{FINAL_ANSWER} {}",
            render_transcript(&traj.state),
            traj.final_answer
        );
        let parsed = match parse_transcript(&text) {
            Ok(p) => p,
            Err(e) => {
                mismatches.push(format!("rt-{i}: {e}"));
                continue;
            }
        };
        let mut ok = parsed.question == traj.question().question
            && parsed.final_answer.as_deref() == Some(traj.final_answer.as_str())
            && parsed.steps.len() == traj.steps().len();
        for (p, s) in parsed.steps.iter().zip(traj.steps()) {
            ok &= p.subquery == s.subquery && p.answer == s.response.answer();
            ok &= p.passages.is_some() == s.response.is_retrieved();
            if let Some(passages) = &p.passages {
                let ids: Option<BTreeSet<&str>> = passages.iter().map(|b| by_body.get(b.as_str()).copied()).collect();
                let expected: BTreeSet<&str> = s.response.documents().iter().map(|d| d.doc_id.as_str()).collect();
                ok &= ids == Some(expected);
            }
        }
        if !ok {
            mismatches.push(format!("rt-{i}"));
        }
    }
    let detail = format!("100 trajectories, {steps} steps, {} mismatches", mismatches.len());
    if mismatches.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", mismatches[0]))
    }
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

fn check_example(example: &ImitationExample, traj: &Trajectory) -> Vec<String> {
    let mut problems = Vec::new();
    let payloads: Vec<String> = traj
        .steps()
        .iter()
        .filter(|s| s.response.is_retrieved())
        .map(|s| {
            s.response
                .documents()
                .iter()
                .map(|d| d.body.as_str())
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect();
    if example.masked() != payloads {
        problems.push("masked text differs from the document bodies".to_string());
    }
    // Locate each payload by plain string search, independent of the renderer.
    let mut cursor = 0;
    for (payload, span) in payloads.iter().zip(&example.mask_spans) {
        match example.completion[cursor..].find(&format!("Context: {payload}\n")) {
            Some(at) => {
                let start_byte = cursor + at + "Context: ".len();
                let start = char_offset(&example.completion, start_byte);
                let end = start + payload.chars().count();
                if (start, end) != *span {
                    problems.push(format!("span {span:?} but payload found at {:?}", (start, end)));
                }
                cursor = start_byte + payload.len();
            }
            None => problems.push("payload not found in completion".to_string()),
        }
    }
    let unmasked = example.unmasked();
    for doc in traj.steps().iter().flat_map(|s| s.response.documents()) {
        let chars: Vec<char> = doc.body.chars().collect();
        if chars.len() >= 20
            && chars
                .windows(20)
                .any(|w| unmasked.contains(&w.iter().collect::<String>()))
        {
            problems.push(format!("unmasked text contains a 20-character piece of {}", doc.doc_id));
        }
    }
    problems
}

fn mask_exactness() -> Outcome {
    let (suite, _) = suite();
    let mut examples = 0;
    let mut spans = 0;
    let mut violations = Vec::new();
    for f in suite {
        for q in f.instances() {
            // The fewest-retrieval trajectory plus the most-retrieval one, so
            // multi-passage masks are exercised too.
            for policy in [SelectionPolicy::Minimal, SelectionPolicy::Most] {
                let out =
                    synthesize(Arc::clone(&q), &f.roles, &f.index, &f.config, policy).map_err(|e| e.to_string())?;
                let Some(traj) = out.trajectory else { continue };
                let example = to_imitation_example(&traj, DEFAULT_INSTRUCTION).map_err(|e| e.to_string())?;
                examples += 1;
                spans += example.mask_spans.len();
                violations.extend(
                    check_example(&example, &traj)
                        .into_iter()
                        .map(|p| format!("{}: {p}", q.id)),
                );
            }
        }
    }
    let detail = format!(
        "{examples} examples, {spans} masked spans, {} violations",
        violations.len()
    );
    if violations.is_empty() && spans > 0 {
        Ok(detail)
    } else {
        Err(format!(
            "{detail}; first: {}",
            violations.first().map_or("no spans checked", String::as_str)
        ))
    }
}

fn head(text: &str) -> &'static str {
    if text.starts_with(RETRIEVE_MARKER) {
        RETRIEVE_MARKER
    } else if text.starts_with(INTERMEDIATE_ANSWER) {
        INTERMEDIATE_ANSWER
    } else {
        "?"
    }
}

fn preference_fidelity() -> Outcome {
    let (suite, _) = suite();
    let mut trajectories = 0;
    let mut pairs_total = 0;
    let mut problems = Vec::new();
    let mut demo_pattern: Option<Vec<(&str, &str)>> = None;
    for f in suite {
        for q in f.instances() {
            let Some(traj) = optimal(f, &q)? else { continue };
            trajectories += 1;
            let pairs = build_preference_pairs(&traj, DEFAULT_INSTRUCTION).map_err(|e| e.to_string())?;
            pairs_total += pairs.len();
            if pairs.len() != traj.steps().len() {
                problems.push(format!(
                    "{}: {} pairs for {} steps",
                    q.id,
                    pairs.len(),
                    traj.steps().len()
                ));
            }
            for (pair, step) in pairs.iter().zip(traj.steps()) {
                let (chosen, rejected) = if step.response.is_retrieved() {
                    (RETRIEVE_MARKER, INTERMEDIATE_ANSWER)
                } else {
                    (INTERMEDIATE_ANSWER, RETRIEVE_MARKER)
                };
                if head(&pair.chosen) != chosen || head(&pair.rejected) != rejected {
                    problems.push(format!("{}: heads do not match the decision", q.id));
                }
            }
            if q.id == "demo-1" {
                demo_pattern = Some(pairs.iter().map(|p| (head(&p.chosen), head(&p.rejected))).collect());
            }
        }
    }
    let expected = vec![
        (INTERMEDIATE_ANSWER, RETRIEVE_MARKER),
        (RETRIEVE_MARKER, INTERMEDIATE_ANSWER),
    ];
    match &demo_pattern {
        Some(p) if *p == expected => {}
        other => problems.push(format!("parametric-then-retrieval question gave {other:?}")),
    }
    let detail = format!(
        "{trajectories} optimal trajectories, {pairs_total} pairs, {} problems",
        problems.len()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", problems[0]))
    }
}

/// Reference answer normalization: lowercase, delete ASCII punctuation,
/// drop articles, split on whitespace.
fn reference_tokens(text: &str) -> Vec<String> {
    const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let cleaned: String = text.to_lowercase().chars().filter(|c| !PUNCT.contains(*c)).collect();
    cleaned
        .split_whitespace()
        .filter(|w| !["a", "an", "the"].contains(w))
        .map(str::to_string)
        .collect()
}

fn reference_f1(pred: &str, gold: &str) -> f64 {
    let p = reference_tokens(pred);
    let mut g = reference_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let (np, ng) = (p.len() as f64, g.len() as f64);
    let mut common = 0.0;
    for t in &p {
        if let Some(pos) = g.iter().position(|x| x == t) {
            g.remove(pos);
            common += 1.0;
        }
    }
    if common == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (common / np, common / ng);
    2.0 * precision * recall / (precision + recall)
}

#[derive(serde::Deserialize)]
struct F1Case {
    pred: String,
    golds: Vec<String>,
}

fn brute_force_boundary(records: &[BoundaryRecord]) -> [f64; 4] {
    let count = |needs: bool, did: bool| {
        records
            .iter()
            .filter(|r| r.needs_retrieval == needs && r.did_retrieve == did)
            .count() as f64
    };
    let (tp, fp, tn, fn_) = (
        count(true, true),
        count(false, true),
        count(false, false),
        count(true, false),
    );
    let f1 = if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let tpr = if tp + fn_ == 0.0 { 0.5 } else { tp / (tp + fn_) };
    let tnr = if tn + fp == 0.0 { 0.5 } else { tn / (tn + fp) };
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
    [f1, (tp + tn) / records.len() as f64, (tpr + tnr) / 2.0, mcc]
}

fn metric_fixtures() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/f1_cases.json");
    let cases: Vec<F1Case> =
        serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let f1_ref = c.golds.iter().map(|g| reference_f1(&c.pred, g)).fold(0.0, f64::max);
        let em_ref = c.golds.iter().any(|g| reference_tokens(&c.pred) == reference_tokens(g));
        let f1: f64 = token_f1(&c.pred, &c.golds);
        if (f1 - f1_ref).abs() > 1e-9 || exact_match(&c.pred, &c.golds) != em_ref {
            problems.push(format!("case {i} ({:?}): f1 {f1} vs {f1_ref}", c.pred));
        }
    }

    let mut flare: Vec<BoundaryRecord> = (0..1000)
        .map(|i| BoundaryRecord {
            needs_retrieval: i >= 718,
            did_retrieve: false,
        })
        .collect();
    flare.shuffle(&mut ChaCha8Rng::seed_from_u64(718));
    let row = boundary_metrics::<f64>(&flare).map_err(|e| e.to_string())?;
    if row.f1 != 0.0 || (row.accuracy - 0.718).abs() > 1e-3 || row.balanced_accuracy != 0.5 || row.mcc != 0.0 {
        problems.push(format!("never-retrieve row {row:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        // Skewed rates so some trials hit degenerate denominators.
        let (p_need, p_did) = (
            rng.gen_range(0.0..1.0),
            if trial % 5 == 0 { 0.0 } else { rng.gen_range(0.0..1.0) },
        );
        let records: Vec<BoundaryRecord> = (0..1000)
            .map(|_| BoundaryRecord {
                needs_retrieval: rng.gen_bool(p_need),
                did_retrieve: rng.gen_bool(p_did),
            })
            .collect();
        let got = boundary_metrics::<f64>(&records).map_err(|e| e.to_string())?;
        let want = brute_force_boundary(&records);
        for (g, w) in [got.f1, got.accuracy, got.balanced_accuracy, got.mcc].iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    if worst > 1e-12 {
        problems.push(format!("confusion metrics differ by {worst:e}"));
    }
    let detail = format!(
        "{} F1/EM cases, never-retrieve row f1 {:.3} acc {:.3} bal {:.3} mcc {:.3}, 20 x 1000 random records max error {worst:.1e}",
        cases.len(),
        row.f1,
        row.accuracy,
        row.balanced_accuracy,
        row.mcc
    );
    if cases.len() != 50 {
        problems.push(format!("expected 50 cases, found {}", cases.len()));
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn rl_reward() -> Outcome {
    let checks: [(bool, bool, usize, f64); 6] = [
        (false, false, 0, 0.0),
        (false, true, 3, 0.1),
        (true, true, 2, 0.8),
        (true, true, 5, 0.5),
        (true, true, 9, 0.5),
        (true, true, 0, 1.0),
    ];
    let mut bad = Vec::new();
    for (correct, format_ok, n, want) in checks {
        let got: f64 = rl_shaped_reward(correct, format_ok, n);
        if got != want {
            bad.push(format!("({correct}, {format_ok}, {n}) -> {got}, want {want}"));
        }
    }
    if bad.is_empty() {
        Ok("0, 0.1, 0.8 at 2 retrievals, 0.5 at 5 and 9 retrievals, 1.0 at none".to_string())
    } else {
        Err(bad.join("; "))
    }
}

fn brute_force_bm25(docs: &[(String, Vec<String>)], query: &[String]) -> Vec<(f64, String)> {
    let (k1, b) = (1.2, 0.75);
    let n = docs.len() as f64;
    let avg = docs.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let mut terms: Vec<&String> = query.iter().collect();
    terms.sort();
    terms.dedup();
    docs.iter()
        .map(|(id, tokens)| {
            let mut score = 0.0;
            for term in &terms {
                let df = docs.iter().filter(|(_, t)| t.contains(term)).count() as f64;
                let tf = tokens.iter().filter(|t| t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * tokens.len() as f64 / avg));
            }
            (score, id.clone())
        })
        .collect()
}

fn bm25_oracle() -> Outcome {
    let params = Bm25Params::default();
    if (params.k1, params.b) != (1.2, 0.75) {
        return Err(format!("unexpected default parameters {params:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let vocab: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let docs: Vec<(String, Vec<String>)> = (0..100)
        .map(|i| {
            let len = rng.gen_range(3..40);
            // Zipf-like skew so frequent terms repeat within documents.
            let tokens = (0..len)
                .map(|_| vocab[(rng.gen_range(0.0f64..1.0).powi(2) * 60.0) as usize].clone())
                .collect();
            (format!("d{i:03}"), tokens)
        })
        .collect();
    let records: Vec<CorpusRecord> = docs
        .iter()
        .map(|(id, t)| CorpusRecord {
            doc_id: id.clone(),
            body: t.join(" "),
            title: String::new(),
        })
        .collect();
    let index = SearchIndex::build(records.clone(), params, TokenizerOptions::default()).map_err(|e| e.to_string())?;
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for qi in 0..20 {
        let query: Vec<String> = (0..rng.gen_range(1..5))
            .map(|_| vocab.choose(&mut rng).unwrap().clone())
            .collect();
        let scored = brute_force_bm25(&docs, &query);
        let best = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        // Ties break toward the smaller doc id; scores within 1e-9 count as tied.
        let tied: Vec<&str> = scored
            .iter()
            .filter(|s| best - s.0 <= 1e-9)
            .map(|s| s.1.as_str())
            .collect();
        ties += usize::from(tied.len() > 1);
        let expected = tied.iter().min().copied();
        let hits = index.search(&query.join(" "), 1);
        let got = hits.first().map(|h| (h.doc_id.as_str(), h.score));
        let agrees = match (got, expected) {
            (Some((id, score)), Some(_)) if best > 0.0 => tied.contains(&id) && (score - best).abs() <= 1e-9,
            (None, _) => best <= 0.0,
            _ => false,
        };
        if !agrees {
            mismatches.push(format!(
                "query {qi} {query:?}: index {got:?}, brute force {expected:?} at {best}"
            ));
        }
    }

    let hash = |index: &SearchIndex| -> Result<String, String> {
        let mut bytes = Vec::new();
        write_snapshot(index, &mut bytes).map_err(|e| e.to_string())?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    };
    let first = hash(&index)?;
    let rebuilt = hash(&SearchIndex::build(records, params, TokenizerOptions::default()).map_err(|e| e.to_string())?)?;
    let mut bytes = Vec::new();
    write_snapshot(&index, &mut bytes).map_err(|e| e.to_string())?;
    let reloaded = hash(&read_snapshot::<f64, _>(bytes.as_slice()).map_err(|e| e.to_string())?)?;
    if first != rebuilt || first != reloaded {
        mismatches.push(format!("snapshot hashes differ: {first} / {rebuilt} / {reloaded}"));
    }
    let detail = format!(
        "100 documents, 20 queries ({ties} with tied scores), {} mismatches, snapshot sha256 {}",
        mismatches.len(),
        &first[..16]
    );
    if mismatches.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", mismatches[0]))
    }
}

fn mode_contracts() -> Outcome {
    let (suite, _) = suite();
    let mut questions = 0;
    let mut problems = Vec::new();
    let mut retrievals = 0;
    for f in suite {
        let gateway = &f.roles.decomposer;
        for q in f.instances() {
            questions += 1;
            let counter = CountingRetriever::new(&f.index);
            let r = inference::run(
                Arc::clone(&q),
                gateway,
                &counter,
                InferenceMode::ParametricOnly,
                &f.config,
            );
            if counter.calls() != 0 || r.n_retrievals != 0 || r.failed {
                problems.push(format!(
                    "{} parametric-only: {} index calls, failed {}",
                    q.id,
                    counter.calls(),
                    r.failed
                ));
            }
            let r = inference::run(
                Arc::clone(&q),
                gateway,
                &f.index,
                InferenceMode::RetrieveEveryStep,
                &f.config,
            );
            retrievals += r.n_retrievals;
            if r.n_retrievals != r.n_subqueries || r.failed {
                problems.push(format!(
                    "{} retrieve-all: {} retrievals for {} subqueries",
                    q.id, r.n_retrievals, r.n_subqueries
                ));
            }
        }
    }
    let detail = format!(
        "{questions} questions per mode, {retrievals} retrieve-all retrievals, {} violations",
        problems.len()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", problems[0]))
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            std::fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}

fn keys(value: &serde_json::Value) -> BTreeSet<&str> {
    value
        .as_object()
        .map(|o| o.keys().map(String::as_str).collect())
        .unwrap_or_default()
}

fn hermetic_e2e() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/hermetic");
    copy_dir(&fixture, dir.path()).map_err(|e| e.to_string())?;
    let config = dir.path().join("config.toml");
    let out = dir.path().join("out");
    let steps: [&[&str]; 8] = [
        &["index"],
        &["synthesize", "--stage", "imitation"],
        &["synthesize", "--stage", "preference"],
        &["infer", "--mode", "adaptive"],
        &["infer", "--mode", "retrieve-all"],
        &["infer", "--mode", "parametric"],
        &[
            "report",
            "--results",
            "out/results.adaptive.jsonl",
            "--parametric-results",
            "out/results.parametric.jsonl",
        ],
        &["report", "--results", "out/results.retrieve-all.jsonl"],
    ];
    for args in steps {
        let status = Command::new(env!("CARGO_BIN_EXE_adarag"))
            .current_dir(dir.path())
            .arg("--config")
            .arg(&config)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "`adarag {}` failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&status.stderr)
            ));
        }
    }

    let mut problems = Vec::new();
    let mut check_keys = |file: &str, want: &[&str]| -> Result<usize, String> {
        let rows = read_lines(&out.join(file))?;
        let want: BTreeSet<&str> = want.iter().copied().collect();
        for row in &rows {
            if keys(row) != want {
                problems.push(format!("{file}: keys {:?}", keys(row)));
            }
        }
        if rows.is_empty() {
            problems.push(format!("{file} is empty"));
        }
        Ok(rows.len())
    };
    let imitation = check_keys("imitation.jsonl", &["prompt", "completion", "mask_spans"])?;
    let preference = check_keys("preference.jsonl", &["context", "chosen", "rejected"])?;
    for stage in ["imitation", "preference"] {
        check_keys(
            &format!("search_log.{stage}.jsonl"),
            &[
                "question_id",
                "policy",
                "termination",
                "expansions",
                "model_calls",
                "events",
            ],
        )?;
    }
    let mut results = 0;
    for mode in ["adaptive", "retrieve-all", "parametric"] {
        let path = out.join(format!("results.{mode}.jsonl"));
        let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
        for line in text.lines() {
            match serde_json::from_str::<InferenceResult>(line) {
                Ok(r) if !r.failed => results += 1,
                Ok(r) => problems.push(format!("{mode}: {} failed", r.question_id)),
                Err(e) => problems.push(format!("{mode}: {e}")),
            }
        }
    }
    let imitation_rows: Vec<ImitationExample> = read_lines(&out.join("imitation.jsonl"))?
        .into_iter()
        .map(serde_json::from_value)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    if imitation_rows.iter().any(|e| {
        e.mask_spans
            .iter()
            .any(|&(s, t)| s >= t || t > e.completion.chars().count())
    }) {
        problems.push("imitation mask span out of range".to_string());
    }

    let mut manifests: Vec<PathBuf> = vec![out.join("index.bm25")];
    manifests.extend(
        [
            "imitation",
            "preference",
            "search_log.imitation",
            "search_log.preference",
        ]
        .iter()
        .map(|s| out.join(format!("{s}.jsonl"))),
    );
    manifests.extend(
        ["adaptive", "retrieve-all", "parametric"]
            .iter()
            .map(|m| out.join(format!("results.{m}.jsonl"))),
    );
    manifests.push(out.join("results.adaptive.jsonl.report.json"));
    for target in &manifests {
        let manifest = PathBuf::from(format!("{}.manifest.json", target.display()));
        match std::fs::read_to_string(&manifest)
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        {
            Some(m)
                if m.get("config_hash")
                    .is_some_and(|h| h.as_str().is_some_and(|s| s.len() == 64)) => {}
            _ => problems.push(format!("missing or invalid manifest {}", manifest.display())),
        }
    }
    let report: serde_json::Value = std::fs::read_to_string(out.join("results.adaptive.jsonl.report.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .ok_or("adaptive report unreadable")?;
    if report.get("boundary").is_none_or(serde_json::Value::is_null) {
        problems.push("adaptive report lacks boundary metrics".to_string());
    }

    let elapsed = start.elapsed();
    let detail = format!(
        "{imitation} imitation examples, {preference} preference pairs, {results} inference results, {} manifests, {:.2}s",
        manifests.len(),
        elapsed.as_secs_f64()
    );
    if elapsed >= Duration::from_secs(60) {
        problems.push("over the 60 s limit".to_string());
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("search optimality", optimality),
        ("dequeue monotonicity", monotonicity),
        ("protocol round-trip", protocol_round_trip),
        ("mask-span exactness", mask_exactness),
        ("preference-pair fidelity", preference_fidelity),
        ("metric fixtures", metric_fixtures),
        ("rl reward", rl_reward),
        ("bm25 oracle", bm25_oracle),
        ("mode contracts", mode_contracts),
        ("hermetic end-to-end", hermetic_e2e),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
