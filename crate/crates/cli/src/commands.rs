//! Subcommand implementations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adarag::gateway::{Gateway, ModelRoles, ScriptedModel};
use adarag::inference::{run_batch, InferenceMode, InferenceResult};
use adarag::metrics::Scored;
use adarag::retriever::{read_corpus_file, read_snapshot, write_snapshot, Retriever};
use adarag::search::{
    enumerate_all, min_correct_retrievals, synthesize, SearchConfig, SearchLog, SearchTermination, SelectionPolicy,
};
use adarag::synthesis::{
    all_node_pairs, build_preference_pairs, sentence_wise_pairs, to_imitation_example, PairSource,
};
use adarag::world::World;
use adarag::{QAInstance, Report, SearchIndex};
use anyhow::{bail, Context, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::output::{checkpoint_path, load_dataset, manifest_path, read_jsonl, write_json, Checkpoint, JsonlWriter};

pub struct Ctx {
    pub config: RunConfig,
    pub jobs: usize,
}

impl Ctx {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }

    fn load_index(&self) -> Result<SearchIndex> {
        let path = self.config.index()?;
        let file =
            File::open(path).with_context(|| format!("opening index {} (run `adarag index` first)", path.display()))?;
        read_snapshot(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
    }

    fn manifest(&self, command: &str, output: &Path, extra: serde_json::Value) -> Result<()> {
        let mut value = json!({
            "command": command,
            "output": output,
            "config_hash": self.config.hash(),
            "seeds": {
                "sample": self.config.seeds.sample,
                "policy": self.config.seeds.policy,
                "decode": self.config.decode.seed,
            },
            "model_roles": self.config.role_descriptions(),
            "jobs": self.jobs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (value.as_object_mut(), extra) {
            obj.extend(extra);
        }
        write_json(&manifest_path(output), &value)
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    std::io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

pub fn index(ctx: &Ctx, lenient: bool) -> Result<()> {
    let corpus = ctx.config.corpus()?;
    let strict = ctx.config.retrieval.strict && !lenient;
    let load = read_corpus_file(corpus, strict).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let skipped = load.skipped.len();
    let index = SearchIndex::build(
        load.records,
        ctx.config.retrieval.bm25(),
        ctx.config.retrieval.tokenizer(),
    )?;
    let out = ctx.config.index()?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_snapshot(&index, &mut writer)?;
    writer.flush()?;
    drop(writer);
    let digest = file_sha256(out)?;
    ctx.manifest(
        "index",
        out,
        json!({
            "corpus": corpus,
            "doc_count": index.doc_count(),
            "avg_doc_length": index.avg_doc_length(),
            "term_count": index.term_count(),
            "skipped_lines": load.skipped,
            "sha256": digest,
        }),
    )?;
    println!(
        "indexed {} documents (avg length {:.2}, {} terms, {skipped} lines skipped) -> {}",
        index.doc_count(),
        index.avg_doc_length(),
        index.term_count(),
        out.display()
    );
    Ok(())
}

/// Seeded sample of `n` questions, in dataset order.
fn sample_questions(questions: Vec<Arc<QAInstance>>, n: Option<usize>, seed: u64) -> Vec<Arc<QAInstance>> {
    match n {
        Some(n) if n < questions.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, questions.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| Arc::clone(&questions[i])).collect()
        }
        _ => questions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Imitation,
    Preference,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Imitation => "imitation",
            Stage::Preference => "preference",
        }
    }
}

pub struct SynthesizeArgs {
    pub stage: Stage,
    pub policy: SelectionPolicy,
    pub pairs_from: PairSource,
    pub sample_size: Option<usize>,
    pub resume: bool,
    pub output: Option<PathBuf>,
}

enum Status {
    Kept,
    Discarded,
    BudgetExhausted,
    Failed(String),
}

struct Outcome {
    id: String,
    records: Vec<serde_json::Value>,
    log: Option<SearchLog>,
    status: Status,
}

fn synthesize_one(
    q: Arc<QAInstance>,
    args: &SynthesizeArgs,
    roles: &ModelRoles,
    retriever: &dyn Retriever,
    config: &SearchConfig,
) -> Outcome {
    let id = q.id.clone();
    let work = || -> Result<(Vec<serde_json::Value>, Option<SearchLog>, Status)> {
        let instruction = &config.instruction;
        let status_of = |log: &SearchLog, found: bool| match (found, log.termination) {
            (true, _) => Status::Kept,
            (false, SearchTermination::BudgetExhausted) => Status::BudgetExhausted,
            (false, _) => Status::Discarded,
        };
        let to_values = |items: Vec<_>| -> Result<Vec<serde_json::Value>> {
            items.into_iter().map(|p| Ok(serde_json::to_value(p)?)).collect()
        };
        match (args.stage, args.pairs_from) {
            (Stage::Imitation, _) => {
                let outcome = synthesize(Arc::clone(&q), roles, retriever, config, args.policy)?;
                let status = status_of(&outcome.log, outcome.trajectory.is_some());
                let records = match &outcome.trajectory {
                    Some(t) => vec![serde_json::to_value(to_imitation_example(t, instruction)?)?],
                    None => Vec::new(),
                };
                Ok((records, Some(outcome.log), status))
            }
            (Stage::Preference, PairSource::OptimalPath) => {
                let outcome = synthesize(Arc::clone(&q), roles, retriever, config, args.policy)?;
                let status = status_of(&outcome.log, outcome.trajectory.is_some());
                let records = match &outcome.trajectory {
                    Some(t) => to_values(build_preference_pairs(t, instruction)?)?,
                    None => Vec::new(),
                };
                Ok((records, Some(outcome.log), status))
            }
            (Stage::Preference, PairSource::AllNodes) => {
                let tree = enumerate_all(Arc::clone(&q), roles, retriever, config)?;
                let pairs = all_node_pairs(&tree, instruction)?;
                let status = if pairs.is_empty() {
                    Status::Discarded
                } else {
                    Status::Kept
                };
                Ok((to_values(pairs)?, None, status))
            }
            (Stage::Preference, PairSource::SentenceWise) => {
                let outcome = synthesize(Arc::clone(&q), roles, retriever, config, args.policy)?;
                let status = status_of(&outcome.log, outcome.trajectory.is_some());
                let records = match &outcome.trajectory {
                    Some(t) => {
                        let tree = enumerate_all(Arc::clone(&q), roles, retriever, config)?;
                        to_values(sentence_wise_pairs(t, &tree, instruction))?
                    }
                    None => Vec::new(),
                };
                Ok((records, Some(outcome.log), status))
            }
        }
    };
    match work() {
        Ok((records, log, status)) => Outcome {
            id,
            records,
            log,
            status,
        },
        Err(e) => Outcome {
            id,
            records: Vec::new(),
            log: None,
            status: Status::Failed(format!("{e:#}")),
        },
    }
}

pub fn synthesize_cmd(ctx: &Ctx, args: &SynthesizeArgs) -> Result<()> {
    let config = &ctx.config;
    let questions = sample_questions(load_dataset(config.dataset()?)?, args.sample_size, config.seeds.sample);
    let index = ctx.load_index()?;
    let roles = config.roles()?;
    let search = config.search_config();
    let stage = args.stage.name();
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir().join(format!("{stage}.jsonl")));
    let log_path = output.with_file_name(format!("search_log.{stage}.jsonl"));
    let ckpt_path = checkpoint_path(&output);

    let mut checkpoint = match Checkpoint::load(&ckpt_path)? {
        Some(c) if args.resume => {
            if c.config_hash != config.hash() {
                bail!(
                    "checkpoint {} was written with a different configuration",
                    ckpt_path.display()
                );
            }
            log::info!("resuming: {} questions already done", c.done.len());
            c
        }
        _ => Checkpoint {
            config_hash: config.hash(),
            ..Checkpoint::default()
        },
    };
    let append = !checkpoint.done.is_empty();
    let mut records_out = JsonlWriter::create(&output, append)?;
    let mut log_out = JsonlWriter::create(&log_path, append)?;
    let pending: Vec<_> = questions
        .iter()
        .filter(|q| !checkpoint.done.contains(&q.id))
        .cloned()
        .collect();
    let pool = ctx.pool()?;

    for chunk in pending.chunks(ctx.jobs * 2) {
        let outcomes: Vec<Outcome> = pool.install(|| {
            chunk
                .par_iter()
                .map(|q| synthesize_one(Arc::clone(q), args, &roles, &index, &search))
                .collect()
        });
        for outcome in outcomes {
            for record in &outcome.records {
                records_out.write(record)?;
            }
            if let Some(log) = &outcome.log {
                log_out.write(log)?;
            }
            checkpoint.bump("records", outcome.records.len());
            match &outcome.status {
                Status::Kept => checkpoint.bump("kept", 1),
                Status::Discarded => {
                    log::info!("{}: no correct trajectory, discarded", outcome.id);
                    checkpoint.bump("discarded", 1)
                }
                Status::BudgetExhausted => {
                    log::info!("{}: search budget exhausted, discarded", outcome.id);
                    checkpoint.bump("budget_exhausted", 1)
                }
                Status::Failed(reason) => {
                    log::warn!("{}: {reason}", outcome.id);
                    checkpoint.bump("failed", 1)
                }
            }
            checkpoint.done.insert(outcome.id);
        }
        records_out.flush()?;
        log_out.flush()?;
        write_json(&ckpt_path, &checkpoint)?;
    }

    let counts = json!({
        "questions": questions.len(),
        "kept": checkpoint.count("kept"),
        "discarded": checkpoint.count("discarded"),
        "budget_exhausted": checkpoint.count("budget_exhausted"),
        "failed": checkpoint.count("failed"),
        "records": checkpoint.count("records"),
    });
    let policy = serde_json::to_value(args.policy)?;
    ctx.manifest(
        "synthesize",
        &output,
        json!({
            "stage": stage,
            "policy": policy,
            "pairs_from": args.pairs_from,
            "sample_size": args.sample_size,
            "search_log": log_path,
            "budget": config.budget,
            "k": config.retrieval.k,
            "counts": counts,
        }),
    )?;
    ctx.manifest(
        "synthesize",
        &log_path,
        json!({ "stage": stage, "policy": policy, "records_file": output }),
    )?;
    if ckpt_path.exists() {
        std::fs::remove_file(&ckpt_path)?;
    }
    println!(
        "{stage}: {} questions, {} kept, {} discarded, {} budget-exhausted, {} failed, {} records -> {}",
        questions.len(),
        checkpoint.count("kept"),
        checkpoint.count("discarded"),
        checkpoint.count("budget_exhausted"),
        checkpoint.count("failed"),
        checkpoint.count("records"),
        output.display()
    );
    Ok(())
}

pub fn infer(ctx: &Ctx, mode: InferenceMode, sample_size: Option<usize>, output: Option<PathBuf>) -> Result<()> {
    let config = &ctx.config;
    let questions = sample_questions(load_dataset(config.dataset()?)?, sample_size, config.seeds.sample);
    let index = ctx.load_index()?;
    let roles = config.roles()?;
    let gateway: &Gateway = &roles.decomposer;
    let search = config.search_config();
    let output = output.unwrap_or_else(|| config.output_dir().join(format!("results.{}.jsonl", mode.name())));
    let mut out = JsonlWriter::create(&output, false)?;
    let (mut failed, mut correct, mut retrievals) = (0usize, 0usize, 0usize);
    for chunk in questions.chunks(ctx.jobs * 2) {
        for (q, result) in chunk
            .iter()
            .zip(run_batch(chunk, gateway, &index, mode, &search, ctx.jobs))
        {
            failed += usize::from(result.failed);
            retrievals += result.n_retrievals;
            correct += usize::from(
                Scored {
                    result: &result,
                    golds: &q.gold_answers,
                }
                .correct(),
            );
            out.write(&result)?;
        }
        out.flush()?;
    }
    ctx.manifest(
        "infer",
        &output,
        json!({
            "mode": mode.name(),
            "sample_size": sample_size,
            "budget": config.budget,
            "k": config.retrieval.k,
            "counts": {
                "questions": questions.len(),
                "failed": failed,
                "correct": correct,
                "retrievals": retrievals,
            },
        }),
    )?;
    println!(
        "{}: {} questions, {correct} correct, {failed} failed, {retrievals} retrievals -> {}",
        mode.name(),
        questions.len(),
        output.display()
    );
    Ok(())
}

fn score_rows<'a>(rows: &'a [InferenceResult], golds: &HashMap<&str, &'a [String]>) -> Result<Vec<Scored<'a>>> {
    rows.iter()
        .map(|r| {
            let golds = golds
                .get(r.question_id.as_str())
                .with_context(|| format!("result for unknown question {}", r.question_id))?;
            Ok(Scored { result: r, golds })
        })
        .collect()
}

fn read_mode(results: &Path) -> Option<String> {
    let text = std::fs::read_to_string(manifest_path(results)).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("mode")?.as_str().map(str::to_string)
}

pub fn report(
    ctx: &Ctx,
    results: Option<PathBuf>,
    parametric: Option<PathBuf>,
    json_out: Option<PathBuf>,
) -> Result<()> {
    let config = &ctx.config;
    let dataset = load_dataset(config.dataset()?)?;
    let golds: HashMap<&str, &[String]> = dataset
        .iter()
        .map(|q| (q.id.as_str(), q.gold_answers.as_slice()))
        .collect();
    let results = results.unwrap_or_else(|| config.output_dir().join("results.adaptive.jsonl"));
    let load = |path: &Path| -> Result<Vec<InferenceResult>> { read_jsonl(path) };
    let main_rows = load(&results)?;
    let companion_rows = parametric.as_deref().map(load).transpose()?;
    let main = score_rows(&main_rows, &golds)?;
    let companion = companion_rows
        .as_deref()
        .map(|rows| score_rows(rows, &golds))
        .transpose()?;
    let report = Report::build(read_mode(&results), &main, companion.as_deref())
        .with_context(|| format!("scoring {}", results.display()))?;
    print!("{}", report.render_table());
    let json_out = json_out.unwrap_or_else(|| {
        let mut name = results.file_name().unwrap_or_default().to_os_string();
        name.push(".report.json");
        results.with_file_name(name)
    });
    write_json(&json_out, &report)?;
    ctx.manifest(
        "report",
        &json_out,
        json!({ "results": results, "parametric_results": parametric }),
    )?;
    println!("report -> {}", json_out.display());
    Ok(())
}

fn check_question(
    q: Arc<QAInstance>,
    roles: &ModelRoles,
    retriever: &dyn Retriever,
    config: &SearchConfig,
    expected: Option<Option<usize>>,
) -> Result<Option<String>> {
    let outcome = synthesize(Arc::clone(&q), roles, retriever, config, SelectionPolicy::Minimal)?;
    let oracle = min_correct_retrievals(&enumerate_all(Arc::clone(&q), roles, retriever, config)?);
    let found = outcome.trajectory.as_ref().map(|t| t.retrieval_count);
    let counts = outcome.log.dequeued_counts();
    let mut problems = Vec::new();
    if outcome.log.termination == SearchTermination::BudgetExhausted {
        problems.push("search budget exhausted".to_string());
    }
    if found != oracle {
        problems.push(format!("search found {found:?}, exhaustive minimum {oracle:?}"));
    }
    if let Some(expected) = expected {
        if expected != oracle {
            problems.push(format!("pattern minimum {expected:?}, exhaustive minimum {oracle:?}"));
        }
    }
    if counts.windows(2).any(|w| w[0] > w[1]) {
        problems.push(format!("dequeue order not monotone: {counts:?}"));
    }
    Ok((!problems.is_empty()).then(|| format!("{}: {}", q.id, problems.join("; "))))
}

pub fn oracle_check(ctx: &Ctx, worlds: Option<usize>) -> Result<()> {
    let config = &ctx.config;
    let search = config.search_config();
    let mut problems = Vec::new();
    let mut checked = 0usize;
    match worlds {
        Some(n) => {
            let pool = ctx.pool()?;
            let results: Vec<Result<(usize, Vec<String>)>> = pool.install(|| {
                (0..n as u64)
                    .into_par_iter()
                    .map(|i| {
                        let world = World::random(config.seeds.sample.wrapping_add(i), 3);
                        let index = world.index();
                        let model = ScriptedModel::from_entries(world.script(&index, &search))?;
                        let roles = ModelRoles::shared(Arc::new(Gateway::new(Arc::new(model))));
                        let mut found = Vec::new();
                        for (q, spec) in world.instances().into_iter().zip(&world.questions) {
                            let expected = spec.expected_min_retrievals(search.budget.max_depth);
                            found.extend(check_question(q, &roles, &index, &search, Some(expected))?);
                        }
                        Ok((world.questions.len(), found))
                    })
                    .collect()
            });
            for r in results {
                let (n, found) = r?;
                checked += n;
                problems.extend(found);
            }
        }
        None => {
            let questions = load_dataset(config.dataset()?)?;
            let index = ctx.load_index()?;
            let roles = config.roles()?;
            for q in questions {
                checked += 1;
                problems.extend(check_question(q, &roles, &index, &search, None)?);
            }
        }
    }
    for p in &problems {
        println!("MISMATCH {p}");
    }
    println!("oracle-check: {checked} questions, {} mismatches", problems.len());
    if !problems.is_empty() {
        bail!("{} questions disagree with the exhaustive oracle", problems.len());
    }
    Ok(())
}

pub const FIXTURE_CONFIG: &str = r#"# Hermetic fixture: a scripted model over a five-question synthetic world.
# Regenerate with `adarag demo-fixture --out <dir>`.

[paths]
corpus = "corpus.tsv"
dataset = "dataset.jsonl"
index = "out/index.bm25"
output_dir = "out"

[retrieval]
k = 3

[budget]
max_depth = 4

[models.decomposer]
backend = "scripted"
script = "script.json"
"#;

fn tsv_field(text: &str) -> String {
    let flat: String = text
        .chars()
        .map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c })
        .collect();
    if flat.starts_with('"') {
        format!("\"{}\"", flat.replace('"', "\"\""))
    } else {
        flat
    }
}

/// Writes the demo world as corpus, dataset, script and config.
pub fn demo_fixture(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let world = World::demo();
    let config: RunConfig = toml::from_str(FIXTURE_CONFIG)?;
    let search = config.search_config();

    let mut corpus = String::from("id\ttext\ttitle\n");
    for r in world.corpus() {
        corpus.push_str(&format!(
            "{}\t{}\t{}\n",
            r.doc_id,
            tsv_field(&r.body),
            tsv_field(&r.title)
        ));
    }
    std::fs::write(out.join("corpus.tsv"), corpus)?;

    let mut dataset = String::new();
    for q in world.instances() {
        dataset.push_str(&serde_json::to_string(&*q)?);
        dataset.push('\n');
    }
    std::fs::write(out.join("dataset.jsonl"), dataset)?;

    let index = SearchIndex::build(world.corpus(), config.retrieval.bm25(), config.retrieval.tokenizer())?;
    let script = world.script(&index, &search);
    std::fs::write(out.join("script.json"), serde_json::to_string_pretty(&script)? + "\n")?;
    std::fs::write(out.join("config.toml"), FIXTURE_CONFIG)?;
    println!(
        "fixture: {} questions, {} passages, {} script entries -> {}",
        world.questions.len(),
        world.corpus().len(),
        script.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_seeded_and_ordered() {
        let qs: Vec<_> = (0..20)
            .map(|i| Arc::new(QAInstance::new(format!("q{i}"), "x?", vec!["a".into()]).unwrap()))
            .collect();
        let a = sample_questions(qs.clone(), Some(5), 1);
        let b = sample_questions(qs.clone(), Some(5), 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let pos: Vec<usize> = a.iter().map(|q| q.id[1..].parse().unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_questions(qs.clone(), None, 1).len(), 20);
        assert_eq!(sample_questions(qs, Some(50), 1).len(), 20);
    }

    #[test]
    fn tsv_fields_stay_on_one_line() {
        assert_eq!(tsv_field("a\tb\nc"), "a b c");
        assert_eq!(tsv_field("\"q\" x"), "\"\"\"q\"\" x\"");
    }
}
