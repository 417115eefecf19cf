//! Synthetic question worlds.
//!
//! A world is a set of multi-hop questions whose every subquery has a known
//! truth, a parametric answer and a retrieved answer (either may be wrong),
//! a passage in the corpus, and the decision a model would take when asked
//! freely. [`World::script`] compiles a world into scripted-model entries
//! covering every state reachable by any retrieve/parametric decision
//! vector, so search, inference and the CLI can run without a real model.
//!
//! The final answer at a state is the gold answer exactly when every step so
//! far was answered correctly and all steps were taken.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::protocol::{render_prompt, FINAL_ANSWER, FOLLOW_UP, INTERMEDIATE_ANSWER, RETRIEVE_MARKER};
use crate::gateway::{Forced, ScriptEntry, ScriptMatch};
use crate::mdp::{QAInstance, Response, State};
use crate::retriever::{fetch_passages, Bm25Params, CorpusRecord, Retriever, SearchIndex, TokenizerOptions};
use crate::search::SearchConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldStep {
    pub subquery: String,
    pub truth: String,
    pub parametric_answer: String,
    pub retrieved_answer: String,
    /// What the model does when deciding by itself.
    pub prefers_retrieval: bool,
    pub passage: String,
}

impl WorldStep {
    pub fn parametric_correct(&self) -> bool {
        self.parametric_answer == self.truth
    }

    pub fn retrieved_correct(&self) -> bool {
        self.retrieved_answer == self.truth
    }

    /// Step with pseudo-word content derived from `label`.
    pub fn synthetic(
        label: &str,
        salt: usize,
        parametric_ok: bool,
        retrieved_ok: bool,
        prefers_retrieval: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(label_seed(label) ^ (salt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let [a, b, c] = [word(&mut rng), word(&mut rng), word(&mut rng)];
        let truth = capitalize(&word(&mut rng));
        let wrong = |rng: &mut ChaCha8Rng| {
            let mut w = capitalize(&word(rng));
            if w == truth {
                w.push('x');
            }
            w
        };
        let parametric_answer = if parametric_ok { truth.clone() } else { wrong(&mut rng) };
        let retrieved_answer = if retrieved_ok { truth.clone() } else { wrong(&mut rng) };
        WorldStep {
            subquery: format!("What is the {a} of {b} {c}?"),
            passage: format!(
                "{} archives note {a} ties; the {b} ledger gives {truth} for {c} records.",
                capitalize(&c)
            ),
            truth,
            parametric_answer,
            retrieved_answer,
            prefers_retrieval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldQuestion {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Emitted as the final answer on any path that went wrong.
    pub wrong_final: String,
    pub steps: Vec<WorldStep>,
}

impl WorldQuestion {
    /// Question whose gold answer is the last step's truth.
    pub fn synthetic(id: &str, steps: Vec<WorldStep>) -> Self {
        let answer = steps
            .last()
            .map(|s| s.truth.clone())
            .unwrap_or_else(|| "Nothing".into());
        let subjects: Vec<&str> = steps
            .iter()
            .map(|s| s.subquery.split_whitespace().nth(3).unwrap_or("it"))
            .collect();
        WorldQuestion {
            id: id.to_string(),
            question: format!("Which answer follows from {}?", subjects.join(" then ")),
            wrong_final: format!("{answer} not"),
            answer,
            steps,
        }
    }

    pub fn instance(&self) -> QAInstance {
        QAInstance::new(self.id.clone(), self.question.clone(), vec![self.answer.clone()])
            .expect("world questions are valid")
    }

    /// Fewest retrievals over correct trajectories, computed from the step
    /// patterns alone: every step must be answerable, a step costs one
    /// retrieval exactly when its parametric answer is wrong, and all steps
    /// must fit under the depth cap.
    pub fn expected_min_retrievals(&self, max_depth: usize) -> Option<usize> {
        if self.steps.len() > max_depth {
            return None;
        }
        let mut cost = 0;
        for step in &self.steps {
            match (step.parametric_correct(), step.retrieved_correct()) {
                (true, _) => {}
                (false, true) => cost += 1,
                (false, false) => return None,
            }
        }
        Some(cost)
    }

    fn final_answer(&self, state: &State, on_track: bool) -> &str {
        if on_track && state.depth() >= self.steps.len() {
            &self.answer
        } else {
            &self.wrong_final
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub questions: Vec<WorldQuestion>,
    /// Passages no question needs.
    pub distractors: Vec<String>,
}

fn label_seed(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn word(rng: &mut ChaCha8Rng) -> String {
    (0..3)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn entry(prompt_key: String, emit: String, note: String) -> ScriptEntry {
    ScriptEntry {
        matcher: ScriptMatch::Hash {
            transcript_hash: prompt_key,
        },
        emit,
        note: Some(note),
    }
}

impl World {
    pub fn new(questions: Vec<WorldQuestion>) -> Self {
        World {
            questions,
            distractors: Vec::new(),
        }
    }

    /// `n` questions with 1 to 4 steps and random correctness patterns.
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let questions = (0..n)
            .map(|i| {
                let id = format!("w{seed}-{i}");
                let len = rng.gen_range(1..=4);
                let steps = (0..len)
                    .map(|j| {
                        WorldStep::synthetic(
                            &format!("{id}-{j}"),
                            j,
                            rng.gen_bool(0.5),
                            rng.gen_bool(0.85),
                            rng.gen_bool(0.4),
                        )
                    })
                    .collect();
                WorldQuestion::synthetic(&id, steps)
            })
            .collect();
        let distractors = (0..n.max(3))
            .map(|_| {
                format!(
                    "{} {} {} {}",
                    word(&mut rng),
                    word(&mut rng),
                    word(&mut rng),
                    word(&mut rng)
                )
            })
            .collect();
        World { questions, distractors }
    }

    /// Small readable world used for the bundled fixture.
    pub fn demo() -> Self {
        let step =
            |subquery: &str, truth: &str, parametric: &str, retrieved: &str, prefers: bool, passage: &str| WorldStep {
                subquery: subquery.into(),
                truth: truth.into(),
                parametric_answer: parametric.into(),
                retrieved_answer: retrieved.into(),
                prefers_retrieval: prefers,
                passage: passage.into(),
            };
        let question = |id: &str, question: &str, answer: &str, steps: Vec<WorldStep>| WorldQuestion {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            wrong_final: "I do not know".into(),
            steps,
        };
        let questions = vec![
            question(
                "demo-1",
                "Who is the spouse of the director of Lumen Harbor?",
                "Tobin Ashe",
                vec![
                    step(
                        "Who directed Lumen Harbor?",
                        "Mara Quell",
                        "Mara Quell",
                        "Mara Quell",
                        false,
                        "Lumen Harbor (2011) is a coastal drama; Mara Quell directed it after two short films.",
                    ),
                    step(
                        "Who is Mara Quell married to?",
                        "Tobin Ashe",
                        "Ivo Brandt",
                        "Tobin Ashe",
                        true,
                        "Film maker Mara Quell wed the painter Tobin Ashe in 2004 in Lisbon.",
                    ),
                ],
            ),
            question(
                "demo-2",
                "In which country is the town of Velmora?",
                "Ostreland",
                vec![step(
                    "Which country contains Velmora?",
                    "Ostreland",
                    "Ostreland",
                    "Ostreland",
                    false,
                    "Velmora is a market town in northern Ostreland, on the river Dask.",
                )],
            ),
            question(
                "demo-3",
                "When was the founder of the company that makes the Quillo phone born?",
                "1961",
                vec![
                    step(
                        "Which company makes the Quillo phone?",
                        "Arkwell Devices",
                        "Brightline",
                        "Arkwell Devices",
                        true,
                        "The Quillo handset line is built and sold by Arkwell Devices since 2015.",
                    ),
                    step(
                        "Who founded Arkwell Devices?",
                        "Edda Morrow",
                        "Edda Morrow",
                        "Edda Morrow",
                        false,
                        "Arkwell Devices was started by engineer Edda Morrow in a garage.",
                    ),
                    step(
                        "When was Edda Morrow born?",
                        "1961",
                        "1961",
                        "1961",
                        false,
                        "Engineer Edda Morrow (born 1961) grew up near the harbour of Kell.",
                    ),
                ],
            ),
            question(
                "demo-4",
                "What is the capital of the region where the Serrin glacier lies?",
                "Hollup",
                vec![
                    step(
                        "Where does the Serrin glacier lie?",
                        "Vardmark",
                        "Tessaly",
                        "Kjolen",
                        true,
                        "The Serrin ice field spreads across upland Vardmark and feeds two lakes.",
                    ),
                    step(
                        "What is the capital of Vardmark?",
                        "Hollup",
                        "Hollup",
                        "Hollup",
                        false,
                        "Hollup serves as the seat of the Vardmark regional council.",
                    ),
                ],
            ),
            question(
                "demo-5",
                "Which instrument did the composer of the Tessel Suite play?",
                "oboe",
                vec![
                    step(
                        "Who composed the Tessel Suite?",
                        "Pim Vandor",
                        "Pim Vandor",
                        "Pim Vandor",
                        true,
                        "Pim Vandor wrote the Tessel orchestral suite during a winter in Ghent.",
                    ),
                    step(
                        "Which instrument did Pim Vandor play?",
                        "oboe",
                        "oboe",
                        "oboe",
                        false,
                        "Besides composing, Vandor was a noted oboe player in a chamber group.",
                    ),
                ],
            ),
        ];
        World {
            questions,
            distractors: vec![
                "The river Dask floods each spring and shapes the farmland around it.".into(),
                "Kell is a fishing port known for its lighthouse and salt works.".into(),
                "Ghent hosts a large winter market with music every evening.".into(),
            ],
        }
    }

    pub fn instances(&self) -> Vec<Arc<QAInstance>> {
        self.questions.iter().map(|q| Arc::new(q.instance())).collect()
    }

    /// One record per step passage (`<question id>-<step>`), then distractors.
    pub fn corpus(&self) -> Vec<CorpusRecord> {
        let mut records: Vec<CorpusRecord> = self
            .questions
            .iter()
            .flat_map(|q| {
                q.steps.iter().enumerate().map(move |(i, s)| CorpusRecord {
                    doc_id: format!("{}-{i}", q.id),
                    body: s.passage.clone(),
                    title: String::new(),
                })
            })
            .collect();
        records.extend(self.distractors.iter().enumerate().map(|(i, body)| CorpusRecord {
            doc_id: format!("distractor-{i}"),
            body: body.clone(),
            title: String::new(),
        }));
        records
    }

    pub fn index(&self) -> SearchIndex<f64> {
        SearchIndex::build(self.corpus(), Bm25Params::default(), TokenizerOptions::default())
            .expect("world corpus is non-empty with unique ids")
    }

    /// Scripted-model entries for every reachable state, for the given depth
    /// cap, passage count and passage length. Both model roles can share the
    /// resulting table.
    pub fn script(&self, retriever: &dyn Retriever, config: &SearchConfig) -> Vec<ScriptEntry> {
        let mut entries = Vec::new();
        let max_depth = config.budget.max_depth;
        let instruction = &config.instruction;
        for q in &self.questions {
            let mut stack = vec![(State::new(Arc::new(q.instance()), max_depth), true)];
            while let Some((state, on_track)) = stack.pop() {
                let depth = state.depth();
                let tag = format!("{} d{depth}", q.id);
                let final_answer = q.final_answer(&state, on_track);
                let forced_final = render_prompt(instruction, &state, Some(&Forced::FinalAnswer));
                entries.push(entry(
                    forced_final.key(),
                    format!(" {final_answer}"),
                    format!("{tag} forced final"),
                ));
                if state.at_max_depth() {
                    continue;
                }
                let opening = render_prompt(instruction, &state, None).key();
                let Some(step) = q.steps.get(depth) else {
                    entries.push(entry(
                        opening,
                        format!("{FINAL_ANSWER} {final_answer}"),
                        format!("{tag} final"),
                    ));
                    continue;
                };
                let decision = if step.prefers_retrieval {
                    RETRIEVE_MARKER.to_string()
                } else {
                    format!("{INTERMEDIATE_ANSWER} {}", step.parametric_answer)
                };
                entries.push(entry(
                    opening,
                    format!("{FOLLOW_UP} {}\n{decision}", step.subquery),
                    format!("{tag} opening"),
                ));

                let parametric = Forced::Parametric {
                    subquery: step.subquery.clone(),
                };
                let prompt = render_prompt(instruction, &state, Some(&parametric));
                entries.push(entry(
                    prompt.key(),
                    format!(" {}", step.parametric_answer),
                    format!("{tag} parametric"),
                ));
                let child = state
                    .append_step(
                        step.subquery.clone(),
                        Response::parametric(step.parametric_answer.clone()),
                    )
                    .expect("depth checked");
                let retrieved_documents = fetch_passages(retriever, &step.subquery, config.k, config.body_chars);
                let retrieved_child = if retrieved_documents.is_empty() {
                    None
                } else {
                    let forced = Forced::Retrieved {
                        subquery: step.subquery.clone(),
                        documents: retrieved_documents.clone(),
                    };
                    let prompt = render_prompt(instruction, &state, Some(&forced));
                    entries.push(entry(
                        prompt.key(),
                        format!(" {}", step.retrieved_answer),
                        format!("{tag} retrieved"),
                    ));
                    Some(
                        state
                            .append_step(
                                step.subquery.clone(),
                                Response::retrieved(retrieved_documents, step.retrieved_answer.clone()),
                            )
                            .expect("depth checked"),
                    )
                };
                stack.push((child, on_track && step.parametric_correct()));
                if let Some(child) = retrieved_child {
                    stack.push((child, on_track && step.retrieved_correct()));
                }
            }
        }
        entries
    }
}
