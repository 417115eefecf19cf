//! Best-first binary-tree search for the correct trajectory with the fewest
//! retrievals, and an exhaustive enumeration used as its test oracle.
//!
//! Each expanded node asks the decomposer for the next subquery once, then
//! branches into a parametric child (answered by the target model, same
//! retrieval count) and a retrieved child (top-k passages, answered by the
//! decomposer, count + 1). A node whose opening turn is a final answer, or
//! whose depth reached the cap, is terminal and judged by exact match.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::protocol::{render_prompt, DEFAULT_INSTRUCTION};
use crate::gateway::{
    request_answer, request_turn, CallMeter, DecodeOptions, Forced, GatewayError, ModelRoles, ParsedTurn,
};
use crate::mdp::{MdpError, QAInstance, Response, State, Trajectory, DEFAULT_MAX_DEPTH};
use crate::metrics::exact_match;
use crate::retriever::{fetch_passages, Retriever, DEFAULT_BODY_CHARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    pub max_depth: usize,
    pub max_expansions: usize,
    pub max_model_calls: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            max_depth: DEFAULT_MAX_DEPTH,
            max_expansions: 64,
            max_model_calls: 256,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.max_depth == 0 || self.max_expansions == 0 || self.max_model_calls == 0 {
            return Err(SearchError::InvalidBudget(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum SelectionPolicy {
    Minimal,
    Most,
    Random { seed: u64 },
}

/// Settings shared by search and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: SearchBudget,
    /// Passages per retrieval.
    pub k: usize,
    pub body_chars: usize,
    pub instruction: String,
    pub decode: DecodeOptions,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: SearchBudget::default(),
            k: 3,
            body_chars: DEFAULT_BODY_CHARS,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            decode: DecodeOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search budget {0:?}")]
    InvalidBudget(SearchBudget),
    #[error("search budget exhausted ({0})")]
    BudgetExhausted(String),
    #[error("model error at node {seq} (depth {depth}): {source}")]
    Model {
        seq: u64,
        depth: usize,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Frontier entry.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub state: State,
    pub retrieval_count: usize,
    pub sequence_number: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Expanded,
    Correct,
    Incorrect,
    /// Opening turn stayed malformed after the retry; node dropped.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub seq: u64,
    pub depth: usize,
    pub retrieval_count: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchTermination {
    Found,
    QueueExhausted,
    BudgetExhausted,
}

/// One JSONL line of the search log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLog {
    pub question_id: String,
    pub policy: SelectionPolicy,
    pub termination: SearchTermination,
    pub expansions: usize,
    pub model_calls: usize,
    /// Dequeue order.
    pub events: Vec<SearchEvent>,
}

impl SearchLog {
    pub fn dequeued_counts(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.retrieval_count).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trajectory: Option<Trajectory>,
    pub log: SearchLog,
}

struct Keyed {
    key: (Reverse<i64>, Reverse<u64>),
    node: SearchNode,
}

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Keyed {}
impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

enum Frontier {
    Heap {
        heap: BinaryHeap<Keyed>,
        most: bool,
    },
    Pool {
        nodes: Vec<SearchNode>,
        rng: Box<ChaCha8Rng>,
    },
}

impl Frontier {
    fn new(policy: SelectionPolicy) -> Self {
        match policy {
            SelectionPolicy::Minimal => Frontier::Heap {
                heap: BinaryHeap::new(),
                most: false,
            },
            SelectionPolicy::Most => Frontier::Heap {
                heap: BinaryHeap::new(),
                most: true,
            },
            SelectionPolicy::Random { seed } => Frontier::Pool {
                nodes: Vec::new(),
                rng: Box::new(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    fn push(&mut self, node: SearchNode) {
        match self {
            Frontier::Heap { heap, most } => {
                let count = node.retrieval_count as i64;
                let primary = if *most { -count } else { count };
                heap.push(Keyed {
                    key: (Reverse(primary), Reverse(node.sequence_number)),
                    node,
                });
            }
            Frontier::Pool { nodes, .. } => nodes.push(node),
        }
    }

    fn pop(&mut self) -> Option<SearchNode> {
        match self {
            Frontier::Heap { heap, .. } => heap.pop().map(|k| k.node),
            Frontier::Pool { nodes, rng } => {
                if nodes.is_empty() {
                    None
                } else {
                    let i = rng.gen_range(0..nodes.len());
                    Some(nodes.swap_remove(i))
                }
            }
        }
    }
}

enum Expansion {
    Terminal(Trajectory),
    /// Parametric child first, then the retrieved child when passages exist.
    Children(Vec<State>),
    Malformed,
}

/// Model access for one question, with per-prompt memoization.
struct Session<'a> {
    roles: &'a ModelRoles,
    retriever: &'a dyn Retriever,
    config: &'a SearchConfig,
    meter: CallMeter,
    turns: HashMap<String, ParsedTurn>,
    answers: HashMap<String, String>,
}

enum Call<T> {
    Ok(T),
    Malformed,
}

impl<'a> Session<'a> {
    fn new(roles: &'a ModelRoles, retriever: &'a dyn Retriever, config: &'a SearchConfig) -> Self {
        Session {
            roles,
            retriever,
            config,
            meter: CallMeter::new(config.budget.max_model_calls),
            turns: HashMap::new(),
            answers: HashMap::new(),
        }
    }

    fn lift<T>(result: Result<T, GatewayError>, seq: u64, depth: usize) -> Result<Call<T>, SearchError> {
        match result {
            Ok(v) => Ok(Call::Ok(v)),
            Err(GatewayError::Malformed(_)) => Ok(Call::Malformed),
            Err(GatewayError::BudgetExceeded { cap }) => {
                Err(SearchError::BudgetExhausted(format!("model call cap {cap} reached")))
            }
            Err(source) => Err(SearchError::Model { seq, depth, source }),
        }
    }

    fn turn(&mut self, state: &State, seq: u64) -> Result<Call<ParsedTurn>, SearchError> {
        let prompt = render_prompt(&self.config.instruction, state, None);
        let key = prompt.key();
        if let Some(turn) = self.turns.get(&key) {
            return Ok(Call::Ok(turn.clone()));
        }
        let result = request_turn(&self.roles.decomposer, &prompt, &mut self.meter, &self.config.decode);
        let call = Self::lift(result, seq, state.depth())?;
        if let Call::Ok(turn) = &call {
            self.turns.insert(key, turn.clone());
        }
        Ok(call)
    }

    fn answer(&mut self, state: &State, forced: &Forced, seq: u64) -> Result<Call<String>, SearchError> {
        let prompt = render_prompt(&self.config.instruction, state, Some(forced));
        let key = prompt.key();
        if let Some(answer) = self.answers.get(&key) {
            return Ok(Call::Ok(answer.clone()));
        }
        let gateway = match forced {
            Forced::Parametric { .. } => &self.roles.target,
            Forced::Retrieved { .. } | Forced::FinalAnswer => &self.roles.decomposer,
        };
        let result = request_answer(gateway, &prompt, &mut self.meter, &self.config.decode);
        let call = Self::lift(result, seq, state.depth())?;
        if let Call::Ok(answer) = &call {
            self.answers.insert(key, answer.clone());
        }
        Ok(call)
    }

    fn judge(state: &State, answer: String, depth_forced: bool) -> Trajectory {
        let correct = exact_match(&answer, &state.question().gold_answers);
        let mut traj = Trajectory::new(state.clone(), answer).judged(correct);
        traj.depth_forced = depth_forced;
        traj
    }

    fn expand(&mut self, state: &State, seq: u64) -> Result<Expansion, SearchError> {
        if state.at_max_depth() {
            return Ok(match self.answer(state, &Forced::FinalAnswer, seq)? {
                Call::Ok(answer) => Expansion::Terminal(Self::judge(state, answer, true)),
                Call::Malformed => Expansion::Malformed,
            });
        }
        let (subquery, _) = match self.turn(state, seq)? {
            Call::Malformed => return Ok(Expansion::Malformed),
            Call::Ok(ParsedTurn::Final { answer }) => {
                return Ok(Expansion::Terminal(Self::judge(state, answer, false)))
            }
            Call::Ok(ParsedTurn::FollowUp { subquery, decision }) => (subquery, decision),
            Call::Ok(ParsedTurn::Answer { .. }) => unreachable!("opening turn parsed as a continuation"),
        };
        let mut children = Vec::with_capacity(2);
        let parametric = Forced::Parametric {
            subquery: subquery.clone(),
        };
        if let Call::Ok(answer) = self.answer(state, &parametric, seq)? {
            children.push(state.append_step(subquery.clone(), Response::parametric(answer))?);
        }
        let documents = fetch_passages(self.retriever, &subquery, self.config.k, self.config.body_chars);
        if !documents.is_empty() {
            let retrieved = Forced::Retrieved {
                subquery: subquery.clone(),
                documents: documents.clone(),
            };
            if let Call::Ok(answer) = self.answer(state, &retrieved, seq)? {
                children.push(state.append_step(subquery, Response::retrieved(documents, answer))?);
            }
        }
        Ok(Expansion::Children(children))
    }
}

/// Runs the best-first search. Returns the first correct trajectory the
/// policy dequeues, or none when the queue empties or the budget runs out
/// (the log tells the two apart).
pub fn synthesize(
    question: Arc<QAInstance>,
    roles: &ModelRoles,
    retriever: &dyn Retriever,
    config: &SearchConfig,
    policy: SelectionPolicy,
) -> Result<SearchOutcome, SearchError> {
    config.budget.validate()?;
    question.validate()?;
    let mut session = Session::new(roles, retriever, config);
    let mut frontier = Frontier::new(policy);
    let mut next_seq = 0u64;
    let mut events = Vec::new();
    let mut expansions = 0usize;
    frontier.push(SearchNode {
        state: State::new(Arc::clone(&question), config.budget.max_depth),
        retrieval_count: 0,
        sequence_number: next_seq,
    });
    next_seq += 1;

    let mut found = None;
    let termination = loop {
        let Some(node) = frontier.pop() else {
            break SearchTermination::QueueExhausted;
        };
        if expansions >= config.budget.max_expansions {
            break SearchTermination::BudgetExhausted;
        }
        expansions += 1;
        let expansion = match session.expand(&node.state, node.sequence_number) {
            Ok(e) => e,
            Err(SearchError::BudgetExhausted(reason)) => {
                log::debug!("{}: {reason}", question.id);
                break SearchTermination::BudgetExhausted;
            }
            Err(e) => return Err(e),
        };
        let mut event = SearchEvent {
            seq: node.sequence_number,
            depth: node.state.depth(),
            retrieval_count: node.retrieval_count,
            verdict: Verdict::Expanded,
        };
        match expansion {
            Expansion::Terminal(traj) => {
                let correct = traj.correct == Some(true);
                event.verdict = if correct { Verdict::Correct } else { Verdict::Incorrect };
                events.push(event);
                if correct {
                    found = Some(traj);
                    break SearchTermination::Found;
                }
            }
            Expansion::Malformed => {
                event.verdict = Verdict::Malformed;
                events.push(event);
            }
            Expansion::Children(children) => {
                events.push(event);
                for state in children {
                    let retrieval_count = state.retrieval_count();
                    frontier.push(SearchNode {
                        state,
                        retrieval_count,
                        sequence_number: next_seq,
                    });
                    next_seq += 1;
                }
            }
        }
    };
    Ok(SearchOutcome {
        trajectory: found,
        log: SearchLog {
            question_id: question.id.clone(),
            policy,
            termination,
            expansions,
            model_calls: session.meter.used,
            events,
        },
    })
}

/// Every terminal trajectory reachable by any retrieve/parametric decision
/// vector, each judged against the gold answers. Depth-first, parametric
/// branch first. Only usable at small depths.
pub fn enumerate_all(
    question: Arc<QAInstance>,
    roles: &ModelRoles,
    retriever: &dyn Retriever,
    config: &SearchConfig,
) -> Result<Vec<Trajectory>, SearchError> {
    config.budget.validate()?;
    question.validate()?;
    let mut session = Session::new(roles, retriever, config);
    let mut out = Vec::new();
    let mut stack = vec![State::new(question, config.budget.max_depth)];
    let mut seq = 0u64;
    while let Some(state) = stack.pop() {
        match session.expand(&state, seq)? {
            Expansion::Terminal(traj) => out.push(traj),
            Expansion::Malformed => {}
            Expansion::Children(children) => stack.extend(children.into_iter().rev()),
        }
        seq += 1;
    }
    Ok(out)
}

/// Fewest retrievals among correct trajectories.
pub fn min_correct_retrievals(trajectories: &[Trajectory]) -> Option<usize> {
    trajectories
        .iter()
        .filter(|t| t.correct == Some(true))
        .map(|t| t.retrieval_count)
        .min()
}
