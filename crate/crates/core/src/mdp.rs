//! The reasoning loop as a Markov decision process.
//!
//! A [`State`] is the question plus the `(subquery, response)` pairs produced
//! so far. At each state the model picks an [`Action`]: terminate with a final
//! answer, or continue with a new subquery answered either from parametric
//! knowledge or from retrieved documents. A finished [`Trajectory`] is scored
//! by [`trajectory_reward`], which ranks every correct trajectory above every
//! incorrect one and, among correct ones, prefers fewer retrievals.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

/// Default maximum number of subqueries in a trajectory.
pub const DEFAULT_MAX_DEPTH: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MdpError {
    #[error("state already holds the maximum of {max} steps")]
    DepthExceeded { max: usize },
    #[error("subquery is empty")]
    EmptySubquery,
    #[error("response answer is empty")]
    EmptyAnswer,
    #[error("retrieved response carries no documents")]
    NoDocuments,
    #[error("invalid question {id:?}: {reason}")]
    InvalidInstance { id: String, reason: &'static str },
}

/// A question with one or more gold answer aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

impl QAInstance {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<String>,
    ) -> Result<Self, MdpError> {
        let instance = QAInstance {
            id: id.into(),
            question: question.into(),
            gold_answers,
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let invalid = |reason| MdpError::InvalidInstance {
            id: self.id.clone(),
            reason,
        };
        if self.question.trim().is_empty() {
            return Err(invalid("question is empty"));
        }
        if self.gold_answers.is_empty() {
            return Err(invalid("no gold answers"));
        }
        if self.gold_answers.iter().any(|g| g.trim().is_empty()) {
            return Err(invalid("empty gold answer"));
        }
        Ok(())
    }
}

/// A retrieved passage. `body` is the text as rendered into prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub score: f64,
}

/// The answer to one subquery.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Parametric { answer: String },
    Retrieved { documents: Vec<Document>, answer: String },
}

impl Response {
    pub fn parametric(answer: impl Into<String>) -> Self {
        Response::Parametric { answer: answer.into() }
    }

    pub fn retrieved(documents: Vec<Document>, answer: impl Into<String>) -> Self {
        Response::Retrieved {
            documents,
            answer: answer.into(),
        }
    }

    pub fn answer(&self) -> &str {
        match self {
            Response::Parametric { answer } | Response::Retrieved { answer, .. } => answer,
        }
    }

    pub fn is_retrieved(&self) -> bool {
        matches!(self, Response::Retrieved { .. })
    }

    pub fn documents(&self) -> &[Document] {
        match self {
            Response::Parametric { .. } => &[],
            Response::Retrieved { documents, .. } => documents,
        }
    }

    pub fn atomic(&self) -> Atomic {
        if self.is_retrieved() {
            Atomic::Retrieve
        } else {
            Atomic::Parametric
        }
    }

    fn validate(&self) -> Result<(), MdpError> {
        if self.answer().trim().is_empty() {
            return Err(MdpError::EmptyAnswer);
        }
        if let Response::Retrieved { documents, .. } = self {
            if documents.is_empty() {
                return Err(MdpError::NoDocuments);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub subquery: String,
    pub response: Response,
}

/// Partial solution: the question and the steps taken so far.
///
/// States are values. [`State::append_step`] returns a new state and leaves
/// `self` untouched; the prefix is shared verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    question: Arc<QAInstance>,
    steps: Vec<Step>,
    max_depth: usize,
}

impl State {
    pub fn new(question: Arc<QAInstance>, max_depth: usize) -> Self {
        State {
            question,
            steps: Vec::new(),
            max_depth,
        }
    }

    pub fn question(&self) -> &QAInstance {
        &self.question
    }

    pub fn question_arc(&self) -> &Arc<QAInstance> {
        &self.question
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn at_max_depth(&self) -> bool {
        self.steps.len() >= self.max_depth
    }

    pub fn append_step(&self, subquery: impl Into<String>, response: Response) -> Result<State, MdpError> {
        if self.at_max_depth() {
            return Err(MdpError::DepthExceeded { max: self.max_depth });
        }
        let subquery = subquery.into();
        if subquery.trim().is_empty() {
            return Err(MdpError::EmptySubquery);
        }
        response.validate()?;
        let mut steps = Vec::with_capacity(self.steps.len() + 1);
        steps.extend_from_slice(&self.steps);
        steps.push(Step { subquery, response });
        Ok(State {
            question: Arc::clone(&self.question),
            steps,
            max_depth: self.max_depth,
        })
    }

    pub fn retrieval_count(&self) -> usize {
        retrieval_count(self)
    }
}

/// Number of retrieved responses in the state.
pub fn retrieval_count(state: &State) -> usize {
    state.steps.iter().filter(|s| s.response.is_retrieved()).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Continue,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Atomic {
    Retrieve,
    Parametric,
}

/// Termination decision plus, when continuing, the atomic decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Action {
    termination: Termination,
    atomic: Option<Atomic>,
}

impl Action {
    pub fn terminate() -> Self {
        Action {
            termination: Termination::Terminate,
            atomic: None,
        }
    }

    pub fn continue_with(atomic: Atomic) -> Self {
        Action {
            termination: Termination::Continue,
            atomic: Some(atomic),
        }
    }

    pub fn termination(&self) -> Termination {
        self.termination
    }

    pub fn atomic(&self) -> Option<Atomic> {
        self.atomic
    }
}

/// A terminal state with its final answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state: State,
    pub final_answer: String,
    pub retrieval_count: usize,
    pub correct: Option<bool>,
    /// The final answer was forced because the state reached the depth cap.
    pub depth_forced: bool,
}

impl Trajectory {
    pub fn new(state: State, final_answer: impl Into<String>) -> Self {
        let retrieval_count = state.retrieval_count();
        Trajectory {
            state,
            final_answer: final_answer.into(),
            retrieval_count,
            correct: None,
            depth_forced: false,
        }
    }

    pub fn judged(mut self, correct: bool) -> Self {
        self.correct = Some(correct);
        self
    }

    pub fn steps(&self) -> &[Step] {
        self.state.steps()
    }

    pub fn question(&self) -> &QAInstance {
        self.state.question()
    }

    /// The atomic decision taken at each step.
    pub fn decisions(&self) -> Vec<Atomic> {
        self.steps().iter().map(|s| s.response.atomic()).collect()
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord::from(self)
    }
}

/// Terminal reward. `Incorrect` is the bottom element; among correct
/// trajectories fewer retrievals rank higher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reward {
    Incorrect,
    Correct { retrieval_count: usize },
}

impl Ord for Reward {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Reward::Incorrect, Reward::Incorrect) => Ordering::Equal,
            (Reward::Incorrect, Reward::Correct { .. }) => Ordering::Less,
            (Reward::Correct { .. }, Reward::Incorrect) => Ordering::Greater,
            (Reward::Correct { retrieval_count: a }, Reward::Correct { retrieval_count: b }) => b.cmp(a),
        }
    }
}

impl PartialOrd for Reward {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn trajectory_reward<M>(traj: &Trajectory, gold: &QAInstance, matcher: M) -> Reward
where
    M: Fn(&str, &[String]) -> bool,
{
    if matcher(&traj.final_answer, &gold.gold_answers) {
        Reward::Correct {
            retrieval_count: traj.retrieval_count,
        }
    } else {
        Reward::Incorrect
    }
}

/// Shaped reward for policy-gradient training: 0 for a wrong answer in the
/// wrong format, 0.1 for a wrong answer in the right format, and
/// `1 - 0.1 * min(5, retrievals)` for a correct answer.
pub fn rl_shaped_reward<F: Scalar>(answer_correct: bool, format_ok: bool, retrieve_count: usize) -> F {
    if answer_correct {
        // (10 - n) / 10 is correctly rounded, unlike 1 - 0.1 * n.
        F::count(10 - retrieve_count.min(5)) / F::count(10)
    } else if format_ok {
        F::lit(0.1)
    } else {
        F::zero()
    }
}

/// JSONL form of a trajectory. Documents are recorded by id only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub question: String,
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    pub retrieval_count: usize,
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub depth_forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub subquery: String,
    pub retrieved: bool,
    pub doc_ids: Vec<String>,
    pub answer: String,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            id: t.question().id.clone(),
            question: t.question().question.clone(),
            steps: t
                .steps()
                .iter()
                .map(|s| StepRecord {
                    subquery: s.subquery.clone(),
                    retrieved: s.response.is_retrieved(),
                    doc_ids: s.response.documents().iter().map(|d| d.doc_id.clone()).collect(),
                    answer: s.response.answer().to_string(),
                })
                .collect(),
            final_answer: t.final_answer.clone(),
            retrieval_count: t.retrieval_count,
            correct: t.correct,
            depth_forced: t.depth_forced,
        }
    }
}
