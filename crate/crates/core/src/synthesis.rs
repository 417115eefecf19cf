//! Training data from trajectories: imitation examples whose retrieved
//! passages are masked out of the loss, and per-subquery preference pairs
//! that teach the atomic decision taken on the optimal path.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::protocol::{
    one_line, render_steps, render_transcript, FINAL_ANSWER, FOLLOW_UP, INTERMEDIATE_ANSWER, QUESTION, RETRIEVE_MARKER,
};
use crate::mdp::{trajectory_reward, Atomic, MdpError, Reward, State, Trajectory};
use crate::metrics::exact_match;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("trajectory for {id} is not known to be correct")]
    RejectedTrajectory { id: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Stage-I record. `mask_spans` are `[start, end)` character offsets into
/// `completion` covering passage text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImitationExample {
    pub prompt: String,
    pub completion: String,
    pub mask_spans: Vec<(usize, usize)>,
}

impl ImitationExample {
    /// Completion with masked characters removed.
    pub fn unmasked(&self) -> String {
        let mut out = String::new();
        let mut spans = self.mask_spans.iter().peekable();
        for (i, c) in self.completion.chars().enumerate() {
            while spans.peek().is_some_and(|(_, end)| *end <= i) {
                spans.next();
            }
            if !spans.peek().is_some_and(|(start, end)| *start <= i && i < *end) {
                out.push(c);
            }
        }
        out
    }

    /// Masked characters, span by span.
    pub fn masked(&self) -> Vec<String> {
        let chars: Vec<char> = self.completion.chars().collect();
        self.mask_spans
            .iter()
            .map(|&(s, e)| chars[s..e].iter().collect())
            .collect()
    }
}

/// Stage-II record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: String,
    pub chosen: String,
    pub rejected: String,
}

/// Where preference pairs come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    /// One pair per step of the minimal-retrieval trajectory.
    #[default]
    OptimalPath,
    /// One pair per tree node whose two subtrees differ in best reward.
    AllNodes,
    /// Whole completions: optimal against each strictly worse trajectory.
    SentenceWise,
}

/// Instruction, blank line, question line.
pub fn question_prompt(instruction: &str, question: &str) -> String {
    format!("{instruction}\n\n{QUESTION} {}\n", one_line(question))
}

/// Rendered steps followed by the final-answer line, plus passage spans.
pub fn completion_text(traj: &Trajectory) -> (String, Vec<(usize, usize)>) {
    let rendered = render_steps(traj.steps());
    let mut completion = rendered.text;
    if !completion.is_empty() {
        completion.push('\n');
    }
    completion.push_str(&format!("{FINAL_ANSWER} {}", one_line(&traj.final_answer)));
    (completion, rendered.context_spans)
}

pub fn to_imitation_example(traj: &Trajectory, instruction: &str) -> Result<ImitationExample, SynthesisError> {
    if traj.correct != Some(true) {
        return Err(SynthesisError::RejectedTrajectory {
            id: traj.question().id.clone(),
        });
    }
    let (completion, mask_spans) = completion_text(traj);
    Ok(ImitationExample {
        prompt: question_prompt(instruction, &traj.question().question),
        completion,
        mask_spans,
    })
}

fn snippets(atomic: Atomic) -> (String, String) {
    let answer = INTERMEDIATE_ANSWER.to_string();
    let marker = RETRIEVE_MARKER.to_string();
    match atomic {
        Atomic::Parametric => (answer, marker),
        Atomic::Retrieve => (marker, answer),
    }
}

/// The prompt at the decision for step `i`, ending right after the subquery line.
fn decision_context(instruction: &str, traj: &Trajectory, i: usize) -> Result<String, SynthesisError> {
    let mut prefix = State::new(traj.state.question_arc().clone(), traj.state.max_depth());
    for step in &traj.steps()[..i] {
        prefix = prefix.append_step(step.subquery.clone(), step.response.clone())?;
    }
    Ok(format!(
        "{instruction}\n\n{}\n{FOLLOW_UP} {}\n",
        render_transcript(&prefix),
        one_line(&traj.steps()[i].subquery)
    ))
}

/// One pair per step of the optimal trajectory: the decision it took is
/// chosen, the other one rejected.
pub fn build_preference_pairs(optimal: &Trajectory, instruction: &str) -> Result<Vec<PreferencePair>, SynthesisError> {
    optimal
        .steps()
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let (chosen, rejected) = snippets(step.response.atomic());
            Ok(PreferencePair {
                context: decision_context(instruction, optimal, i)?,
                chosen,
                rejected,
            })
        })
        .collect()
}

fn reward(traj: &Trajectory) -> Reward {
    trajectory_reward(traj, traj.question(), exact_match)
}

/// Pairs for every node of a fully enumerated tree: at each subquery the
/// decision whose subtree holds the better best reward is chosen. Nodes
/// whose subtrees tie, or where one branch is missing, yield nothing.
pub fn all_node_pairs(tree: &[Trajectory], instruction: &str) -> Result<Vec<PreferencePair>, SynthesisError> {
    struct Node {
        context: String,
        parametric: Option<Reward>,
        retrieve: Option<Reward>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut nodes: HashMap<String, Node> = HashMap::new();
    for traj in tree {
        let r = reward(traj);
        for (i, step) in traj.steps().iter().enumerate() {
            let context = decision_context(instruction, traj, i)?;
            let node = nodes.entry(context.clone()).or_insert_with(|| {
                order.push(context.clone());
                Node {
                    context,
                    parametric: None,
                    retrieve: None,
                }
            });
            let slot = match step.response.atomic() {
                Atomic::Parametric => &mut node.parametric,
                Atomic::Retrieve => &mut node.retrieve,
            };
            *slot = Some(slot.map_or(r, |best| best.max(r)));
        }
    }
    Ok(order
        .iter()
        .filter_map(|key| {
            let node = &nodes[key];
            let preferred = match (node.parametric?, node.retrieve?) {
                (p, q) if p > q => Atomic::Parametric,
                (p, q) if q > p => Atomic::Retrieve,
                _ => return None,
            };
            let (chosen, rejected) = snippets(preferred);
            Some(PreferencePair {
                context: node.context.clone(),
                chosen,
                rejected,
            })
        })
        .collect())
}

/// Whole-completion pairs: the optimal completion against every trajectory
/// with a strictly lower reward.
pub fn sentence_wise_pairs(optimal: &Trajectory, tree: &[Trajectory], instruction: &str) -> Vec<PreferencePair> {
    let best = reward(optimal);
    let context = question_prompt(instruction, &optimal.question().question);
    let (chosen, _) = completion_text(optimal);
    tree.iter()
        .filter(|t| reward(t) < best)
        .map(|t| PreferencePair {
            context: context.clone(),
            chosen: chosen.clone(),
            rejected: completion_text(t).0,
        })
        .collect()
}
