//! The answer-format protocol.
//!
//! A transcript is line-oriented:
//!
//! ```text
//! Question: <question>
//! Follow up: <subquery>
//! Let's search the question in Wikipedia.      (retrieved steps only)
//! Context: <passage>\t<passage>...             (retrieved steps only)
//! Intermediate answer: <answer>
//! ...
//! So the final answer is: <answer>
//! ```
//!
//! Markers are case-sensitive and must start a line; whitespace around the
//! line is ignored. Passages inside a `Context:` line are separated by tabs,
//! which never occur in rendered passage bodies.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdp::{Document, Response, State, Step};

pub const QUESTION: &str = "Question:";
pub const FOLLOW_UP: &str = "Follow up:";
pub const RETRIEVE_MARKER: &str = "Let's search the question in Wikipedia.";
pub const CONTEXT: &str = "Context:";
pub const INTERMEDIATE_ANSWER: &str = "Intermediate answer:";
pub const FINAL_ANSWER: &str = "So the final answer is:";

const MARKERS: [&str; 6] = [
    QUESTION,
    FOLLOW_UP,
    RETRIEVE_MARKER,
    CONTEXT,
    INTERMEDIATE_ANSWER,
    FINAL_ANSWER,
];

pub const PASSAGE_SEPARATOR: char = '\t';

/// System instruction for decomposition with per-subquery retrieval decisions.
pub const DEFAULT_INSTRUCTION: &str = "Instruction: You are a helpful Retrieval-Augmented Generation (RAG) model. \
Your task is to answer questions by logically decomposing them into clear sub-questions and iteratively addressing each one.\n\
Use \"Follow up:\" to introduce each sub-question and \"Intermediate answer:\" to provide answers.\n\
For each sub-question, decide whether you can provide a direct answer or if additional information is required. \
If additional information is needed, state, \"Let's search the question in Wikipedia.\" and then use the retrieved \
information to respond comprehensively. If a direct answer is possible, provide it immediately without searching.";

/// Stop sequences for an opening turn (subquery plus decision, or final answer).
pub const TURN_STOPS: [&str; 4] = ["\nContext:", "\nFollow up:", "\nSo the final answer is:", "\nQuestion:"];

/// Stop sequences for a forced answer continuation.
pub const ANSWER_STOPS: [&str; 6] = [
    "\nContext:",
    "\nFollow up:",
    "\nSo the final answer is:",
    "\nQuestion:",
    "\nIntermediate answer:",
    "\nLet's search the question in Wikipedia.",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed turn: {snippet:?}")]
    MalformedTurn { snippet: String },
}

fn malformed(text: &str) -> ProtocolError {
    ProtocolError::MalformedTurn {
        snippet: text.chars().take(120).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: String,
    pub transcript: String,
    pub forced_prefix: Option<String>,
}

impl Prompt {
    /// Text the model continues from: transcript, newline, forced prefix.
    pub fn continuation_text(&self) -> String {
        match &self.forced_prefix {
            Some(prefix) => format!("{}\n{}", self.transcript, prefix),
            None => format!("{}\n", self.transcript),
        }
    }

    /// Instruction followed by the continuation text.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.instruction, self.continuation_text())
    }

    /// Stable key used by scripted fixtures.
    pub fn key(&self) -> String {
        prompt_key(&self.transcript, self.forced_prefix.as_deref())
    }
}

/// SHA-256 hex of `transcript`, a NUL byte, then the forced prefix (if any).
pub fn prompt_key(transcript: &str, forced_prefix: Option<&str>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(transcript.as_bytes());
    hasher.update([0u8]);
    hasher.update(forced_prefix.unwrap_or("").as_bytes());
    hex::encode(hasher.finalize())
}

/// A protocol line the model is forced to continue from.
#[derive(Debug, Clone, PartialEq)]
pub enum Forced {
    /// Answer `subquery` from parametric knowledge.
    Parametric { subquery: String },
    /// Answer `subquery` from the given passages.
    Retrieved { subquery: String, documents: Vec<Document> },
    /// Give the final answer now.
    FinalAnswer,
}

/// Collapses line breaks so a field stays on its protocol line.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Context line payload: passage bodies joined by tabs.
pub fn context_payload(documents: &[Document]) -> String {
    let sep = PASSAGE_SEPARATOR.to_string();
    documents.iter().map(|d| d.body.as_str()).collect::<Vec<_>>().join(&sep)
}

/// Rendered steps plus the character ranges holding passage text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSteps {
    pub text: String,
    /// `(start, end)` character offsets of each `Context:` payload.
    pub context_spans: Vec<(usize, usize)>,
}

struct LineWriter {
    text: String,
    chars: usize,
    spans: Vec<(usize, usize)>,
}

impl LineWriter {
    fn new() -> Self {
        LineWriter {
            text: String::new(),
            chars: 0,
            spans: Vec::new(),
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn newline(&mut self) {
        if !self.text.is_empty() {
            self.push("\n");
        }
    }

    fn line(&mut self, marker: &str, content: &str) {
        self.newline();
        self.push(marker);
        if !content.is_empty() {
            self.push(" ");
            self.push(content);
        }
    }

    fn context(&mut self, documents: &[Document]) {
        self.newline();
        self.push(CONTEXT);
        self.push(" ");
        let start = self.chars;
        self.push(&context_payload(documents));
        self.spans.push((start, self.chars));
    }

    fn retrieval_head(&mut self, subquery: &str, documents: &[Document]) {
        self.line(FOLLOW_UP, &one_line(subquery));
        self.line(RETRIEVE_MARKER, "");
        self.context(documents);
    }
}

/// Serializes steps in protocol order, one line per marker.
pub fn render_steps(steps: &[Step]) -> RenderedSteps {
    let mut w = LineWriter::new();
    for step in steps {
        match &step.response {
            Response::Parametric { answer } => {
                w.line(FOLLOW_UP, &one_line(&step.subquery));
                w.line(INTERMEDIATE_ANSWER, &one_line(answer));
            }
            Response::Retrieved { documents, answer } => {
                w.retrieval_head(&step.subquery, documents);
                w.line(INTERMEDIATE_ANSWER, &one_line(answer));
            }
        }
    }
    RenderedSteps {
        text: w.text,
        context_spans: w.spans,
    }
}

/// `Question: <x>` followed by the rendered steps.
pub fn render_transcript(state: &State) -> String {
    let mut transcript = format!("{QUESTION} {}", one_line(&state.question().question));
    let steps = render_steps(state.steps());
    if !steps.text.is_empty() {
        transcript.push('\n');
        transcript.push_str(&steps.text);
    }
    transcript
}

fn forced_prefix(forced: &Forced) -> String {
    let mut w = LineWriter::new();
    match forced {
        Forced::Parametric { subquery } => {
            w.line(FOLLOW_UP, &one_line(subquery));
            w.line(INTERMEDIATE_ANSWER, "");
        }
        Forced::Retrieved { subquery, documents } => {
            w.retrieval_head(subquery, documents);
            w.line(INTERMEDIATE_ANSWER, "");
        }
        Forced::FinalAnswer => w.line(FINAL_ANSWER, ""),
    }
    w.text
}

pub fn render_prompt(instruction: &str, state: &State, forced: Option<&Forced>) -> Prompt {
    Prompt {
        instruction: instruction.to_string(),
        transcript: render_transcript(state),
        forced_prefix: forced.map(forced_prefix),
    }
}

/// What the model decided for a subquery in an opening turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    RetrieveMarker,
    ParametricAnswer { answer: String },
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedTurn {
    FollowUp {
        subquery: String,
        decision: Decision,
    },
    Final {
        answer: String,
    },
    /// Text of a forced answer continuation.
    Answer {
        answer: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expecting {
    OpeningTurn,
    AnswerContinuation,
}

fn marker_of(line: &str) -> Option<(&'static str, &str)> {
    let line = line.trim();
    MARKERS
        .iter()
        .find(|m| line.starts_with(**m))
        .map(|m| (*m, line[m.len()..].trim()))
}

/// Content of a marker line plus any unmarked continuation lines after it.
fn field(lines: &[&str], at: usize, first: &str) -> (String, usize) {
    let mut parts = vec![first.to_string()];
    let mut next = at + 1;
    while next < lines.len() && marker_of(lines[next]).is_none() {
        parts.push(lines[next].to_string());
        next += 1;
    }
    (one_line(&parts.join(" ")), next)
}

pub fn parse_turn(emission: &str, expecting: Expecting) -> Result<ParsedTurn, ProtocolError> {
    let lines: Vec<&str> = emission.lines().collect();
    match expecting {
        Expecting::OpeningTurn => parse_opening(&lines).ok_or_else(|| malformed(emission)),
        Expecting::AnswerContinuation => {
            let mut parts = Vec::new();
            for (i, line) in lines.iter().enumerate() {
                match marker_of(line) {
                    None => parts.push(line.trim()),
                    // an echoed answer marker on the first line is tolerated
                    Some((m, rest)) if i == 0 && (m == INTERMEDIATE_ANSWER || m == FINAL_ANSWER) => parts.push(rest),
                    Some(_) => break,
                }
            }
            let answer = one_line(&parts.join(" "));
            if answer.is_empty() {
                Err(malformed(emission))
            } else {
                Ok(ParsedTurn::Answer { answer })
            }
        }
    }
}

fn parse_opening(lines: &[&str]) -> Option<ParsedTurn> {
    for (i, line) in lines.iter().enumerate() {
        if let Some((FINAL_ANSWER, rest)) = marker_of(line) {
            let (answer, _) = field(lines, i, rest);
            return (!answer.is_empty()).then_some(ParsedTurn::Final { answer });
        }
    }
    let at = lines
        .iter()
        .position(|l| matches!(marker_of(l), Some((FOLLOW_UP, _))))?;
    let (subquery, next) = field(lines, at, marker_of(lines[at])?.1);
    if subquery.is_empty() {
        return None;
    }
    let decision = match lines.get(next).and_then(|l| marker_of(l)) {
        Some((RETRIEVE_MARKER, _)) => Decision::RetrieveMarker,
        Some((INTERMEDIATE_ANSWER, rest)) => {
            let (answer, _) = field(lines, next, rest);
            if answer.is_empty() {
                Decision::Undecided
            } else {
                Decision::ParametricAnswer { answer }
            }
        }
        _ => Decision::Undecided,
    };
    Some(ParsedTurn::FollowUp { subquery, decision })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStep {
    pub subquery: String,
    /// Passage texts for retrieved steps, `None` for parametric ones.
    pub passages: Option<Vec<String>>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTranscript {
    pub question: String,
    pub steps: Vec<ParsedStep>,
    pub final_answer: Option<String>,
}

/// Parses a full transcript (optionally ending in a final answer) turn by turn.
pub fn parse_transcript(text: &str) -> Result<ParsedTranscript, ProtocolError> {
    let lines: Vec<&str> = text.lines().collect();
    let question = match lines.first().and_then(|l| marker_of(l)) {
        Some((QUESTION, rest)) => rest.to_string(),
        _ => return Err(malformed(text)),
    };
    let starts: Vec<usize> = lines
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| matches!(marker_of(l), Some((FOLLOW_UP | FINAL_ANSWER, _))))
        .map(|(i, _)| i)
        .collect();
    if starts.first().is_some_and(|&s| s != 1) || (starts.is_empty() && lines.len() > 1) {
        return Err(malformed(text));
    }
    let mut steps = Vec::new();
    let mut final_answer = None;
    for (n, &start) in starts.iter().enumerate() {
        if final_answer.is_some() {
            return Err(malformed(text));
        }
        let end = starts.get(n + 1).copied().unwrap_or(lines.len());
        let chunk = &lines[start..end];
        match parse_opening(chunk).ok_or_else(|| malformed(&chunk.join("\n")))? {
            ParsedTurn::Final { answer } => final_answer = Some(answer),
            ParsedTurn::FollowUp { subquery, decision } => {
                let step = match decision {
                    Decision::ParametricAnswer { answer } => ParsedStep {
                        subquery,
                        passages: None,
                        answer,
                    },
                    Decision::RetrieveMarker => {
                        let context = chunk.iter().find_map(|l| match marker_of(l) {
                            Some((CONTEXT, _)) => Some(
                                l.trim_start()[CONTEXT.len()..]
                                    .trim_start_matches(' ')
                                    .trim_end_matches(['\n', '\r', ' '])
                                    .split(PASSAGE_SEPARATOR)
                                    .map(str::to_string)
                                    .collect::<Vec<_>>(),
                            ),
                            _ => None,
                        });
                        let answer = chunk.iter().enumerate().find_map(|(i, l)| match marker_of(l) {
                            Some((INTERMEDIATE_ANSWER, rest)) => Some(field(chunk, i, rest).0),
                            _ => None,
                        });
                        match (context, answer) {
                            (Some(passages), Some(answer)) if !answer.is_empty() => ParsedStep {
                                subquery,
                                passages: Some(passages),
                                answer,
                            },
                            _ => return Err(malformed(&chunk.join("\n"))),
                        }
                    }
                    Decision::Undecided => return Err(malformed(&chunk.join("\n"))),
                };
                steps.push(step);
            }
            ParsedTurn::Answer { .. } => unreachable!("opening parser never yields Answer"),
        }
    }
    Ok(ParsedTranscript {
        question,
        steps,
        final_answer,
    })
}

/// Cuts `text` at the earliest stop sequence.
pub fn truncate_at_stops<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}
