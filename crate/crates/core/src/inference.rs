//! Test-time reasoning loop: adaptive mode, where the model takes both the
//! termination and the atomic decisions, and two forced baselines.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::protocol::render_prompt;
use crate::gateway::{request_answer, request_turn, CallMeter, Decision, Forced, Gateway, GatewayError, ParsedTurn};
use crate::mdp::{MdpError, QAInstance, Response, State, Trajectory, TrajectoryRecord};
use crate::metrics::normalize_answer;
use crate::retriever::{fetch_passages, Retriever};
use crate::search::SearchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// The model decides when to retrieve and when to stop.
    Adaptive,
    /// Every subquery is answered from retrieved passages.
    #[serde(rename = "retrieve-all")]
    RetrieveEveryStep,
    /// Retrieval is never invoked.
    #[serde(rename = "parametric")]
    ParametricOnly,
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Adaptive => "adaptive",
            InferenceMode::RetrieveEveryStep => "retrieve-all",
            InferenceMode::ParametricOnly => "parametric",
        }
    }
}

/// One JSONL line of inference output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub question_id: String,
    pub final_answer: String,
    /// Steps taken, with retrieved documents recorded by id.
    pub trajectory: TrajectoryRecord,
    pub n_subqueries: usize,
    pub n_retrievals: usize,
    pub model_calls: usize,
    /// Seconds.
    pub wall_time: f64,
    #[serde(default)]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

impl InferenceResult {
    pub fn from_trajectory(question_id: &str, trajectory: Trajectory, model_calls: usize, wall_time: f64) -> Self {
        let record = trajectory.to_record();
        InferenceResult {
            question_id: question_id.to_string(),
            final_answer: trajectory.final_answer.clone(),
            n_subqueries: record.steps.len(),
            n_retrievals: record.retrieval_count,
            trajectory: record,
            model_calls,
            wall_time,
            failed: false,
            failure_reason: None,
        }
    }

    fn failure(state: State, reason: String, model_calls: usize, wall_time: f64) -> Self {
        let id = state.question().id.clone();
        let mut result = Self::from_trajectory(&id, Trajectory::new(state, ""), model_calls, wall_time);
        result.failed = true;
        result.failure_reason = Some(reason);
        result
    }
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

struct Loop<'a> {
    gateway: &'a Gateway,
    retriever: &'a dyn Retriever,
    mode: InferenceMode,
    config: &'a SearchConfig,
    meter: CallMeter,
}

impl Loop<'_> {
    fn answer(&mut self, state: &State, forced: &Forced) -> Result<String, GatewayError> {
        let prompt = render_prompt(&self.config.instruction, state, Some(forced));
        request_answer(self.gateway, &prompt, &mut self.meter, &self.config.decode)
    }

    fn finish(&mut self, state: State, depth_forced: bool) -> Result<Trajectory, StepError> {
        let answer = self.answer(&state, &Forced::FinalAnswer)?;
        let mut traj = Trajectory::new(state, answer);
        traj.depth_forced = depth_forced;
        Ok(traj)
    }

    fn parametric_step(&mut self, state: &State, subquery: String) -> Result<State, StepError> {
        let answer = self.answer(
            state,
            &Forced::Parametric {
                subquery: subquery.clone(),
            },
        )?;
        Ok(state.append_step(subquery, Response::parametric(answer))?)
    }

    fn run(&mut self, state: &mut State) -> Result<Trajectory, StepError> {
        let mut seen = HashSet::new();
        loop {
            if state.at_max_depth() {
                return self.finish(state.clone(), true);
            }
            let prompt = render_prompt(&self.config.instruction, state, None);
            let (subquery, decision) = match request_turn(self.gateway, &prompt, &mut self.meter, &self.config.decode)?
            {
                ParsedTurn::Final { answer } => return Ok(Trajectory::new(state.clone(), answer)),
                ParsedTurn::FollowUp { subquery, decision } => (subquery, decision),
                ParsedTurn::Answer { .. } => unreachable!("opening turn parsed as a continuation"),
            };
            if !seen.insert(normalize_answer(&subquery)) {
                log::debug!(
                    "{}: repeated subquery {subquery:?}, forcing final answer",
                    state.question().id
                );
                return self.finish(state.clone(), false);
            }
            let retrieve = match self.mode {
                InferenceMode::Adaptive => decision == Decision::RetrieveMarker,
                InferenceMode::RetrieveEveryStep => true,
                InferenceMode::ParametricOnly => false,
            };
            *state = if retrieve {
                let documents = fetch_passages(self.retriever, &subquery, self.config.k, self.config.body_chars);
                if documents.is_empty() {
                    self.parametric_step(state, subquery)?
                } else {
                    let forced = Forced::Retrieved {
                        subquery: subquery.clone(),
                        documents: documents.clone(),
                    };
                    let answer = self.answer(state, &forced)?;
                    state.append_step(subquery, Response::retrieved(documents, answer))?
                }
            } else {
                match decision {
                    Decision::ParametricAnswer { answer } => {
                        state.append_step(subquery, Response::parametric(answer))?
                    }
                    Decision::RetrieveMarker | Decision::Undecided => self.parametric_step(state, subquery)?,
                }
            };
        }
    }
}

/// Answers one question. Never fails: model errors and exhausted budgets
/// produce a result with `failed` set and an empty answer.
pub fn run(
    question: Arc<QAInstance>,
    gateway: &Gateway,
    retriever: &dyn Retriever,
    mode: InferenceMode,
    config: &SearchConfig,
) -> InferenceResult {
    let start = Instant::now();
    let mut state = State::new(Arc::clone(&question), config.budget.max_depth);
    let mut lp = Loop {
        gateway,
        retriever,
        mode,
        config,
        meter: CallMeter::new(config.budget.max_model_calls),
    };
    let outcome = lp.run(&mut state);
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(traj) => InferenceResult::from_trajectory(&question.id, traj, lp.meter.used, elapsed),
        Err(e) => {
            log::warn!("{}: {e}", question.id);
            InferenceResult::failure(state, e.to_string(), lp.meter.used, elapsed)
        }
    }
}

/// Runs questions on `jobs` worker threads. Results keep input order.
pub fn run_batch(
    questions: &[Arc<QAInstance>],
    gateway: &Gateway,
    retriever: &dyn Retriever,
    mode: InferenceMode,
    config: &SearchConfig,
    jobs: usize,
) -> Vec<InferenceResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        questions
            .par_iter()
            .map(|q| run(Arc::clone(q), gateway, retriever, mode, config))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GenerationRequest, Generator, ScriptedModel};
    use crate::retriever::CountingRetriever;
    use crate::search::SearchBudget;
    use crate::world::{World, WorldQuestion, WorldStep};

    fn world_with(prefs: &[bool]) -> World {
        let steps = prefs
            .iter()
            .enumerate()
            .map(|(i, &p)| WorldStep::synthetic(&format!("s{i}"), i, true, true, p))
            .collect();
        World::new(vec![WorldQuestion::synthetic("q", steps)])
    }

    fn gateway(world: &World, config: &SearchConfig) -> Gateway {
        let index = world.index();
        Gateway::new(Arc::new(
            ScriptedModel::from_entries(world.script(&index, config)).unwrap(),
        ))
    }

    #[test]
    fn mode_semantics_on_three_steps() {
        let world = world_with(&[false, true, false]);
        let config = SearchConfig::default();
        let gw = gateway(&world, &config);
        let q = world.instances().remove(0);
        let counting = CountingRetriever::new(world.index());

        let adaptive = run(Arc::clone(&q), &gw, &counting, InferenceMode::Adaptive, &config);
        assert!(!adaptive.failed, "{:?}", adaptive.failure_reason);
        assert_eq!(adaptive.n_retrievals, 1);
        let flags: Vec<bool> = adaptive.trajectory.steps.iter().map(|s| s.retrieved).collect();
        assert_eq!(flags, vec![false, true, false]);
        assert_eq!(adaptive.final_answer, world.questions[0].answer);

        let all = run(
            Arc::clone(&q),
            &gw,
            &counting,
            InferenceMode::RetrieveEveryStep,
            &config,
        );
        assert_eq!((all.n_retrievals, all.n_subqueries), (3, 3));

        let before = counting.calls();
        let parametric = run(q, &gw, &counting, InferenceMode::ParametricOnly, &config);
        assert_eq!(parametric.n_retrievals, 0);
        assert_eq!(counting.calls(), before);
    }

    #[test]
    fn never_retrieving_model_matches_parametric_only() {
        let world = world_with(&[false, false]);
        let config = SearchConfig::default();
        let gw = gateway(&world, &config);
        let index = world.index();
        let q = world.instances().remove(0);
        let a = run(Arc::clone(&q), &gw, &index, InferenceMode::Adaptive, &config);
        let b = run(q, &gw, &index, InferenceMode::ParametricOnly, &config);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.model_calls, b.model_calls);
    }

    #[test]
    fn depth_cap_forces_final() {
        let world = world_with(&[false, false, false]);
        let config = SearchConfig {
            budget: SearchBudget {
                max_depth: 2,
                ..SearchBudget::default()
            },
            ..SearchConfig::default()
        };
        let gw = gateway(&world, &config);
        let r = run(
            world.instances().remove(0),
            &gw,
            &world.index(),
            InferenceMode::Adaptive,
            &config,
        );
        assert!(r.trajectory.depth_forced);
        assert_eq!(r.n_subqueries, 2);
        assert!(!r.failed);
    }

    struct Looping;
    impl Generator for Looping {
        fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
            Ok(match request.prompt.forced_prefix.as_deref() {
                None => "Follow up: What is it?\nIntermediate answer: same".into(),
                Some(_) => " done".into(),
            })
        }
    }

    #[test]
    fn repeated_subquery_terminates() {
        let world = world_with(&[false]);
        let gw = Gateway::new(Arc::new(Looping));
        let r = run(
            world.instances().remove(0),
            &gw,
            &world.index(),
            InferenceMode::Adaptive,
            &SearchConfig::default(),
        );
        assert_eq!(r.n_subqueries, 1);
        assert_eq!(r.final_answer, "done");
    }

    struct Garbage;
    impl Generator for Garbage {
        fn complete(&self, _: &GenerationRequest) -> Result<String, GatewayError> {
            Ok("no markers here".into())
        }
    }

    #[test]
    fn double_malformed_turn_fails_softly() {
        let world = world_with(&[false]);
        let gw = Gateway::new(Arc::new(Garbage));
        let r = run(
            world.instances().remove(0),
            &gw,
            &world.index(),
            InferenceMode::Adaptive,
            &SearchConfig::default(),
        );
        assert!(r.failed);
        assert_eq!(r.final_answer, "");
        assert_eq!(r.model_calls, 2);
        assert!(r.failure_reason.unwrap().contains("malformed"));
    }

    #[test]
    fn batch_keeps_input_order() {
        let world = World::random(5, 12);
        let config = SearchConfig::default();
        let gw = gateway(&world, &config);
        let index = world.index();
        let qs = world.instances();
        let results = run_batch(&qs, &gw, &index, InferenceMode::Adaptive, &config, 4);
        let ids: Vec<_> = results.iter().map(|r| r.question_id.clone()).collect();
        let expected: Vec<_> = qs.iter().map(|q| q.id.clone()).collect();
        assert_eq!(ids, expected);
        assert!(results.iter().all(|r| !r.failed));
    }

    #[test]
    fn result_round_trips_as_json() {
        let world = world_with(&[true]);
        let config = SearchConfig::default();
        let gw = gateway(&world, &config);
        let r = run(
            world.instances().remove(0),
            &gw,
            &world.index(),
            InferenceMode::Adaptive,
            &config,
        );
        let line = serde_json::to_string(&r).unwrap();
        let back: InferenceResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
