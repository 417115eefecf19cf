//! Model invocation: prompt protocol, backends, and the per-question call
//! helpers used by search and inference.

mod http;
pub mod protocol;
mod scripted;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{EndpointConfig, HttpModel};
pub use protocol::{
    parse_transcript, parse_turn, render_prompt, render_steps, render_transcript, Decision, Expecting, Forced,
    ParsedStep, ParsedTranscript, ParsedTurn, Prompt, ProtocolError, RenderedSteps,
};
pub use scripted::{ScriptEntry, ScriptMatch, ScriptedModel};

/// Default cap on simultaneous requests per gateway.
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint {url} unreachable after {attempts} attempts: {message}")]
    EndpointUnreachable {
        url: String,
        attempts: usize,
        message: String,
    },
    #[error("model call budget of {cap} exhausted")]
    BudgetExceeded { cap: usize },
    #[error("scripted model has no entry for prompt {key} (transcript ends with {tail:?})")]
    ScriptMiss { key: String, tail: String },
    #[error(transparent)]
    Malformed(#[from] ProtocolError),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid endpoint response: {0}")]
    InvalidResponse(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: Prompt,
    pub stop_markers: Vec<String>,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

/// A text-generation backend.
pub trait Generator: Send + Sync {
    /// Raw emission for the request. Backends may ignore stop markers;
    /// [`Gateway::generate`] truncates again.
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError>;
}

struct Permits {
    free: Mutex<usize>,
    released: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.released.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.released.notify_one();
    }
}

/// A backend plus a concurrency cap, an optional per-run call cap, and
/// stop-marker truncation.
pub struct Gateway {
    backend: Arc<dyn Generator>,
    call_cap: Option<usize>,
    calls: AtomicUsize,
    permits: Permits,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Generator>) -> Self {
        Gateway {
            backend,
            call_cap: None,
            calls: AtomicUsize::new(0),
            permits: Permits::new(DEFAULT_CONCURRENCY),
        }
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.permits = Permits::new(n);
        self
    }

    pub fn with_call_cap(mut self, cap: usize) -> Self {
        self.call_cap = Some(cap);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(cap) = self.call_cap {
            if n >= cap {
                return Err(GatewayError::BudgetExceeded { cap });
            }
        }
        let _permit = self.permits.acquire();
        let raw = self.backend.complete(request)?;
        Ok(protocol::truncate_at_stops(&raw, &request.stop_markers).to_string())
    }
}

/// The two model roles used during synthesis. Both may be the same gateway.
#[derive(Clone)]
pub struct ModelRoles {
    pub decomposer: Arc<Gateway>,
    pub target: Arc<Gateway>,
}

impl ModelRoles {
    pub fn shared(gateway: Arc<Gateway>) -> Self {
        ModelRoles {
            decomposer: Arc::clone(&gateway),
            target: gateway,
        }
    }
}

/// Decoding settings for protocol calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub turn_tokens: u32,
    pub answer_tokens: u32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            temperature: 0.0,
            seed: Some(0),
            turn_tokens: 256,
            answer_tokens: 128,
        }
    }
}

/// Model calls charged to one question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallMeter {
    pub used: usize,
    pub cap: usize,
}

impl CallMeter {
    pub fn new(cap: usize) -> Self {
        CallMeter { used: 0, cap }
    }

    fn charge(&mut self) -> Result<(), GatewayError> {
        if self.used >= self.cap {
            return Err(GatewayError::BudgetExceeded { cap: self.cap });
        }
        self.used += 1;
        Ok(())
    }
}

fn call_parsed(
    gateway: &Gateway,
    prompt: &Prompt,
    meter: &mut CallMeter,
    opts: &DecodeOptions,
    expecting: Expecting,
) -> Result<ParsedTurn, GatewayError> {
    let (stops, tokens): (&[&str], u32) = match expecting {
        Expecting::OpeningTurn => (&protocol::TURN_STOPS, opts.turn_tokens),
        Expecting::AnswerContinuation => (&protocol::ANSWER_STOPS, opts.answer_tokens),
    };
    let mut request = GenerationRequest {
        prompt: prompt.clone(),
        stop_markers: stops.iter().map(|s| s.to_string()).collect(),
        max_new_tokens: tokens,
        temperature: opts.temperature,
        seed: opts.seed,
    };
    // One retry with seed + 1 on a malformed emission.
    meter.charge()?;
    let first = gateway.generate(&request)?;
    match parse_turn(&first, expecting) {
        Ok(turn) => Ok(turn),
        Err(_) => {
            request.seed = opts.seed.map(|s| s.wrapping_add(1));
            meter.charge()?;
            let second = gateway.generate(&request)?;
            Ok(parse_turn(&second, expecting)?)
        }
    }
}

/// Requests an opening turn (next subquery with decision, or final answer).
pub fn request_turn(
    gateway: &Gateway,
    prompt: &Prompt,
    meter: &mut CallMeter,
    opts: &DecodeOptions,
) -> Result<ParsedTurn, GatewayError> {
    call_parsed(gateway, prompt, meter, opts, Expecting::OpeningTurn)
}

/// Requests the answer text after a forced prefix.
pub fn request_answer(
    gateway: &Gateway,
    prompt: &Prompt,
    meter: &mut CallMeter,
    opts: &DecodeOptions,
) -> Result<String, GatewayError> {
    match call_parsed(gateway, prompt, meter, opts, Expecting::AnswerContinuation)? {
        ParsedTurn::Answer { answer } => Ok(answer),
        other => unreachable!("continuation parsed as {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;

    struct Echo(String);
    impl Generator for Echo {
        fn complete(&self, _: &GenerationRequest) -> Result<String, GatewayError> {
            Ok(self.0.clone())
        }
    }

    struct Sequence {
        outputs: Vec<&'static str>,
        next: AtomicUsize,
        seeds: Mutex<Vec<Option<u64>>>,
    }
    impl Generator for Sequence {
        fn complete(&self, r: &GenerationRequest) -> Result<String, GatewayError> {
            self.seeds.lock().unwrap().push(r.seed);
            let i = self.next.fetch_add(1, Ordering::SeqCst);
            Ok(self.outputs[i.min(self.outputs.len() - 1)].to_string())
        }
    }

    fn prompt() -> Prompt {
        Prompt {
            instruction: "i".into(),
            transcript: "Question: q".into(),
            forced_prefix: None,
        }
    }

    fn request(stops: &[&str]) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt(),
            stop_markers: stops.iter().map(|s| s.to_string()).collect(),
            max_new_tokens: 16,
            temperature: 0.0,
            seed: None,
        }
    }

    #[test]
    fn truncates_before_stop_marker() {
        let gw = Gateway::new(Arc::new(Echo("the answer\nFollow up: more".into())));
        assert_eq!(gw.generate(&request(&["\nFollow up:"])).unwrap(), "the answer");
    }

    #[test]
    fn call_cap_is_enforced() {
        let gw = Gateway::new(Arc::new(Echo("x".into()))).with_call_cap(2);
        gw.generate(&request(&[])).unwrap();
        gw.generate(&request(&[])).unwrap();
        assert!(matches!(
            gw.generate(&request(&[])),
            Err(GatewayError::BudgetExceeded { cap: 2 })
        ));
    }

    #[test]
    fn malformed_turn_retries_once_with_next_seed() {
        let backend = Arc::new(Sequence {
            outputs: vec!["rambling", "Follow up: ok?\nLet's search the question in Wikipedia."],
            next: AtomicUsize::new(0),
            seeds: Mutex::new(Vec::new()),
        });
        let gw = Gateway::new(backend.clone());
        let mut meter = CallMeter::new(10);
        let opts = DecodeOptions {
            seed: Some(7),
            ..Default::default()
        };
        let turn = request_turn(&gw, &prompt(), &mut meter, &opts).unwrap();
        assert!(matches!(
            turn,
            ParsedTurn::FollowUp {
                decision: Decision::RetrieveMarker,
                ..
            }
        ));
        assert_eq!(meter.used, 2);
        assert_eq!(*backend.seeds.lock().unwrap(), vec![Some(7), Some(8)]);
    }

    #[test]
    fn second_malformed_turn_is_an_error() {
        let gw = Gateway::new(Arc::new(Echo("no markers here".into())));
        let mut meter = CallMeter::new(10);
        let err = request_turn(&gw, &prompt(), &mut meter, &DecodeOptions::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Malformed(_)));
        assert_eq!(meter.used, 2);
    }

    #[test]
    fn meter_caps_calls() {
        let gw = Gateway::new(Arc::new(Echo("Follow up: a".into())));
        let mut meter = CallMeter::new(1);
        request_turn(&gw, &prompt(), &mut meter, &DecodeOptions::default()).unwrap();
        assert!(matches!(
            request_turn(&gw, &prompt(), &mut meter, &DecodeOptions::default()),
            Err(GatewayError::BudgetExceeded { cap: 1 })
        ));
    }

    struct Slow {
        active: AtomicUsize,
        peak: AtomicUsize,
    }
    impl Generator for Slow {
        fn complete(&self, _: &GenerationRequest) -> Result<String, GatewayError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok("x".into())
        }
    }

    #[test]
    fn concurrency_cap_bounds_in_flight_calls() {
        let backend = Arc::new(Slow {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Arc::new(Gateway::new(backend.clone()).with_concurrency(2));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let gw = Arc::clone(&gw);
                std::thread::spawn(move || gw.generate(&request(&[])).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.calls(), 8);
    }
}
