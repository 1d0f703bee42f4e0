//! The generator contract and everything built on top of it: loss
//! accounting for retrieval-augmented generation, target-answer sampling,
//! joint answer selection, a deterministic mock generator for tests, and an
//! HTTP client for an external generation service.
//!
//! The engine never decodes text itself. A [`Generator`] produces answers,
//! scores given answers (total log-probability, always <= 0), and predicts
//! the probability that its own answer is correct. Everything downstream —
//! losses, the reflective gate, answer selection — only touches this
//! contract, so a mock table and a remote model are interchangeable.
//!
//! # Remote wire format (JSON over HTTP POST)
//!
//! ```text
//! request:  {"mode": "generate"|"score"|"reflect", "question": str,
//!            "image": str, "document": str|null, "answer": str|null}
//! response: {"answer": str|null, "log_prob": number,
//!            "correct_prob": number|null, "error": str|null}
//! ```
//!
//! Non-2xx statuses are protocol errors; 5xx and transport failures are
//! retried up to the configured count, malformed bodies are not.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs for one generator call. `doc_id` and `document` are present only
/// for retrieval-augmented calls; the mock keys on ids, the remote client
/// sends the document text.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub query_id: String,
    pub question: String,
    pub image: String,
    pub doc_id: Option<String>,
    pub document: Option<String>,
}

impl GenerationContext {
    /// Context without any retrieved document (self-answering).
    pub fn bare(
        query_id: impl Into<String>,
        question: impl Into<String>,
        image: impl Into<String>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            question: question.into(),
            image: image.into(),
            doc_id: None,
            document: None,
        }
    }

    pub fn with_document(mut self, doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        self.doc_id = Some(doc_id.into());
        self.document = Some(text.into());
        self
    }
}

/// Behavioral contract of the answer generator.
///
/// Implementations must be deterministic for fixed state and inputs;
/// log-probabilities are totals over answer tokens and never positive;
/// reflection probabilities live in `[0, 1]`.
pub trait Generator: Send + Sync {
    /// Produce an answer and its total log-probability.
    fn generate(&self, ctx: &GenerationContext) -> Result<(String, f64)>;

    /// Total log-probability of a given answer under the generator.
    fn score_answer(&self, ctx: &GenerationContext, answer: &str) -> Result<f64>;

    /// Probability that `answer` is correct for this context.
    fn reflect(&self, ctx: &GenerationContext, answer: &str) -> Result<f64>;
}

// ---------------------------------------------------------------------------
// Loss accounting and answer selection
// ---------------------------------------------------------------------------

/// Generation loss for one (context, target) pair: the negative total
/// log-probability of the target answer. Always nonnegative.
pub fn rag_loss(gen: &dyn Generator, ctx: &GenerationContext, target: &str) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Contract("rag_loss: empty target answer".into()));
    }
    let log_prob = gen.score_answer(ctx, target)?;
    if log_prob > 0.0 || !log_prob.is_finite() {
        return Err(Error::Contract(format!(
            "generator returned invalid log-probability {log_prob}"
        )));
    }
    Ok(-log_prob)
}

/// Retrieval and generation losses sum directly: the joint probability
/// factorizes, so its negative log is the plain sum.
pub fn joint_rag_loss(retrieval_loss: f64, generation_loss: f64) -> f64 {
    retrieval_loss + generation_loss
}

/// Uniformly sample a target answer from the distinct strings in the
/// answer set. Deterministic given the seed.
pub fn sample_target_answer(answers: &[String], seed: u64) -> Result<String> {
    if answers.is_empty() {
        return Err(Error::Contract("empty answer set".into()));
    }
    let distinct: BTreeSet<&str> = answers.iter().map(String::as_str).collect();
    let ordered: Vec<&str> = distinct.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ordered[rng.gen_range(0..ordered.len())].to_string())
}

/// One candidate answer with its log-domain joint-probability terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerCandidate {
    pub answer: String,
    pub doc_id: Option<String>,
    pub retrieval_log_prob: f64,
    pub generation_log_prob: f64,
}

impl AnswerCandidate {
    pub fn new(
        answer: impl Into<String>,
        doc_id: Option<String>,
        retrieval_log_prob: f64,
        generation_log_prob: f64,
    ) -> Result<Self> {
        if !retrieval_log_prob.is_finite() || retrieval_log_prob > 0.0 {
            return Err(Error::Contract(format!(
                "invalid retrieval log-probability {retrieval_log_prob}"
            )));
        }
        if !generation_log_prob.is_finite() || generation_log_prob > 0.0 {
            return Err(Error::Contract(format!(
                "invalid generation log-probability {generation_log_prob}"
            )));
        }
        Ok(Self {
            answer: answer.into(),
            doc_id,
            retrieval_log_prob,
            generation_log_prob,
        })
    }

    /// Log joint probability of retrieval and generation.
    pub fn joint_log_prob(&self) -> f64 {
        self.retrieval_log_prob + self.generation_log_prob
    }
}

/// Pick the candidate with the highest joint log-probability. Ties break
/// by lexicographically smallest answer, then smallest doc_id.
pub fn select_answer(candidates: &[AnswerCandidate]) -> Result<(String, AnswerCandidate)> {
    let winner = candidates
        .iter()
        .min_by(|a, b| {
            b.joint_log_prob()
                .total_cmp(&a.joint_log_prob())
                .then_with(|| a.answer.cmp(&b.answer))
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        })
        .ok_or_else(|| Error::Contract("select_answer: no candidates".into()))?;
    Ok((winner.answer.clone(), winner.clone()))
}

// ---------------------------------------------------------------------------
// Mock generator
// ---------------------------------------------------------------------------

/// Table-driven generator for desk-scale tests and planted experiments.
///
/// Answers are keyed by `(query_id, doc_id)` with `doc_id = None` for the
/// self-answering path; reflection probabilities are keyed by query_id.
/// Unknown keys fall back to the configured defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct MockGenerator {
    answers: HashMap<(String, Option<String>), (String, f64)>,
    reflections: HashMap<String, f64>,
    default_answer: String,
    default_log_prob: f64,
    default_correct_prob: f64,
}

impl MockGenerator {
    pub fn new(default_log_prob: f64) -> Result<Self> {
        if default_log_prob > 0.0 || !default_log_prob.is_finite() {
            return Err(Error::Contract(format!(
                "default log-probability must be finite and <= 0, got {default_log_prob}"
            )));
        }
        Ok(Self {
            answers: HashMap::new(),
            reflections: HashMap::new(),
            default_answer: "unknown".into(),
            default_log_prob,
            default_correct_prob: 0.0,
        })
    }

    pub fn with_default_answer(mut self, answer: impl Into<String>) -> Self {
        self.default_answer = answer.into();
        self
    }

    pub fn with_default_correct_prob(mut self, prob: f64) -> Result<Self> {
        check_probability(prob)?;
        self.default_correct_prob = prob;
        Ok(self)
    }

    pub fn with_answer(
        mut self,
        query_id: impl Into<String>,
        doc_id: Option<&str>,
        answer: impl Into<String>,
        log_prob: f64,
    ) -> Result<Self> {
        if log_prob > 0.0 || !log_prob.is_finite() {
            return Err(Error::Contract(format!(
                "table log-probability must be finite and <= 0, got {log_prob}"
            )));
        }
        self.answers.insert(
            (query_id.into(), doc_id.map(str::to_string)),
            (answer.into(), log_prob),
        );
        Ok(self)
    }

    pub fn with_reflection(mut self, query_id: impl Into<String>, prob: f64) -> Result<Self> {
        check_probability(prob)?;
        self.reflections.insert(query_id.into(), prob);
        Ok(self)
    }

    fn lookup(&self, ctx: &GenerationContext) -> (String, f64) {
        self.answers
            .get(&(ctx.query_id.clone(), ctx.doc_id.clone()))
            .cloned()
            .unwrap_or_else(|| (self.default_answer.clone(), self.default_log_prob))
    }

    /// Load a mock table from its JSON file representation.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let file: MockGeneratorFile =
            serde_json::from_str(&std::fs::read_to_string(path.as_ref())?)?;
        file.try_into()
    }

    /// Write the mock table as JSON (entries in deterministic order).
    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = MockGeneratorFile::from(self);
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }
}

fn check_probability(prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Contract(format!(
            "probability must be in [0, 1], got {prob}"
        )));
    }
    Ok(())
}

impl Generator for MockGenerator {
    fn generate(&self, ctx: &GenerationContext) -> Result<(String, f64)> {
        Ok(self.lookup(ctx))
    }

    fn score_answer(&self, ctx: &GenerationContext, answer: &str) -> Result<f64> {
        let (table_answer, log_prob) = self.lookup(ctx);
        Ok(if table_answer == answer {
            log_prob
        } else {
            self.default_log_prob
        })
    }

    fn reflect(&self, ctx: &GenerationContext, _answer: &str) -> Result<f64> {
        Ok(self
            .reflections
            .get(&ctx.query_id)
            .copied()
            .unwrap_or(self.default_correct_prob))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MockEntry {
    query_id: String,
    doc_id: Option<String>,
    answer: String,
    log_prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MockReflection {
    query_id: String,
    correct_prob: f64,
}

/// JSON file representation of a [`MockGenerator`].
#[derive(Debug, Serialize, Deserialize)]
struct MockGeneratorFile {
    #[serde(default = "default_mock_answer")]
    default_answer: String,
    default_log_prob: f64,
    #[serde(default)]
    default_correct_prob: f64,
    #[serde(default)]
    entries: Vec<MockEntry>,
    #[serde(default)]
    reflections: Vec<MockReflection>,
}

fn default_mock_answer() -> String {
    "unknown".into()
}

impl TryFrom<MockGeneratorFile> for MockGenerator {
    type Error = Error;

    fn try_from(file: MockGeneratorFile) -> Result<Self> {
        let mut gen = MockGenerator::new(file.default_log_prob)?
            .with_default_answer(file.default_answer)
            .with_default_correct_prob(file.default_correct_prob)?;
        for e in file.entries {
            gen = gen.with_answer(e.query_id, e.doc_id.as_deref(), e.answer, e.log_prob)?;
        }
        for refl in file.reflections {
            gen = gen.with_reflection(refl.query_id, refl.correct_prob)?;
        }
        Ok(gen)
    }
}

impl From<&MockGenerator> for MockGeneratorFile {
    fn from(gen: &MockGenerator) -> Self {
        let mut entries: Vec<MockEntry> = gen
            .answers
            .iter()
            .map(|((query_id, doc_id), (answer, log_prob))| MockEntry {
                query_id: query_id.clone(),
                doc_id: doc_id.clone(),
                answer: answer.clone(),
                log_prob: *log_prob,
            })
            .collect();
        entries.sort_by(|a, b| (&a.query_id, &a.doc_id).cmp(&(&b.query_id, &b.doc_id)));
        let mut reflections: Vec<MockReflection> = gen
            .reflections
            .iter()
            .map(|(query_id, correct_prob)| MockReflection {
                query_id: query_id.clone(),
                correct_prob: *correct_prob,
            })
            .collect();
        reflections.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        MockGeneratorFile {
            default_answer: gen.default_answer.clone(),
            default_log_prob: gen.default_log_prob,
            default_correct_prob: gen.default_correct_prob,
            entries,
            reflections,
        }
    }
}

// ---------------------------------------------------------------------------
// Remote generator
// ---------------------------------------------------------------------------

/// Connection settings for the remote generation service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteGeneratorConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retries: u32,
    #[serde(default)]
    pub auth_token: Option<String>,
    /// Upper bound on concurrent in-flight requests.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_in_flight() -> usize {
    8
}

impl RemoteGeneratorConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            retries: 0,
            auth_token: None,
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    mode: &'static str,
    question: &'a str,
    image: &'a str,
    document: Option<&'a str>,
    answer: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    answer: Option<String>,
    log_prob: f64,
    correct_prob: Option<f64>,
    error: Option<String>,
}

/// Counting semaphore bounding concurrent requests.
struct InFlightLimit {
    available: Mutex<usize>,
    signal: Condvar,
}

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut available = self.available.lock().expect("limit lock poisoned");
        while *available == 0 {
            available = self.signal.wait(available).expect("limit lock poisoned");
        }
        *available -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut available = self.limit.available.lock().expect("limit lock poisoned");
        *available += 1;
        self.limit.signal.notify_one();
    }
}

/// [`Generator`] implementation over HTTP.
///
/// All three modes are pure functions of their inputs, so failed requests
/// are safe to retry: timeouts, connection failures, and 5xx responses are
/// retried up to `retries` times; malformed bodies and other statuses fail
/// immediately.
pub struct RemoteGenerator {
    config: RemoteGeneratorConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteGenerator {
    pub fn new(config: RemoteGeneratorConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let limit = InFlightLimit::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            limit,
        })
    }

    fn call(&self, mode: &'static str, ctx: &GenerationContext, answer: Option<&str>) -> Result<WireResponse> {
        let request = WireRequest {
            mode,
            question: &ctx.question,
            image: &ctx.image,
            document: ctx.document.as_deref(),
            answer,
        };
        let _guard = self.limit.acquire();
        let mut last_err: Option<Error> = None;
        for _ in 0..=self.config.retries {
            match self.send_once(&request) {
                Ok(response) => return Ok(response),
                Err(e @ (Error::Timeout(_) | Error::Connection(_))) => last_err = Some(e),
                Err(Error::Protocol(msg)) if msg.starts_with("server status 5") => {
                    last_err = Some(Error::Protocol(msg));
                }
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt was made"))
    }

    fn send_once(&self, request: &WireRequest<'_>) -> Result<WireResponse> {
        let mut builder = self
            .client
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json")
            .json(request);
        if let Some(token) = &self.config.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(classify_transport_error)?;
        let status = response.status();
        let body = response.text().map_err(classify_transport_error)?;
        if !status.is_success() {
            return Err(Error::Protocol(format!(
                "server status {}: {}",
                status.as_u16(),
                body.chars().take(200).collect::<String>()
            )));
        }
        let wire: WireResponse = serde_json::from_str(&body)
            .map_err(|e| Error::Protocol(format!("malformed response body: {e}")))?;
        if let Some(message) = wire.error {
            return Err(Error::Protocol(format!("server reported error: {message}")));
        }
        Ok(wire)
    }
}

fn classify_transport_error(e: reqwest::Error) -> Error {
    if e.is_timeout() {
        Error::Timeout(e.to_string())
    } else {
        Error::Connection(e.to_string())
    }
}

fn check_log_prob(log_prob: f64) -> Result<f64> {
    if log_prob > 0.0 || !log_prob.is_finite() {
        return Err(Error::Protocol(format!(
            "response log_prob {log_prob} violates the contract (finite, <= 0)"
        )));
    }
    Ok(log_prob)
}

impl Generator for RemoteGenerator {
    fn generate(&self, ctx: &GenerationContext) -> Result<(String, f64)> {
        let wire = self.call("generate", ctx, None)?;
        let answer = wire
            .answer
            .ok_or_else(|| Error::Protocol("generate response missing answer".into()))?;
        Ok((answer, check_log_prob(wire.log_prob)?))
    }

    fn score_answer(&self, ctx: &GenerationContext, answer: &str) -> Result<f64> {
        let wire = self.call("score", ctx, Some(answer))?;
        check_log_prob(wire.log_prob)
    }

    fn reflect(&self, ctx: &GenerationContext, answer: &str) -> Result<f64> {
        let wire = self.call("reflect", ctx, Some(answer))?;
        let prob = wire
            .correct_prob
            .ok_or_else(|| Error::Protocol("reflect response missing correct_prob".into()))?;
        check_probability(prob).map_err(|_| {
            Error::Protocol(format!("response correct_prob {prob} outside [0, 1]"))
        })?;
        Ok(prob)
    }
}
