//! Generation backends and the conversion of raw generations into
//! predictions.
//!
//! Anything the parsers cannot map to a single in-scheme relation becomes
//! `vague`: unmatched labels under P, and under QA an unparseable answer or
//! anything other than exactly one YES.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ContextWindow, TemporalRelation};
use crate::prompting::{answer_word, FewShotSet, PromptError, PromptInstance, PromptRenderer, Protocol, BLOCK_SEPARATOR};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub name: String,
    /// Longest accepted prompt, in bytes.
    pub max_context_chars: usize,
    pub supports_adapters: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transport failure (status {status:?}): {message}")]
pub struct TransportError {
    pub status: Option<u16>,
    pub message: String,
    pub transient: bool,
}

impl TransportError {
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        Self {
            status: Some(status),
            message: message.into(),
            transient: status == 429 || status >= 500,
        }
    }
}

/// A text-completion model. Decoding is greedy (temperature 0).
pub trait GenerationBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// Continuation of `prompt`. Implementations may echo the prompt;
    /// [`generate`] strips it.
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, TransportError>;
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("prompt of {len} bytes exceeds the backend limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: TransportError },
    #[error(transparent)]
    Transport(TransportError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no answer for relation `{0}`")]
    MissingAnswer(TemporalRelation),
    #[error("mock script {path}: {message}")]
    Script { path: String, message: String },
}

impl InferenceError {
    /// Status of the last transport failure, when there was one.
    pub fn transport_status(&self) -> Option<u16> {
        match self {
            Self::RetriesExhausted { last, .. } | Self::Transport(last) => last.status,
            _ => None,
        }
    }
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: usize) -> Self {
        Self {
            max_retries,
            initial_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (0-based): doubling, capped.
    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u64.checked_shl(attempt as u32).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens_p: usize,
    pub max_new_tokens_qa: usize,
    pub retry: RetryPolicy,
    /// Upper bound on concurrent (pair, set) jobs in [`run_batch`].
    pub parallelism: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens_p: 8,
            max_new_tokens_qa: 4,
            retry: RetryPolicy::default(),
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub attempts: usize,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Issues one completion request with retries on transient failures.
pub fn generate(
    backend: &dyn GenerationBackend,
    prompt: &PromptInstance,
    max_new_tokens: usize,
    retry: &RetryPolicy,
) -> Result<Generation> {
    let limit = backend.capabilities().max_context_chars;
    if prompt.text.len() > limit {
        return Err(InferenceError::ContextOverflow {
            len: prompt.text.len(),
            limit,
        });
    }
    let mut attempt = 0;
    loop {
        match backend.complete(&prompt.text, max_new_tokens) {
            Ok(raw) => {
                let text = raw.strip_prefix(prompt.text.as_str()).unwrap_or(&raw).to_string();
                return Ok(Generation {
                    text,
                    attempts: attempt + 1,
                });
            }
            Err(e) if !e.transient => return Err(InferenceError::Transport(e)),
            Err(e) if attempt >= retry.max_retries => {
                return Err(InferenceError::RetriesExhausted {
                    attempts: attempt + 1,
                    last: e,
                })
            }
            Err(_) => {
                let delay = retry.delay(attempt);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                attempt += 1;
            }
        }
    }
}

// Mock backend.

/// Canned reply: plain text, or a simulated transport failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Fail { fail: u16 },
}

/// Matches against the prompt's final block (the target block).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ends_with: Option<String>,
    pub reply: MockReply,
}

impl MockRule {
    fn matches(&self, target: &str) -> bool {
        self.contains.as_ref().is_none_or(|c| target.contains(c.as_str()))
            && self.ends_with.as_ref().is_none_or(|e| target.ends_with(e.as_str()))
    }
}

/// Mock script file. Lookup order: prompt hash, rules (first match),
/// request ordinal, default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub by_hash: BTreeMap<String, MockReply>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub by_ordinal: Vec<MockReply>,
    #[serde(default)]
    pub default: Option<MockReply>,
    #[serde(default)]
    pub max_context_chars: Option<usize>,
    /// Prefix every reply with the prompt, like raw completion endpoints do.
    #[serde(default)]
    pub echo_prompt: bool,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| InferenceError::Script {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// Deterministic scripted backend. Counts every request it receives.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    /// Always answers `reply`.
    pub fn constant(reply: &str) -> Self {
        Self::new(MockScript {
            default: Some(MockReply::Text(reply.to_string())),
            ..MockScript::default()
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, prompt: &str, ordinal: usize) -> Option<&MockReply> {
        let s = &self.script;
        if let Some(r) = s.by_hash.get(&prompt_hash(prompt)) {
            return Some(r);
        }
        let target = prompt.rsplit(BLOCK_SEPARATOR).next().unwrap_or(prompt);
        if let Some(rule) = s.rules.iter().find(|r| r.matches(target)) {
            return Some(&rule.reply);
        }
        s.by_ordinal.get(ordinal).or(s.default.as_ref())
    }
}

impl GenerationBackend for MockBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            name: "mock".into(),
            max_context_chars: self.script.max_context_chars.unwrap_or(usize::MAX),
            supports_adapters: false,
        }
    }

    fn complete(&self, prompt: &str, _max_new_tokens: usize) -> Result<String, TransportError> {
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        match self.lookup(prompt, ordinal) {
            Some(MockReply::Text(t)) if self.script.echo_prompt => Ok(format!("{prompt}{t}")),
            Some(MockReply::Text(t)) => Ok(t.clone()),
            Some(MockReply::Fail { fail }) => Err(TransportError::from_status(*fail, "scripted failure")),
            None => Err(TransportError {
                status: None,
                message: format!("no scripted reply for prompt {}", prompt_hash(prompt)),
                transient: false,
            }),
        }
    }
}

// Remote backend.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the API key, sent as a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_http_context")]
    pub max_context_chars: usize,
    #[serde(default = "default_http_timeout")]
    pub timeout_secs: u64,
}

fn default_http_context() -> usize {
    16_384
}

fn default_http_timeout() -> u64 {
    60
}

/// Completion endpoint speaking the common `{"prompt", "max_tokens"}` →
/// `{"choices": [{"text"}]}` JSON shape.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = config.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        Self { config, agent, api_key }
    }
}

fn classify_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::StatusCode(code) => TransportError::from_status(code, format!("HTTP {code}")),
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound => TransportError {
            status: None,
            message: e.to_string(),
            transient: true,
        },
        other => TransportError {
            status: None,
            message: other.to_string(),
            transient: false,
        },
    }
}

impl GenerationBackend for HttpBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            name: self.config.model.clone(),
            max_context_chars: self.config.max_context_chars,
            supports_adapters: false,
        }
    }

    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": max_new_tokens,
            "temperature": 0.0,
        });
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(classify_ureq)?;
        let parsed: CompletionResponse = resp.body_mut().read_json().map_err(classify_ureq)?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| TransportError {
                status: None,
                message: "response has no choices".into(),
                transient: false,
            })
    }
}

// Parsing.

fn label_aliases(r: TemporalRelation) -> &'static [&'static str] {
    use TemporalRelation::*;
    match r {
        After => &["after"],
        Before => &["before"],
        Equal => &["equal", "simultaneous"],
        Includes => &["includes"],
        IsIncluded => &["is included", "is_included", "is-included"],
        Vague => &[],
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Earliest whole-word occurrence of any scheme label in the first
/// non-empty line of `text`; `vague` when nothing matches.
pub fn parse_label(text: &str, relations: &[TemporalRelation]) -> TemporalRelation {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let hay = line.to_ascii_lowercase();
    let bytes = hay.as_bytes();
    let mut best: Option<(usize, usize, TemporalRelation)> = None;
    for &r in relations {
        for alias in label_aliases(r) {
            for (pos, _) in hay.match_indices(alias) {
                let end = pos + alias.len();
                let left_ok = pos == 0 || !is_word_byte(bytes[pos - 1]);
                let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
                if !(left_ok && right_ok) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, blen, _)) => pos < bp || (pos == bp && alias.len() > blen),
                };
                if better {
                    best = Some((pos, alias.len(), r));
                }
            }
        }
    }
    best.map(|(_, _, r)| r).unwrap_or(TemporalRelation::Vague)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
    Unparseable,
}

/// Leading word of the answer, case-insensitive, after skipping whitespace
/// and punctuation.
pub fn parse_yesno(text: &str) -> YesNo {
    let word: String = text
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => YesNo::Yes,
        "no" => YesNo::No,
        _ => YesNo::Unparseable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaDecision {
    pub predicted: TemporalRelation,
    /// More than one YES.
    pub contradiction: bool,
    /// At least one answer could not be parsed.
    pub unparseable: bool,
}

/// A relation wins only when it is the unique YES and every answer parsed.
pub fn aggregate_qa(answers: &BTreeMap<TemporalRelation, YesNo>, relations: &[TemporalRelation]) -> Result<QaDecision> {
    let mut yes = Vec::new();
    let mut unparseable = false;
    for &r in relations {
        match answers.get(&r) {
            None => return Err(InferenceError::MissingAnswer(r)),
            Some(YesNo::Yes) => yes.push(r),
            Some(YesNo::No) => {}
            Some(YesNo::Unparseable) => unparseable = true,
        }
    }
    let predicted = match (unparseable, yes.as_slice()) {
        (false, [only]) => *only,
        _ => TemporalRelation::Vague,
    };
    Ok(QaDecision {
        predicted,
        contradiction: yes.len() > 1,
        unparseable,
    })
}

// Protocol execution.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: Option<TemporalRelation>,
    pub prompt_hash: String,
    pub prompt: String,
    pub generation: String,
    pub parsed_answer: Option<YesNo>,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub pair_id: String,
    pub protocol: Protocol,
    pub set_id: Option<usize>,
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    /// `None` for encoder-head predictions.
    pub protocol: Option<Protocol>,
    pub set_id: Option<usize>,
    pub predicted: TemporalRelation,
    #[serde(default)]
    pub contradiction: bool,
    #[serde(default)]
    pub unparseable: bool,
    /// Index into the transcript list written alongside the predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<usize>,
}

/// Text replayed after a QA2 question: the normalized answer when it
/// parsed, otherwise the first generated line verbatim.
fn replay_answer(generation: &str, parsed: YesNo) -> String {
    match parsed {
        YesNo::Yes => answer_word(true).to_string(),
        YesNo::No => answer_word(false).to_string(),
        YesNo::Unparseable => generation.lines().next().unwrap_or("").trim().to_string(),
    }
}

fn exchange(
    backend: &dyn GenerationBackend,
    prompt: &PromptInstance,
    max_new_tokens: usize,
    retry: &RetryPolicy,
) -> Result<Exchange> {
    let g = generate(backend, prompt, max_new_tokens, retry)?;
    let parsed_answer = prompt.question.map(|_| parse_yesno(&g.text));
    Ok(Exchange {
        question: prompt.question,
        prompt_hash: prompt_hash(&prompt.text),
        prompt: prompt.text.clone(),
        generation: g.text,
        parsed_answer,
        attempts: g.attempts,
    })
}

/// Runs one pair through one protocol.
pub fn run_protocol(
    backend: &dyn GenerationBackend,
    renderer: &PromptRenderer,
    pair_id: &str,
    ctx: &ContextWindow,
    protocol: Protocol,
    fewshot: Option<&FewShotSet>,
    cfg: &GenerationConfig,
) -> Result<(Prediction, Transcript)> {
    let relations = renderer.question_order();
    let mut exchanges = Vec::new();
    let (predicted, contradiction, unparseable) = match protocol {
        Protocol::P => {
            let prompt = renderer.render_p(pair_id, ctx, fewshot)?;
            let ex = exchange(backend, &prompt, cfg.max_new_tokens_p, &cfg.retry)?;
            let label = parse_label(&ex.generation, &relations);
            exchanges.push(ex);
            (label, false, label.is_vague())
        }
        Protocol::Qa1 => {
            let mut answers = BTreeMap::new();
            for &r in &relations {
                let prompt = renderer.render_qa1(pair_id, ctx, r, fewshot)?;
                let ex = exchange(backend, &prompt, cfg.max_new_tokens_qa, &cfg.retry)?;
                answers.insert(r, ex.parsed_answer.unwrap_or(YesNo::Unparseable));
                exchanges.push(ex);
            }
            let d = aggregate_qa(&answers, &relations)?;
            (d.predicted, d.contradiction, d.unparseable)
        }
        Protocol::Qa2 => {
            let mut answers = BTreeMap::new();
            let mut history = Vec::new();
            for &r in &relations {
                let prompt = renderer.render_qa2(pair_id, ctx, &history, fewshot)?;
                let ex = exchange(backend, &prompt, cfg.max_new_tokens_qa, &cfg.retry)?;
                let parsed = ex.parsed_answer.unwrap_or(YesNo::Unparseable);
                answers.insert(r, parsed);
                history.push((r, replay_answer(&ex.generation, parsed)));
                exchanges.push(ex);
            }
            let d = aggregate_qa(&answers, &relations)?;
            (d.predicted, d.contradiction, d.unparseable)
        }
    };
    let set_id = fewshot.map(|s| s.set_id);
    Ok((
        Prediction {
            pair_id: pair_id.to_string(),
            protocol: Some(protocol),
            set_id,
            predicted,
            contradiction,
            unparseable,
            transcript: None,
        },
        Transcript {
            pair_id: pair_id.to_string(),
            protocol,
            set_id,
            exchanges,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub pair_id: String,
    pub set_id: Option<usize>,
    pub cause: String,
    pub status: Option<u16>,
    /// The backend failed, as opposed to the prompt being rejected up front.
    pub backend_error: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchOutput {
    /// Set-major order: all pairs for the first set, then the next set.
    pub predictions: Vec<Prediction>,
    pub transcripts: Vec<Transcript>,
    pub failures: Vec<FailureRecord>,
}

impl BatchOutput {
    pub fn predictions_for_set(&self, set_id: Option<usize>) -> Vec<&Prediction> {
        self.predictions.iter().filter(|p| p.set_id == set_id).collect()
    }
}

type JobResult = std::result::Result<(Prediction, Transcript), FailureRecord>;

/// Runs every (pair, few-shot set) combination. An empty `sets` slice runs
/// zero-shot. Failures are recorded per job and never abort the batch.
pub fn run_batch(
    backend: &dyn GenerationBackend,
    renderer: &PromptRenderer,
    targets: &[(String, ContextWindow)],
    protocol: Protocol,
    sets: &[FewShotSet],
    cfg: &GenerationConfig,
) -> BatchOutput {
    let set_refs: Vec<Option<&FewShotSet>> = if sets.is_empty() {
        vec![None]
    } else {
        sets.iter().map(Some).collect()
    };
    let jobs: Vec<(Option<&FewShotSet>, &(String, ContextWindow))> = set_refs
        .iter()
        .flat_map(|s| targets.iter().map(move |t| (*s, t)))
        .collect();

    let run = |(set, (pair_id, ctx)): (Option<&FewShotSet>, &(String, ContextWindow))| -> JobResult {
        run_protocol(backend, renderer, pair_id, ctx, protocol, set, cfg).map_err(|e| FailureRecord {
            pair_id: pair_id.clone(),
            set_id: set.map(|s| s.set_id),
            status: e.transport_status(),
            backend_error: matches!(e, InferenceError::RetriesExhausted { .. } | InferenceError::Transport(_)),
            cause: e.to_string(),
        })
    };

    let results: Vec<JobResult> = if cfg.parallelism <= 1 || jobs.len() <= 1 {
        jobs.iter().map(|&j| run(j)).collect()
    } else {
        let slots: Vec<Mutex<Option<JobResult>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..cfg.parallelism.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = run(jobs[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
            .collect()
    };

    let mut out = BatchOutput::default();
    for r in results {
        match r {
            Ok((mut pred, transcript)) => {
                pred.transcript = Some(out.transcripts.len());
                out.transcripts.push(transcript);
                out.predictions.push(pred);
            }
            Err(f) => out.failures.push(f),
        }
    }
    out
}
