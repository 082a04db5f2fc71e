//! Annotation verification: prompt rendering, decision parsing and the
//! pluggable backends that answer Yes / No / I don't know.
//!
//! Three backends exist. [`GroundTruthOracle`] answers from the lake labels,
//! [`NoisyOracle`] corrupts the oracle with a flip rate and an abstain rate,
//! and [`RemoteVerifier`] posts the prompt to a chat-completions endpoint.
//! Transport failures never propagate: they come back as a flagged
//! `IDontKnow`, which the adaptation loop treats as difficult.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::DataLake;
use crate::error::{Error, Result};
use crate::rng::{self, stable_hash, tags};

pub const CELL_SEPARATOR: &str = ", ";
pub const MAX_COLUMN_CHARS: usize = 1024;
pub const TRUNCATION_MARKER: &str = "...";
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table_id: String,
    pub col_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRequest {
    pub type_names: Vec<String>,
    pub cells: Vec<String>,
    pub annotation: String,
    /// Identity of the column, used by oracle backends and the audit log.
    pub column: ColumnRef,
    pub iteration: usize,
}

impl VerificationRequest {
    pub fn new(
        type_names: Vec<String>,
        cells: Vec<String>,
        annotation: String,
        column: ColumnRef,
        iteration: usize,
    ) -> Result<Self> {
        if !type_names.contains(&annotation) {
            return Err(Error::data(format!(
                "annotation {annotation:?} is not in the type set"
            )));
        }
        Ok(VerificationRequest {
            type_names,
            cells,
            annotation,
            column,
            iteration,
        })
    }

    /// Cells joined with `", "`, cut to [`MAX_COLUMN_CHARS`] characters plus
    /// a trailing `"..."` when longer.
    pub fn column_text(&self) -> String {
        let joined = self.cells.join(CELL_SEPARATOR);
        if joined.chars().count() <= MAX_COLUMN_CHARS {
            joined
        } else {
            let mut cut: String = joined.chars().take(MAX_COLUMN_CHARS).collect();
            cut.push_str(TRUNCATION_MARKER);
            cut
        }
    }
}

pub fn render_prompt(req: &VerificationRequest) -> String {
    let mut p = String::new();
    p.push_str(
        "Task: You are checking the semantic type annotation of a table column. \
         Given the allowed semantic types, the cell values of the column and the \
         annotation proposed for it, decide whether the annotation is correct.\n\n",
    );
    p.push_str("Type set:\n");
    for (i, name) in req.type_names.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, name));
    }
    p.push_str("\nInput column:\n");
    p.push_str(&req.column_text());
    p.push_str("\n\nAnnotation:\n");
    p.push_str(&req.annotation);
    p.push_str(
        "\n\nIs the annotation correct for this column? Answer with exactly one of: \
         Yes / No / I don't know\nDecision:",
    );
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Yes,
    No,
    IDontKnow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedDecision {
    pub outcome: Outcome,
    /// Set when the response matched none of the recognized answers.
    pub warning: bool,
}

/// Total parse: leading `yes`/`no` token, then an "I don't know" phrase,
/// otherwise `IDontKnow` with the warning flag set.
pub fn parse_decision(raw: &str) -> ParsedDecision {
    let lowered = raw.trim().to_lowercase().replace('\u{2019}', "'");
    let lead: String = lowered
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    let ok = |outcome| ParsedDecision {
        outcome,
        warning: false,
    };
    match lead.as_str() {
        "yes" => ok(Outcome::Yes),
        "no" => ok(Outcome::No),
        _ if ["don't know", "dont know", "do not know", "not sure"]
            .iter()
            .any(|p| lowered.contains(p)) =>
        {
            ok(Outcome::IDontKnow)
        }
        _ => ParsedDecision {
            outcome: Outcome::IDontKnow,
            warning: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierDecision {
    pub outcome: Outcome,
    pub raw_response: String,
    pub latency_ms: u64,
    pub token_estimate: usize,
    pub parse_warning: bool,
    pub error: Option<String>,
}

impl VerifierDecision {
    fn answered(prompt: &str, raw: String, latency: Duration) -> Self {
        let parsed = parse_decision(&raw);
        if parsed.warning {
            log::warn!("unparseable verifier response {raw:?}; treating as I don't know");
        }
        VerifierDecision {
            outcome: parsed.outcome,
            token_estimate: token_estimate(prompt) + token_estimate(&raw),
            raw_response: raw,
            latency_ms: latency.as_millis() as u64,
            parse_warning: parsed.warning,
            error: None,
        }
    }

    fn failed(prompt: &str, error: String, latency: Duration) -> Self {
        VerifierDecision {
            outcome: Outcome::IDontKnow,
            raw_response: String::new(),
            latency_ms: latency.as_millis() as u64,
            token_estimate: token_estimate(prompt),
            parse_warning: false,
            error: Some(error),
        }
    }
}

/// `ceil(chars / 4)`; used for cost reporting only.
pub fn token_estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// No and I-don't-know mark a column as difficult.
pub fn classify_difficult(decision: &VerifierDecision) -> bool {
    matches!(decision.outcome, Outcome::No | Outcome::IDontKnow)
}

pub trait Verifier: Send + Sync {
    fn verify(&self, req: &VerificationRequest) -> VerifierDecision;
}

/// Answers from ground-truth labels held privately by the oracle.
pub struct GroundTruthOracle {
    labels: HashMap<ColumnRef, String>,
}

impl GroundTruthOracle {
    pub fn from_lake(lake: &DataLake) -> Self {
        let labels = lake
            .ids()
            .filter_map(|id| {
                let c = lake.column(id);
                lake.label_name(id).map(|name| {
                    (
                        ColumnRef {
                            table_id: c.table_id.clone(),
                            col_index: c.col_index,
                        },
                        name.to_string(),
                    )
                })
            })
            .collect();
        GroundTruthOracle { labels }
    }

    fn truth(&self, req: &VerificationRequest) -> Option<bool> {
        self.labels.get(&req.column).map(|l| *l == req.annotation)
    }
}

impl Verifier for GroundTruthOracle {
    fn verify(&self, req: &VerificationRequest) -> VerifierDecision {
        let prompt = render_prompt(req);
        match self.truth(req) {
            Some(true) => VerifierDecision::answered(&prompt, "Yes".into(), Duration::ZERO),
            Some(false) => VerifierDecision::answered(&prompt, "No".into(), Duration::ZERO),
            None => VerifierDecision::failed(&prompt, "column has no ground-truth label".into(), Duration::ZERO),
        }
    }
}

/// Oracle whose answer is flipped with probability `1 - accuracy` and
/// replaced by I-don't-know with probability `idk_rate`. The draws are a
/// function of the seed and the request, never of call order.
pub struct NoisyOracle {
    oracle: GroundTruthOracle,
    accuracy: f64,
    idk_rate: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(lake: &DataLake, accuracy: f64, idk_rate: f64, seed: u64) -> Result<Self> {
        validate_noise(accuracy, idk_rate)?;
        Ok(NoisyOracle {
            oracle: GroundTruthOracle::from_lake(lake),
            accuracy,
            idk_rate,
            seed,
        })
    }
}

fn validate_noise(accuracy: f64, idk_rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::config(format!("noisy accuracy p must be in [0, 1], got {accuracy}")));
    }
    if !(0.0..1.0).contains(&idk_rate) {
        return Err(Error::config(format!("noisy idk rate q must be in [0, 1), got {idk_rate}")));
    }
    Ok(())
}

impl Verifier for NoisyOracle {
    fn verify(&self, req: &VerificationRequest) -> VerifierDecision {
        let prompt = render_prompt(req);
        let Some(truth) = self.oracle.truth(req) else {
            return VerifierDecision::failed(&prompt, "column has no ground-truth label".into(), Duration::ZERO);
        };
        let key = format!("{}\u{1f}{}\u{1f}{}", req.column.table_id, req.column.col_index, req.annotation);
        let mut rng = rng::stream(
            rng::derive_seed(self.seed, stable_hash(&key)) ^ req.iteration as u64,
            tags::NOISY,
        );
        let abstain = rng.random::<f64>() < self.idk_rate;
        let flip = rng.random::<f64>() >= self.accuracy;
        let raw = if abstain {
            "I don't know"
        } else if truth != flip {
            "Yes"
        } else {
            "No"
        };
        VerifierDecision::answered(&prompt, raw.into(), Duration::ZERO)
    }
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of a chat-completions compatible endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

pub struct RemoteVerifier {
    config: RemoteConfig,
    api_key: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

impl RemoteVerifier {
    /// Reads the API key from the environment variable named in the config.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let api_key = std::env::var(&config.key_env).map_err(|_| {
            Error::config(format!(
                "environment variable {} (remote.key_env) is not set",
                config.key_env
            ))
        })?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: RemoteConfig, api_key: String) -> Result<Self> {
        if config.endpoint.is_empty() || config.model.is_empty() {
            return Err(Error::config("remote verifier needs an endpoint and a model"));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteVerifier {
            config,
            api_key,
            agent,
        })
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Attempt {
        let response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("http status {status}"));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(format!("http status {status}"));
        }
        let json: serde_json::Value = match response.body_mut().read_json() {
            Ok(v) => v,
            Err(e) => return Attempt::Retry(format!("malformed body: {e}")),
        };
        match json
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
        {
            Some(content) => Attempt::Done(content.to_string()),
            None => Attempt::Fatal("response has no choices[0].message.content".into()),
        }
    }
}

impl Verifier for RemoteVerifier {
    fn verify(&self, req: &VerificationRequest) -> VerifierDecision {
        let prompt = render_prompt(req);
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: &prompt,
            }],
            temperature: 0.0,
        };
        let start = Instant::now();
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Attempt::Done(raw) => return VerifierDecision::answered(&prompt, raw, start.elapsed()),
                Attempt::Fatal(e) => {
                    last_error = e;
                    break;
                }
                Attempt::Retry(e) => {
                    log::warn!("verifier attempt {} failed: {e}", attempt + 1);
                    last_error = e;
                }
            }
        }
        log::warn!("verifier gave up on {}:{}: {last_error}", req.column.table_id, req.column.col_index);
        VerifierDecision::failed(&prompt, last_error, start.elapsed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum VerifierBackend {
    #[default]
    Oracle,
    NoisyOracle {
        accuracy: f64,
        idk_rate: f64,
        seed: u64,
    },
    Remote(RemoteConfig),
}


impl VerifierBackend {
    pub fn validate(&self) -> Result<()> {
        match self {
            VerifierBackend::NoisyOracle {
                accuracy, idk_rate, ..
            } => validate_noise(*accuracy, *idk_rate),
            _ => Ok(()),
        }
    }

    /// Instantiates the backend. Oracle backends read labels from `lake`.
    pub fn build(&self, lake: &DataLake) -> Result<Box<dyn Verifier>> {
        Ok(match self {
            VerifierBackend::Oracle => Box::new(GroundTruthOracle::from_lake(lake)),
            VerifierBackend::NoisyOracle {
                accuracy,
                idk_rate,
                seed,
            } => Box::new(NoisyOracle::new(lake, *accuracy, *idk_rate, *seed)?),
            VerifierBackend::Remote(cfg) => Box::new(RemoteVerifier::new(cfg.clone())?),
        })
    }
}

/// Wraps a verifier and counts every call that reaches it.
pub struct CountingVerifier<'a> {
    inner: &'a dyn Verifier,
    calls: AtomicUsize,
}

impl<'a> CountingVerifier<'a> {
    pub fn new(inner: &'a dyn Verifier) -> Self {
        CountingVerifier {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Verifier for CountingVerifier<'_> {
    fn verify(&self, req: &VerificationRequest) -> VerifierDecision {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.verify(req)
    }
}

/// Verifies every request with at most `parallelism` concurrent calls.
/// Output order matches `requests` regardless of completion order.
pub fn verify_all(
    verifier: &dyn Verifier,
    requests: &[VerificationRequest],
    parallelism: usize,
) -> Vec<VerifierDecision> {
    let workers = parallelism.max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| verifier.verify(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<VerifierDecision>> = vec![None; requests.len()];
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= requests.len() {
                            break;
                        }
                        done.push((i, verifier.verify(&requests[i])));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, d) in h.join().expect("verifier worker panicked") {
                slots[i] = Some(d);
            }
        }
    });
    slots.into_iter().map(|d| d.expect("every request verified")).collect()
}

/// One line of the JSON Lines audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub iteration: usize,
    pub table_id: String,
    pub col_index: usize,
    pub annotation: String,
    pub outcome: Outcome,
    pub latency_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl AuditRecord {
    pub fn new(req: &VerificationRequest, decision: &VerifierDecision, include_raw: bool) -> Self {
        AuditRecord {
            iteration: req.iteration,
            table_id: req.column.table_id.clone(),
            col_index: req.column.col_index,
            annotation: req.annotation.clone(),
            outcome: decision.outcome,
            latency_ms: decision.latency_ms,
            raw: include_raw.then(|| decision.raw_response.clone()),
            error: decision.error.clone(),
        }
    }
}
