//! Text-generation providers: remote chat completion, scripted replay, and
//! a symbolic oracle that answers planning queries exactly.

mod oracle;
mod remote;
pub mod router;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DomainSpec, Goal, GroundAction, WorldState};

pub use oracle::{oracle_decompose, oracle_make_plan, oracle_predict_state, oracle_tree, OracleBackend, OracleLimits};
pub use remote::{RemoteBackend, RemoteSettings};
pub use scripted::{read_transcript, write_transcript, RecordingBackend, ScriptedBackend, TranscriptRecord, Usage};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transcript exhausted after {calls} replies")]
    TranscriptExhausted { calls: usize },
    #[error("prompt drift at transcript record {index}: expected digest {expected}, got {found}")]
    PromptDrift {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("no plan found: {0}")]
    Unsolvable(String),
    #[error("search budget exceeded after {expanded} expanded states")]
    SearchBudgetExceeded { expanded: usize },
    #[error("plan not replayable: {0}")]
    PreconditionViolation(String),
    #[error("{backend} backend cannot answer a {query} query")]
    Unsupported {
        backend: &'static str,
        query: &'static str,
    },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Network(_) => "NETWORK",
            BackendError::Auth(_) => "AUTH",
            BackendError::RateLimited { .. } => "RATE_LIMITED",
            BackendError::TranscriptExhausted { .. } => "TRANSCRIPT_EXHAUSTED",
            BackendError::PromptDrift { .. } => "PROMPT_DRIFT",
            BackendError::Transcript(_) => "TRANSCRIPT_ERROR",
            BackendError::Unsolvable(_) => "UNSOLVABLE",
            BackendError::SearchBudgetExceeded { .. } => "SEARCH_BUDGET_EXCEEDED",
            BackendError::PreconditionViolation(_) => "PRECONDITION_VIOLATION",
            BackendError::Unsupported { .. } => "UNSUPPORTED",
            BackendError::InvalidResponse(_) => "INVALID_RESPONSE",
            BackendError::MissingCredential(_) => "AUTH",
        }
    }
}

/// What a prompt is asking for. Text backends only look at the prompt; the
/// oracle answers from the typed query.
#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Decompose {
        instruction: &'a str,
        state: &'a WorldState,
        domain: &'a DomainSpec,
        goals: &'a [Goal],
    },
    GenerateTree {
        goal: &'a Goal,
        state: &'a WorldState,
        domain: &'a DomainSpec,
    },
    BulletPlan {
        goal: &'a Goal,
        state: &'a WorldState,
        domain: &'a DomainSpec,
    },
    MakePlan {
        goal: &'a Goal,
        state: &'a WorldState,
        domain: &'a DomainSpec,
    },
    MakeTree {
        action: &'a GroundAction,
        domain: &'a DomainSpec,
    },
    PredictState {
        state: &'a WorldState,
        plan: &'a [GroundAction],
        domain: &'a DomainSpec,
    },
    Freeform,
}

impl Query<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Query::Decompose { .. } => "decompose",
            Query::GenerateTree { .. } => "generate_tree",
            Query::BulletPlan { .. } => "bullet_plan",
            Query::MakePlan { .. } => "make_plan",
            Query::MakeTree { .. } => "make_tree",
            Query::PredictState { .. } => "predict_state",
            Query::Freeform => "freeform",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Request<'a> {
    pub prompt: &'a str,
    pub query: Query<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_seconds: f64,
}

impl Completion {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Completion with usage filled in by whitespace tokenization.
    pub fn estimated(prompt: &str, text: String, latency_seconds: f64) -> Self {
        Completion {
            prompt_tokens: crate::validation::whitespace_tokens(prompt),
            completion_tokens: crate::validation::whitespace_tokens(&text),
            text,
            latency_seconds,
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

pub const DEFAULT_API_KEY_ENV: &str = "BTFORGE_API_KEY";
pub const API_BASE_ENV: &str = "BTFORGE_API_BASE";

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_max_tokens() -> u32 {
    2048
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}
fn default_true() -> bool {
    true
}
fn default_depth() -> usize {
    OracleLimits::default().max_depth
}
fn default_expansions() -> usize {
    OracleLimits::default().max_expansions
}

/// Backend selection. The remote variant names the environment variable that
/// holds the credential; the credential itself is never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Remote {
        /// Falls back to `BTFORGE_API_BASE`.
        #[serde(default)]
        api_base: Option<String>,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        temperature: f32,
        #[serde(default = "default_max_tokens")]
        max_tokens: u32,
        #[serde(default = "default_attempts")]
        attempts: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
        #[serde(default = "default_timeout")]
        timeout_seconds: u64,
    },
    Scripted {
        transcript: PathBuf,
        #[serde(default = "default_true")]
        check_digests: bool,
    },
    Oracle {
        #[serde(default = "default_depth")]
        max_depth: usize,
        #[serde(default = "default_expansions")]
        max_expansions: usize,
    },
}

impl BackendConfig {
    pub fn oracle() -> Self {
        BackendConfig::Oracle {
            max_depth: default_depth(),
            max_expansions: default_expansions(),
        }
    }

    pub fn scripted(transcript: impl Into<PathBuf>) -> Self {
        BackendConfig::Scripted {
            transcript: transcript.into(),
            check_digests: true,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(match self {
            BackendConfig::Oracle {
                max_depth,
                max_expansions,
            } => Arc::new(OracleBackend::new(OracleLimits {
                max_depth: *max_depth,
                max_expansions: *max_expansions,
            })),
            BackendConfig::Scripted {
                transcript,
                check_digests,
            } => {
                let mut b = ScriptedBackend::from_file(transcript)?;
                b.check_digests = *check_digests;
                Arc::new(b)
            }
            BackendConfig::Remote {
                api_base,
                model,
                api_key_env,
                temperature,
                max_tokens,
                attempts,
                backoff_ms,
                timeout_seconds,
            } => {
                let base = match api_base {
                    Some(b) => b.clone(),
                    None => std::env::var(API_BASE_ENV)
                        .map_err(|_| BackendError::Network(format!("no api_base and {API_BASE_ENV} unset")))?,
                };
                let key = std::env::var(api_key_env)
                    .map_err(|_| BackendError::MissingCredential(api_key_env.clone()))?;
                Arc::new(RemoteBackend::new(RemoteSettings {
                    api_base: base,
                    model: model.clone(),
                    api_key: key,
                    temperature: *temperature,
                    max_tokens: *max_tokens,
                    attempts: *attempts,
                    backoff_ms: *backoff_ms,
                    timeout_seconds: *timeout_seconds,
                }))
            }
        })
    }
}

/// Hex sha256 of a rendered prompt.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
