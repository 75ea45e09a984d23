//! Transcript replay and recording.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{prompt_digest, Backend, BackendError, Completion, Request};
use crate::validation::whitespace_tokens;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    /// sha256 of the prompt that produced `reply`; checked on replay when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
}

impl TranscriptRecord {
    pub fn reply(text: impl Into<String>) -> Self {
        TranscriptRecord {
            prompt_digest: None,
            reply: text.into(),
            usage: None,
            latency_seconds: None,
        }
    }
}

/// Reads a line-delimited transcript. Blank lines are skipped.
pub fn read_transcript(text: &str) -> Result<Vec<TranscriptRecord>, BackendError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BackendError::Transcript(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_transcript(records: &[TranscriptRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Returns canned replies in order.
#[derive(Debug)]
pub struct ScriptedBackend {
    records: Vec<TranscriptRecord>,
    cursor: Mutex<usize>,
    pub check_digests: bool,
}

impl ScriptedBackend {
    pub fn new(records: Vec<TranscriptRecord>) -> Self {
        ScriptedBackend {
            records,
            cursor: Mutex::new(0),
            check_digests: true,
        }
    }

    /// Replies without digests or usage.
    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(TranscriptRecord::reply).collect())
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Transcript(format!("{}: {e}", path.display())))?;
        Ok(Self::new(read_transcript(&text)?))
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().expect("cursor lock")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let index = *cursor;
        let record = self
            .records
            .get(index)
            .ok_or(BackendError::TranscriptExhausted { calls: index })?;
        if self.check_digests {
            if let Some(expected) = &record.prompt_digest {
                let found = prompt_digest(request.prompt);
                if &found != expected {
                    return Err(BackendError::PromptDrift {
                        index,
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        *cursor += 1;
        let usage = record.usage.unwrap_or(Usage {
            prompt_tokens: whitespace_tokens(request.prompt),
            completion_tokens: whitespace_tokens(&record.reply),
        });
        Ok(Completion {
            text: record.reply.clone(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_seconds: record.latency_seconds.unwrap_or(0.0),
        })
    }
}

/// Wraps another backend and keeps a transcript of every exchange, so that a
/// live run can be replayed later with [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<TranscriptRecord>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().expect("records lock").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, write_transcript(&self.records()))
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &Request<'_>) -> Result<Completion, BackendError> {
        let c = self.inner.complete(request)?;
        self.records.lock().expect("records lock").push(TranscriptRecord {
            prompt_digest: Some(prompt_digest(request.prompt)),
            reply: c.text.clone(),
            usage: Some(Usage {
                prompt_tokens: c.prompt_tokens,
                completion_tokens: c.completion_tokens,
            }),
            latency_seconds: Some(c.latency_seconds),
        });
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Query;

    fn req(prompt: &str) -> Request<'_> {
        Request {
            prompt,
            query: Query::Freeform,
        }
    }

    #[test]
    fn replies_in_order_then_exhausted() {
        let b = ScriptedBackend::from_replies(["one", "two"]);
        assert_eq!(b.complete(&req("a")).unwrap().text, "one");
        assert_eq!(b.complete(&req("b")).unwrap().text, "two");
        assert_eq!(
            b.complete(&req("c")).unwrap_err(),
            BackendError::TranscriptExhausted { calls: 2 }
        );
    }

    #[test]
    fn usage_falls_back_to_whitespace() {
        let b = ScriptedBackend::from_replies(["a b c"]);
        let c = b.complete(&req("x y")).unwrap();
        assert_eq!((c.prompt_tokens, c.completion_tokens), (2, 3));
    }

    #[test]
    fn digest_mismatch_is_drift() {
        let mut rec = TranscriptRecord::reply("r");
        rec.prompt_digest = Some(prompt_digest("expected prompt"));
        let b = ScriptedBackend::new(vec![rec.clone(), rec]);
        assert!(matches!(
            b.complete(&req("other prompt")),
            Err(BackendError::PromptDrift { index: 0, .. })
        ));
        // cursor does not advance on drift
        assert_eq!(b.consumed(), 0);
        assert!(b.complete(&req("expected prompt")).is_ok());
    }

    #[test]
    fn recording_round_trips() {
        let rec = RecordingBackend::new(ScriptedBackend::from_replies(["alpha", "beta"]));
        let first = rec.complete(&req("p1")).unwrap();
        let second = rec.complete(&req("p2")).unwrap();
        let text = write_transcript(&rec.records());
        let replay = ScriptedBackend::new(read_transcript(&text).unwrap());
        assert_eq!(replay.complete(&req("p1")).unwrap(), first);
        assert_eq!(replay.complete(&req("p2")).unwrap(), second);
    }

    #[test]
    fn malformed_transcript_line() {
        let err = read_transcript("{\"reply\":\"a\"}\n\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }
}
