//! Language-model clients for prompt expansion: deterministic transcript
//! replay, a call-recording cache, and an opt-in subprocess bridge.
//!
//! Transcripts are JSON arrays of `{ "query": ..., "response": ... }`
//! entries in call order. Replay matches by exact query text and consumes
//! entries for the same query first-to-last, so a recorded pipeline run
//! replays byte-for-byte.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use ldmrb_core::dataset::LlmClient;
use ldmrb_core::metrics::ClientError;
use serde::{Deserialize, Serialize};

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub query: String,
    pub response: String,
}

/// Reads a transcript file (a JSON array of [`TranscriptEntry`]).
pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, ClientError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ClientError::Unavailable(format!("transcript {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ClientError::Failure(format!("transcript {}: {e}", path.display())))
}

/// Writes a transcript file.
pub fn save_transcript(path: &Path, entries: &[TranscriptEntry]) -> Result<(), ClientError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| ClientError::Failure(format!("transcript {}: {e}", path.display())))?;
        }
    }
    let mut text = serde_json::to_string_pretty(entries)
        .map_err(|e| ClientError::Failure(format!("transcript serialize: {e}")))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| ClientError::Failure(format!("transcript {}: {e}", path.display())))
}

/// Serves recorded responses and never calls out anywhere.
///
/// Each query consumes its earliest unconsumed entry; a query with no
/// remaining entries is an error, keeping silent transcript drift
/// impossible.
#[derive(Debug, Clone)]
pub struct ReplayLlm {
    responses: HashMap<String, Vec<String>>,
    cursors: HashMap<String, usize>,
}

impl ReplayLlm {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for entry in entries {
            responses.entry(entry.query).or_default().push(entry.response);
        }
        Self {
            responses,
            cursors: HashMap::new(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, ClientError> {
        Ok(Self::from_entries(load_transcript(path)?))
    }
}

impl LlmClient for ReplayLlm {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&mut self, query: &str) -> Result<String, ClientError> {
        let recorded = self.responses.get(query).map(Vec::as_slice).unwrap_or(&[]);
        let cursor = self.cursors.entry(query.to_string()).or_insert(0);
        match recorded.get(*cursor) {
            Some(response) => {
                *cursor += 1;
                Ok(response.clone())
            }
            None => Err(ClientError::Unavailable(format!(
                "no recorded response for query (seen {} of {}): {query}",
                cursor, recorded.len()
            ))),
        }
    }
}

/// Wraps another client with a persistent transcript: cached queries are
/// replayed, new ones are forwarded and recorded. Running a pipeline once
/// against a live client leaves behind a transcript that replays offline.
pub struct CachingLlm {
    inner: Box<dyn LlmClient>,
    path: PathBuf,
    entries: Vec<TranscriptEntry>,
    cursors: HashMap<String, usize>,
    id: String,
}

impl CachingLlm {
    /// Opens `path` (which may not exist yet) over `inner`.
    pub fn new(inner: Box<dyn LlmClient>, path: &Path) -> Result<Self, ClientError> {
        let entries = if path.is_file() {
            load_transcript(path)?
        } else {
            Vec::new()
        };
        let id = format!("cached+{}", inner.id());
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            entries,
            cursors: HashMap::new(),
            id,
        })
    }

    /// Number of exchanges currently in the transcript.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl LlmClient for CachingLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&mut self, query: &str) -> Result<String, ClientError> {
        let cursor = self.cursors.entry(query.to_string()).or_insert(0);
        let mut seen = 0usize;
        for entry in &self.entries {
            if entry.query == query {
                if seen == *cursor {
                    *cursor += 1;
                    return Ok(entry.response.clone());
                }
                seen += 1;
            }
        }
        let response = self.inner.complete(query)?;
        self.entries.push(TranscriptEntry {
            query: query.to_string(),
            response: response.clone(),
        });
        *self.cursors.get_mut(query).expect("cursor inserted above") += 1;
        save_transcript(&self.path, &self.entries)?;
        Ok(response)
    }
}

/// Bridges to an external command: the query goes to its stdin, the
/// response is its stdout. Only constructed when explicitly requested
/// (`exec:` client specs), never by default.
#[derive(Debug, Clone)]
pub struct ExecLlm {
    program: String,
    args: Vec<String>,
    id: String,
}

impl ExecLlm {
    pub fn new(command_line: &str) -> Result<Self, ClientError> {
        let mut parts = command_line.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| ClientError::Unavailable("empty exec command".into()))?
            .to_string();
        let args: Vec<String> = parts.map(str::to_string).collect();
        let id = format!("exec:{command_line}");
        Ok(Self { program, args, id })
    }
}

impl LlmClient for ExecLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&mut self, query: &str) -> Result<String, ClientError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ClientError::Unavailable(format!("spawn {}: {e}", self.program)))?;
        child
            .stdin
            .as_mut()
            .expect("stdin piped")
            .write_all(query.as_bytes())
            .map_err(|e| ClientError::Failure(format!("write to {}: {e}", self.program)))?;
        let output = child
            .wait_with_output()
            .map_err(|e| ClientError::Failure(format!("wait for {}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(ClientError::Failure(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        String::from_utf8(output.stdout)
            .map(|s| s.trim_end().to_string())
            .map_err(|e| ClientError::Failure(format!("non-utf8 output from {}: {e}", self.program)))
    }
}
