//! Batch response collection with a bounded worker pool and an append-only
//! JSONL cache.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use ra_core::GroundTruthRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{complete_with_retry, ChatClient, ChatRequest, RetryPolicy};
use crate::prompt::{build_prompt, image_reference};

/// One line of a response file: either the model's text or the final error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResponseRecord {
    pub fn text(id: &str, text: String) -> Self {
        ResponseRecord { id: id.to_string(), text: Some(text), error: None }
    }

    pub fn error(id: &str, error: String) -> Self {
        ResponseRecord { id: id.to_string(), text: None, error: Some(error) }
    }

    pub fn is_error(&self) -> bool {
        self.text.is_none()
    }
}

#[derive(Debug, Error)]
pub enum ResponseFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

/// Reads a response file. A later line for the same id replaces an earlier one.
pub fn read_responses(path: &Path) -> Result<BTreeMap<String, ResponseRecord>, ResponseFileError> {
    let name = path.display().to_string();
    let io = |source| ResponseFileError::Io { path: name.clone(), source };
    let file = File::open(path).map_err(io)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| ResponseFileError::Schema { path: name.clone(), line: i + 1, message };
        let rec: ResponseRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if rec.text.is_some() == rec.error.is_some() {
            return Err(schema("expected exactly one of \"text\" or \"error\"".into()));
        }
        out.insert(rec.id.clone(), rec);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub model: String,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub retry_errors: bool,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions {
            model: "default".into(),
            concurrency: 4,
            retry: RetryPolicy { retries: 3, backoff: Duration::from_millis(500) },
            retry_errors: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CollectSummary {
    pub cached: usize,
    pub requested: usize,
    pub succeeded: usize,
    pub failed: usize,
}

/// Requests a response for every manifest record not already in the cache
/// and appends each outcome to the cache as it arrives. Per-record failures
/// (unreadable image, transport, HTTP, malformed reply) become error lines;
/// only cache I/O aborts the batch.
pub fn collect_responses(
    records: &[GroundTruthRecord],
    image_dir: &Path,
    cache: &Path,
    client: &dyn ChatClient,
    opts: &CollectOptions,
) -> Result<CollectSummary, ResponseFileError> {
    let cached = if cache.exists() { read_responses(cache)? } else { BTreeMap::new() };
    let todo: VecDeque<&GroundTruthRecord> = records
        .iter()
        .filter(|r| match cached.get(&r.sample_id) {
            Some(c) => opts.retry_errors && c.is_error(),
            None => true,
        })
        .collect();
    let mut summary = CollectSummary {
        cached: records.len() - todo.len(),
        requested: todo.len(),
        ..Default::default()
    };
    if todo.is_empty() {
        return Ok(summary);
    }

    let name = cache.display().to_string();
    let io = |source| ResponseFileError::Io { path: name.clone(), source };
    let mut file = OpenOptions::new().create(true).append(true).open(cache).map_err(io)?;

    let queue = Mutex::new(todo);
    let (tx, rx) = mpsc::channel::<ResponseRecord>();
    let workers = opts.concurrency.max(1);
    std::thread::scope(|scope| -> Result<(), ResponseFileError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let Some(record) = queue.lock().unwrap().pop_front() else { break };
                let outcome = request_one(record, image_dir, client, opts);
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer: the cache only grows from this thread
        for rec in rx {
            if rec.is_error() {
                summary.failed += 1;
                log::warn!("{}: {}", rec.id, rec.error.as_deref().unwrap_or_default());
            } else {
                summary.succeeded += 1;
            }
            let line = serde_json::to_string(&rec).expect("response record serializes");
            writeln!(file, "{line}").and_then(|_| file.flush()).map_err(io)?;
        }
        Ok(())
    })?;
    Ok(summary)
}

fn request_one(
    record: &GroundTruthRecord,
    image_dir: &Path,
    client: &dyn ChatClient,
    opts: &CollectOptions,
) -> ResponseRecord {
    let image_url = match image_reference(&record.image, image_dir) {
        Ok(url) => url,
        Err(e) => return ResponseRecord::error(&record.sample_id, format!("image {}: {e}", record.image)),
    };
    let prompt = build_prompt(record);
    let request = ChatRequest {
        model: opts.model.clone(),
        system: prompt.system,
        user: prompt.user,
        image_url: Some(image_url),
    };
    match complete_with_retry(client, &request, opts.retry) {
        Ok(text) => ResponseRecord::text(&record.sample_id, text),
        Err(e) => ResponseRecord::error(&record.sample_id, e.to_string()),
    }
}
