//! Line-delimited JSON records. Every line carries the experiment digest.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
struct Line<T> {
    config_digest: String,
    #[serde(flatten)]
    body: T,
}

/// `T` must serialize as a JSON object.
pub fn to_jsonl<T: Serialize>(config_digest: &str, items: &[T]) -> String {
    let mut out = String::new();
    for body in items {
        let line = Line { config_digest: config_digest.to_string(), body };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses every line and returns the shared digest. Lines without a digest,
/// or with differing digests, are errors.
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> CliResult<(Option<String>, Vec<T>)> {
    let mut digest: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line<T> = serde_json::from_str(raw).map_err(|e| CliError::Runtime(format!("line {}: {e}", n + 1)))?;
        match &digest {
            Some(d) if *d != line.config_digest => {
                return Err(CliError::Runtime(format!("line {}: digest {} differs from {d}", n + 1, line.config_digest)));
            }
            None => digest = Some(line.config_digest.clone()),
            _ => {}
        }
        out.push(line.body);
    }
    Ok((digest, out))
}

/// A JSON document wrapped with the experiment digest.
#[derive(Serialize, Deserialize)]
pub struct Document<T> {
    pub config_digest: String,
    pub body: T,
}

pub fn to_document<T: Serialize>(config_digest: &str, body: &T) -> String {
    serde_json::to_string_pretty(&Document { config_digest: config_digest.to_string(), body }).expect("document serializes") + "\n"
}

pub fn from_document<T: DeserializeOwned>(text: &str) -> CliResult<Document<T>> {
    serde_json::from_str(text).map_err(|e| CliError::Runtime(format!("missing or malformed config_digest envelope: {e}")))
}
