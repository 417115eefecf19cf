use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::prompt_key;
use super::{GatewayError, GenerationRequest, Generator};

/// How a fixture entry identifies its prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptMatch {
    Hash {
        transcript_hash: String,
    },
    Verbatim {
        transcript: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        forced_prefix: Option<String>,
    },
}

impl ScriptMatch {
    pub fn key(&self) -> String {
        match self {
            ScriptMatch::Hash { transcript_hash } => transcript_hash.to_ascii_lowercase(),
            ScriptMatch::Verbatim {
                transcript,
                forced_prefix,
            } => prompt_key(transcript, forced_prefix.as_deref()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub emit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Deterministic model answering from a table keyed on
/// [`Prompt::key`](super::Prompt::key). Seeds and temperature are ignored.
#[derive(Debug, Clone, Default)]
pub struct ScriptedModel {
    table: HashMap<String, String>,
}

impl ScriptedModel {
    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, GatewayError> {
        let mut table = HashMap::new();
        for entry in entries {
            let key = entry.matcher.key();
            match table.get(&key) {
                Some(existing) if existing != &entry.emit => {
                    return Err(GatewayError::Config(format!(
                        "conflicting script entries for prompt {key}"
                    )));
                }
                _ => {
                    table.insert(key, entry.emit);
                }
            }
        }
        Ok(ScriptedModel { table })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text)?;
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Generator for ScriptedModel {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let key = request.prompt.key();
        self.table.get(&key).cloned().ok_or_else(|| {
            let text = request.prompt.continuation_text();
            let tail: String = {
                let chars: Vec<char> = text.chars().collect();
                chars[chars.len().saturating_sub(80)..].iter().collect()
            };
            GatewayError::ScriptMiss { key, tail }
        })
    }
}
