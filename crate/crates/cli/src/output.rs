//! JSONL writers, manifests, checkpoints and dataset loading.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adarag::QAInstance;
use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Arc<QAInstance>>> {
    let questions: Vec<QAInstance> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for q in &questions {
        q.validate().with_context(|| format!("question {}", q.id))?;
        if !seen.insert(q.id.clone()) {
            bail!("duplicate question id {}", q.id);
        }
    }
    Ok(questions.into_iter().map(Arc::new).collect())
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    sibling(output, "manifest.json")
}

/// `<output>.checkpoint.json`
pub fn checkpoint_path(output: &Path) -> PathBuf {
    sibling(output, "checkpoint.json")
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = sibling(path, "tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Progress of a resumable command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub done: BTreeSet<String>,
    pub counts: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path)?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?,
        ))
    }

    pub fn bump(&mut self, key: &str, by: usize) {
        let v = self.count(key) + by;
        self.counts.insert(key.to_string(), v.into());
    }

    pub fn count(&self, key: &str) -> usize {
        self.counts.get(key).and_then(|v| v.as_u64()).unwrap_or(0) as usize
    }
}
