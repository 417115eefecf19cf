//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use adarag::gateway::protocol::DEFAULT_INSTRUCTION;
use adarag::gateway::{
    DecodeOptions, EndpointConfig, Gateway, HttpModel, ModelRoles, ScriptedModel, DEFAULT_CONCURRENCY,
};
use adarag::retriever::{TokenizerOptions, DEFAULT_BODY_CHARS};
use adarag::search::{SearchBudget, SearchConfig};
use adarag::Bm25Params;
use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub k1: f64,
    pub b: f64,
    pub stopwords: bool,
    pub stemming: bool,
    pub body_chars: usize,
    /// Reject malformed corpus lines instead of skipping them.
    pub strict: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let params = Bm25Params::default();
        RetrievalConfig {
            k: 3,
            k1: params.k1,
            b: params.b,
            stopwords: false,
            stemming: false,
            body_chars: DEFAULT_BODY_CHARS,
            strict: true,
        }
    }
}

impl RetrievalConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }

    pub fn tokenizer(&self) -> TokenizerOptions {
        TokenizerOptions {
            stopwords: self.stopwords,
            stemming: self.stemming,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Question sampling.
    pub sample: u64,
    /// Random selection policy.
    pub policy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ModelBackend {
    Scripted { script: PathBuf },
    Http(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub backend: ModelBackend,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

impl ModelConfig {
    pub fn describe(&self) -> String {
        match &self.backend {
            ModelBackend::Scripted { script } => format!("scripted:{}", script.display()),
            ModelBackend::Http(e) => format!("http:{}@{}", e.model, e.base_url),
        }
    }

    fn gateway(&self) -> Result<Gateway> {
        let backend: Arc<dyn adarag::gateway::Generator> = match &self.backend {
            ModelBackend::Scripted { script } => {
                Arc::new(ScriptedModel::load(script).with_context(|| format!("loading script {}", script.display()))?)
            }
            ModelBackend::Http(endpoint) => Arc::new(HttpModel::new(endpoint)?),
        };
        Ok(Gateway::new(backend).with_concurrency(self.concurrency.unwrap_or(DEFAULT_CONCURRENCY)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Models {
    pub decomposer: Option<ModelConfig>,
    /// Defaults to the decomposer.
    pub target: Option<ModelConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub instruction: Option<String>,
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub budget: SearchBudget,
    pub decode: DecodeOptions,
    pub seeds: Seeds,
    pub models: Models,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub max_depth: Option<usize>,
    pub max_expansions: Option<usize>,
    pub max_model_calls: Option<usize>,
    pub seed: Option<u64>,
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl RunConfig {
    /// Reads `path` (if given) and applies `overrides`. Relative paths in the
    /// file are taken relative to the file's directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut config: RunConfig =
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new("."));
                config.resolve_paths(base);
                config
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.paths.corpus);
        resolve(base, &mut self.paths.index);
        resolve(base, &mut self.paths.dataset);
        resolve(base, &mut self.paths.output_dir);
        for model in [&mut self.models.decomposer, &mut self.models.target]
            .into_iter()
            .flatten()
        {
            if let ModelBackend::Scripted { script } = &mut model.backend {
                if script.is_relative() {
                    *script = base.join(&*script);
                }
            }
        }
    }

    fn apply(&mut self, o: &Overrides) {
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut self.paths.corpus, &o.corpus);
        set(&mut self.paths.index, &o.index);
        set(&mut self.paths.dataset, &o.dataset);
        set(&mut self.paths.output_dir, &o.output_dir);
        if let Some(k) = o.k {
            self.retrieval.k = k;
        }
        if let Some(v) = o.max_depth {
            self.budget.max_depth = v;
        }
        if let Some(v) = o.max_expansions {
            self.budget.max_expansions = v;
        }
        if let Some(v) = o.max_model_calls {
            self.budget.max_model_calls = v;
        }
        if let Some(seed) = o.seed {
            self.seeds = Seeds {
                sample: seed,
                policy: seed,
            };
        }
    }

    pub fn corpus(&self) -> Result<&Path> {
        self.paths
            .corpus
            .as_deref()
            .ok_or_else(|| anyhow!("no corpus path (set paths.corpus or --corpus)"))
    }

    pub fn index(&self) -> Result<&Path> {
        self.paths
            .index
            .as_deref()
            .ok_or_else(|| anyhow!("no index path (set paths.index or --index)"))
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.paths
            .dataset
            .as_deref()
            .ok_or_else(|| anyhow!("no dataset path (set paths.dataset or --dataset)"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            budget: self.budget,
            k: self.retrieval.k,
            body_chars: self.retrieval.body_chars,
            instruction: self
                .instruction
                .clone()
                .unwrap_or_else(|| DEFAULT_INSTRUCTION.to_string()),
            decode: self.decode,
        }
    }

    fn decomposer_config(&self) -> Result<&ModelConfig> {
        self.models
            .decomposer
            .as_ref()
            .ok_or_else(|| anyhow!("no decomposer model configured ([models.decomposer])"))
    }

    pub fn roles(&self) -> Result<ModelRoles> {
        let decomposer = self.decomposer_config()?;
        let shared = Arc::new(decomposer.gateway()?);
        Ok(match &self.models.target {
            Some(target) if target != decomposer => ModelRoles {
                decomposer: shared,
                target: Arc::new(target.gateway()?),
            },
            _ => ModelRoles::shared(shared),
        })
    }

    pub fn role_descriptions(&self) -> serde_json::Value {
        let decomposer = self.models.decomposer.as_ref().map(ModelConfig::describe);
        let target = self
            .models
            .target
            .as_ref()
            .map(ModelConfig::describe)
            .or_else(|| decomposer.clone());
        serde_json::json!({ "decomposer": decomposer, "target": target })
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
