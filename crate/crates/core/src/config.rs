//! Run configuration: defaults, TOML loading and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::DEFAULT_SIZES;
use crate::pipeline::{GenerationConfig, PipelineConfig};
use crate::rerank::{PickerPrompt, DEFAULT_PICKER_TEMPLATE, DEFAULT_SNIPPET_CHARS};
use crate::retriever::PathSet;

pub const CONFIG_VERSION: u32 = 1;
pub const STUB_ENDPOINT: &str = "stub";
pub const AUTO_ENDPOINT: &str = "auto";

/// Where each model role is served: `stub` (built-in deterministic client),
/// `auto` (the endpoint environment variable if set, else `stub`) or a URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub probe: String,
    pub embed: String,
    pub pick: String,
    pub generate: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        let auto = || AUTO_ENDPOINT.to_string();
        Endpoints { probe: auto(), embed: auto(), pick: auto(), generate: auto() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Lines per chunk when building the query.
    pub f: usize,
    /// Tokens generated per probe.
    pub m: usize,
    /// Chunks selected besides the target chunk.
    pub g: usize,
    /// Results per retrieval path.
    pub j: usize,
    /// Snippets kept after reranking.
    pub u: usize,
    /// Reranking window size.
    pub w: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub max_input_tokens: usize,
    pub paths: PathSet,
    pub endpoints: Endpoints,
    /// Embedding width of a remote embedder; learned from the first reply
    /// when unset.
    pub embed_dim: Option<usize>,
    pub seed: u64,
    pub snippet_chars: usize,
    pub picker_template: String,
    pub distill_sizes: Vec<usize>,
    pub shuffle_votes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            version: CONFIG_VERSION,
            f: p.f,
            m: p.m,
            g: p.g,
            j: p.j,
            u: p.u,
            w: p.w,
            max_new_tokens: p.generation.max_new_tokens,
            temperature: p.generation.temperature,
            max_input_tokens: p.generation.max_input_tokens,
            paths: p.paths,
            endpoints: Endpoints::default(),
            embed_dim: None,
            seed: 0,
            snippet_chars: DEFAULT_SNIPPET_CHARS,
            picker_template: DEFAULT_PICKER_TEMPLATE.to_string(),
            distill_sizes: DEFAULT_SIZES.to_vec(),
            shuffle_votes: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.f == 0 {
            return bad("f must be >= 1".into());
        }
        if self.m == 0 {
            return bad("m must be >= 1".into());
        }
        if self.j == 0 {
            return bad("j must be >= 1".into());
        }
        if self.u == 0 || self.u >= 2 * self.j + 1 {
            return bad(format!("u must satisfy 1 <= u < 2j+1 = {}, got {}", 2 * self.j + 1, self.u));
        }
        if self.w < 2 {
            return bad("w must be >= 2".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0".into());
        }
        if self.max_new_tokens == 0 || self.max_new_tokens >= self.max_input_tokens {
            return bad("need 0 < max_new_tokens < max_input_tokens".into());
        }
        if self.embed_dim == Some(0) {
            return bad("embed_dim must be positive".into());
        }
        if self.snippet_chars == 0 {
            return bad("snippet_chars must be positive".into());
        }
        if self.distill_sizes.iter().any(|&s| s < 2) {
            return bad("distillation subset sizes must be >= 2".into());
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            f: self.f,
            m: self.m,
            g: self.g,
            j: self.j,
            u: self.u,
            w: self.w,
            paths: self.paths,
            generation: GenerationConfig {
                max_new_tokens: self.max_new_tokens,
                temperature: self.temperature,
                max_input_tokens: self.max_input_tokens,
            },
        }
    }

    pub fn picker_prompt(&self) -> PickerPrompt {
        PickerPrompt { template: self.picker_template.clone(), snippet_chars: self.snippet_chars }
    }
}
