//! Flags shared by every subcommand, layered over an optional config file.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use coderag::config::{RunConfig, AUTO_ENDPOINT, STUB_ENDPOINT};
use coderag::dense::{EmbedderClient, StubEmbedder};
use coderag::pipeline::{Clients, EchoGenerator, GeneratorClient};
use coderag::query::{ProbeClient, StubProbe};
use coderag::rerank::{PickerClient, StubPicker};
use coderag::retriever::PathSet;
use coderag::wire::{HttpTransport, RemoteEmbedder, RemoteGenerator, RemotePicker, RemoteProbe, Transport, ENDPOINT_ENV};

use crate::commands::CliError;

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Lines per chunk for query construction [default: 3].
    #[arg(long)]
    pub f: Option<usize>,
    /// Tokens generated per probe [default: 8].
    #[arg(long)]
    pub m: Option<usize>,
    /// Chunks selected besides the target chunk [default: 1].
    #[arg(long)]
    pub g: Option<usize>,
    /// Results per retrieval path [default: 15].
    #[arg(long)]
    pub j: Option<usize>,
    /// Snippets kept after reranking [default: 10].
    #[arg(long)]
    pub u: Option<usize>,
    /// Reranking window size [default: 3].
    #[arg(long)]
    pub w: Option<usize>,
    /// Maximum generated tokens [default: 48].
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Sampling temperature [default: 0].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Maximum model input tokens [default: 2048].
    #[arg(long)]
    pub max_input_tokens: Option<usize>,
    /// Retrieval paths, comma separated [default: sparse,dense,dataflow].
    #[arg(long)]
    pub paths: Option<PathSet>,
    /// Probe model: stub, auto or URL [default: auto].
    #[arg(long)]
    pub probe: Option<String>,
    /// Embedding model: stub, auto or URL [default: auto].
    #[arg(long)]
    pub embed: Option<String>,
    /// Reranking picker: stub, auto or URL [default: auto].
    #[arg(long)]
    pub pick: Option<String>,
    /// Generator: stub, auto or URL [default: auto].
    #[arg(long)]
    pub generate: Option<String>,
    /// Embedding width of a remote embedder [default: learned from first reply].
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Random seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-snippet character budget in picker prompts [default: 1200].
    #[arg(long)]
    pub snippet_chars: Option<usize>,
    /// File holding the picker prompt template ({query}, {snippets}).
    #[arg(long)]
    pub picker_template: Option<PathBuf>,
    /// Worker threads [default: logical cores].
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Overrides {
    /// Config file (or defaults) with flags applied, validated.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(CliError::usage)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        set!(f, m, g, j, u, w, max_new_tokens, temperature, max_input_tokens, paths, seed, snippet_chars);
        if self.embed_dim.is_some() {
            c.embed_dim = self.embed_dim;
        }
        if let Some(v) = &self.probe {
            c.endpoints.probe = v.clone();
        }
        if let Some(v) = &self.embed {
            c.endpoints.embed = v.clone();
        }
        if let Some(v) = &self.pick {
            c.endpoints.pick = v.clone();
        }
        if let Some(v) = &self.generate {
            c.endpoints.generate = v.clone();
        }
        if let Some(p) = &self.picker_template {
            c.picker_template = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        }
        c.validate().map_err(CliError::usage)?;
        if let Some(n) = self.jobs {
            if n == 0 {
                return Err(CliError::usage("--jobs must be >= 1"));
            }
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(c)
    }
}

/// `None` for the built-in stub, otherwise the URL to call.
fn endpoint_url(setting: &str) -> Option<String> {
    match setting {
        STUB_ENDPOINT => None,
        AUTO_ENDPOINT => std::env::var(ENDPOINT_ENV).ok().filter(|v| !v.trim().is_empty()),
        url => Some(url.to_string()),
    }
}

fn transport(url: String) -> Arc<dyn Transport> {
    Arc::new(HttpTransport::new(url))
}

pub fn embedder(config: &RunConfig) -> Arc<dyn EmbedderClient> {
    match endpoint_url(&config.endpoints.embed) {
        None => Arc::new(StubEmbedder::default()),
        Some(url) => Arc::new(RemoteEmbedder::new(transport(url), config.embed_dim)),
    }
}

pub fn picker(config: &RunConfig) -> Arc<dyn PickerClient> {
    match endpoint_url(&config.endpoints.pick) {
        None => Arc::new(StubPicker),
        Some(url) => Arc::new(RemotePicker::new(transport(url), config.picker_prompt())),
    }
}

pub fn clients(config: &RunConfig) -> Clients {
    let probe: Arc<dyn ProbeClient> = match endpoint_url(&config.endpoints.probe) {
        None => Arc::new(StubProbe),
        Some(url) => Arc::new(RemoteProbe::new(transport(url))),
    };
    let generator: Arc<dyn GeneratorClient> = match endpoint_url(&config.endpoints.generate) {
        None => Arc::new(EchoGenerator),
        Some(url) => Arc::new(RemoteGenerator::new(transport(url))),
    };
    Clients { probe, embedder: embedder(config), picker: picker(config), generator }
}
