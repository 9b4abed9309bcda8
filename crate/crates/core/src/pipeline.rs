//! End-to-end completion: query, retrieval, reranking, prompt, generation.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{EmbedderClient, StubEmbedder};
use crate::kb::ItemId;
use crate::query::{self, ProbeClient, QueryError, RetrievalQuery, StubProbe};
use crate::rerank::{self, PickerClient, RerankOutcome, StubPicker};
use crate::retriever::{self, Indexes, PathSet, PathTimings, RetrievalList, RetrieveError};
use crate::wire::ClientError;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 48;
pub const DEFAULT_MAX_INPUT_TOKENS: usize = 2048;

/// One completion case. `prefix` is the file text before the cursor, its
/// last line being the unfinished line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionTask {
    pub task_id: String,
    #[serde(rename = "repo")]
    pub repo_root: PathBuf,
    #[serde(rename = "file")]
    pub file_path: String,
    pub prefix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub cursor_line: usize,
}

impl CompletionTask {
    /// Line of the cursor within `prefix` (the line count of the prefix).
    pub fn prefix_cursor_line(&self) -> usize {
        query::split_lines(&query::normalize_newlines(&self.prefix)).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub max_input_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
        }
    }
}

impl GenerationConfig {
    /// Tokens available to the prompt once the generation reserve is taken.
    pub fn prompt_budget(&self) -> usize {
        self.max_input_tokens.saturating_sub(self.max_new_tokens)
    }
}

/// The code model that writes the completion.
pub trait GeneratorClient: Send + Sync {
    fn generate(&self, prompt: &str, config: &GenerationConfig) -> Result<String, ClientError>;

    fn count_tokens(&self, text: &str) -> usize {
        approx_token_count(text)
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Token estimate for models without an exposed tokenizer: every run of
/// word characters and every other non-space character is one token, plus a
/// 10% margin, rounded up.
pub fn approx_token_count(text: &str) -> usize {
    let mut raw = 0usize;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            if !in_word {
                raw += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                raw += 1;
            }
        }
    }
    (raw * 11).div_ceil(10)
}

/// Deterministic offline generator: finishes the identifier being typed with
/// the most frequent longer identifier in the prompt that starts with it.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl GeneratorClient for EchoGenerator {
    fn generate(&self, prompt: &str, _config: &GenerationConfig) -> Result<String, ClientError> {
        let Some(partial) = rerank::trailing_partial_identifier(prompt) else {
            return Ok(String::new());
        };
        let body = &prompt[..prompt.len() - partial.len()];
        let mut best: Option<(usize, String)> = None;
        let mut counts: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for id in crate::lexer::identifiers(body) {
            if id.len() > partial.len() && id.starts_with(partial) {
                let c = counts.entry(id.clone()).or_default();
                if *c == 0 {
                    order.push(id);
                }
                *c += 1;
            }
        }
        for id in order {
            let c = counts[&id];
            if best.as_ref().map_or(true, |(b, _)| c > *b) {
                best = Some((c, id));
            }
        }
        Ok(best.map(|(_, id)| id[partial.len()..].to_string()).unwrap_or_default())
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// The four model roles.
#[derive(Clone)]
pub struct Clients {
    pub probe: Arc<dyn ProbeClient>,
    pub embedder: Arc<dyn EmbedderClient>,
    pub picker: Arc<dyn PickerClient>,
    pub generator: Arc<dyn GeneratorClient>,
}

impl Clients {
    pub fn stub() -> Self {
        Clients {
            probe: Arc::new(StubProbe),
            embedder: Arc::new(StubEmbedder::default()),
            picker: Arc::new(StubPicker),
            generator: Arc::new(EchoGenerator),
        }
    }
}

/// Parameters of one completion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub f: usize,
    pub m: usize,
    pub g: usize,
    pub j: usize,
    pub u: usize,
    pub w: usize,
    pub paths: PathSet,
    pub generation: GenerationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            f: query::DEFAULT_CHUNK_LINES,
            m: query::DEFAULT_PROBE_STEPS,
            g: query::DEFAULT_SELECTED_CHUNKS,
            j: retriever::DEFAULT_PER_PATH,
            u: rerank::DEFAULT_TOP_U,
            w: rerank::DEFAULT_WINDOW,
            paths: PathSet::ALL,
            generation: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query construction: {0}")]
    Query(#[from] QueryError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrieveError),
    #[error("prompt assembly: {0}")]
    Prompt(#[from] BudgetImpossible),
    #[error("generation: {0}")]
    Generation(#[source] ClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("the cursor line alone needs {needed} tokens but the prompt budget is {budget}")]
pub struct BudgetImpossible {
    pub needed: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssembledPrompt {
    pub text: String,
    /// Leading snippets that fit; the rest were dropped from the end.
    pub snippets_kept: usize,
    pub prefix_lines_dropped: usize,
    pub tokens: usize,
}

/// A snippet as shown in the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSnippet<'a> {
    pub file_path: &'a str,
    pub text: &'a str,
}

fn snippet_block(s: &PromptSnippet<'_>) -> String {
    format!("# file: {}\n{}\n\n", s.file_path, s.text.trim_end_matches('\n'))
}

/// Builds `snippets` (best first, each under a `# file:` header) followed by
/// `prefix`, within `budget` tokens. Over budget, snippets are dropped from
/// the worst upward, then prefix lines from the top; the cursor line always
/// stays last.
pub fn assemble_prompt(
    snippets: &[PromptSnippet<'_>],
    prefix: &str,
    budget: usize,
    generator: &dyn GeneratorClient,
) -> Result<AssembledPrompt, BudgetImpossible> {
    let lines: Vec<&str> = prefix.split_inclusive('\n').collect();
    let last = lines.last().copied().unwrap_or("");
    let needed = generator.count_tokens(last);
    if needed > budget {
        return Err(BudgetImpossible { needed, budget });
    }
    let blocks: Vec<String> = snippets.iter().map(snippet_block).collect();
    let count = |kept: usize, dropped: usize| -> (String, usize) {
        let mut text: String = blocks[..kept].concat();
        text.extend(lines[dropped..].iter().copied());
        let n = generator.count_tokens(&text);
        (text, n)
    };
    let mut kept = blocks.len();
    loop {
        let (text, tokens) = count(kept, 0);
        if tokens <= budget {
            return Ok(AssembledPrompt { text, snippets_kept: kept, prefix_lines_dropped: 0, tokens });
        }
        if kept == 0 {
            break;
        }
        kept -= 1;
    }
    // Smallest number of leading lines to drop; the count shrinks as lines go.
    let (mut lo, mut hi) = (1, lines.len().saturating_sub(1));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if count(0, mid).1 <= budget {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (text, tokens) = count(0, lo);
    if tokens > budget {
        return Err(BudgetImpossible { needed: tokens, budget });
    }
    Ok(AssembledPrompt { text, snippets_kept: 0, prefix_lines_dropped: lo, tokens })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub query: Duration,
    pub paths: PathTimings,
    pub rerank: Duration,
    pub prompt: Duration,
    pub generation: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifacts {
    pub query: RetrievalQuery,
    pub retrieval_list: RetrievalList,
    pub rerank_outcome: RerankOutcome,
    pub prompt: AssembledPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completion {
    pub generated: String,
    pub artifacts: Artifacts,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Runs the whole chain for one task. An empty retrieval list (or an empty
/// path set) yields a prompt that is just the prefix.
pub fn complete(
    task: &CompletionTask,
    indexes: Indexes<'_>,
    clients: &Clients,
    config: &PipelineConfig,
) -> Result<Completion, PipelineError> {
    let mut timings = StageTimings::default();
    let prefix = query::normalize_newlines(&task.prefix).into_owned();
    let cursor = task.prefix_cursor_line();
    if cursor == 0 {
        return Err(QueryError::EmptyFile.into());
    }

    let t = Instant::now();
    let query = query::construct_query(&prefix, cursor, config.f, config.m, config.g, clients.probe.as_ref())?;
    timings.query = t.elapsed();

    let (retrieval_list, paths) = if config.paths.is_empty() {
        (RetrievalList { query: query.clone(), candidates: Vec::new() }, PathTimings::default())
    } else {
        retriever::retrieve_all(&query, &prefix, indexes, clients.embedder.as_ref(), config.j, config.paths)?
    };
    timings.paths = paths;

    let t = Instant::now();
    let rerank_outcome = rerank::rerank(&retrieval_list, indexes.kb, clients.picker.as_ref(), config.u, config.w);
    timings.rerank = t.elapsed();

    let t = Instant::now();
    let snippets: Vec<PromptSnippet<'_>> = rerank_outcome
        .ordered_items
        .iter()
        .filter_map(|id: &ItemId| indexes.kb.get(id))
        .map(|it| PromptSnippet { file_path: &it.file_path, text: &it.text })
        .collect();
    let prompt = assemble_prompt(&snippets, &prefix, config.generation.prompt_budget(), clients.generator.as_ref())?;
    timings.prompt = t.elapsed();

    let t = Instant::now();
    let generated = clients
        .generator
        .generate(&prompt.text, &config.generation)
        .map_err(PipelineError::Generation)?;
    timings.generation = t.elapsed();

    Ok(Completion {
        generated,
        artifacts: Artifacts { query, retrieval_list, rerank_outcome, prompt },
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One token per whitespace-separated word, no margin.
    struct Words;

    impl GeneratorClient for Words {
        fn generate(&self, _p: &str, _c: &GenerationConfig) -> Result<String, ClientError> {
            Ok(String::new())
        }
        fn count_tokens(&self, text: &str) -> usize {
            text.split_whitespace().count()
        }
    }

    fn snip<'a>(path: &'a str, text: &'a str) -> PromptSnippet<'a> {
        PromptSnippet { file_path: path, text }
    }

    #[test]
    fn approx_count() {
        assert_eq!(approx_token_count(""), 0);
        // cfg, =, parse_config, (, path, ) -> 6 * 1.1 = 6.6
        assert_eq!(approx_token_count("cfg = parse_config(path)"), 7);
        assert_eq!(approx_token_count("a b c d e f g h i j"), 11);
    }

    #[test]
    fn zero_snippets_is_prefix() {
        let p = assemble_prompt(&[], "x = 1\ny = ", 100, &Words).unwrap();
        assert_eq!(p.text, "x = 1\ny = ");
    }

    #[test]
    fn snippets_precede_prefix_best_first() {
        let s = [snip("a.py", "def a():\n    pass\n"), snip("b.py", "B = 2")];
        let p = assemble_prompt(&s, "z = ", 100, &Words).unwrap();
        assert_eq!(p.text, "# file: a.py\ndef a():\n    pass\n\n# file: b.py\nB = 2\n\nz = ");
        assert_eq!(p.snippets_kept, 2);
    }

    #[test]
    fn lowest_rank_dropped_first() {
        // blocks: "# file: a.py\nA B\n\n" = 5 words, same for b; prefix 2 words
        let s = [snip("a.py", "A B"), snip("b.py", "C D")];
        let p = assemble_prompt(&s, "x =", 12, &Words).unwrap();
        assert_eq!(p.snippets_kept, 2);
        let p = assemble_prompt(&s, "x =", 10, &Words).unwrap();
        assert_eq!(p.snippets_kept, 1);
        assert_eq!(p.text, "# file: a.py\nA B\n\nx =");
        let p = assemble_prompt(&s, "x =", 6, &Words).unwrap();
        assert_eq!(p.snippets_kept, 0);
        assert_eq!(p.text, "x =");
    }

    #[test]
    fn prefix_is_cut_from_the_top() {
        let p = assemble_prompt(&[], "a b\nc d\ne f\ng h", 5, &Words).unwrap();
        assert_eq!(p.text, "e f\ng h");
        assert_eq!(p.prefix_lines_dropped, 2);
        assert!(assemble_prompt(&[], "a b\nc d e f", 3, &Words).is_err());
    }

    #[test]
    fn echo_generator_completes_identifier() {
        let g = EchoGenerator;
        let cfg = GenerationConfig::default();
        assert_eq!(g.generate("def parse_config(path):\n    pass\ncfg = parse_conf", &cfg).unwrap(), "ig");
        assert_eq!(g.generate("x = 1\ny = ", &cfg).unwrap(), "");
    }
}
