//! Retrieval-query construction by log-probability probing.
//!
//! The unfinished file is cut into `f`-line chunks. Each chunk other than the
//! target chunk (the one holding the cursor) is prepended to the target chunk
//! and handed to a probe model, which greedily generates `m` tokens; the sum
//! of the per-step maximum log-probabilities is the chunk's confidence. The
//! `g` most confident chunks, in file order, followed by the target chunk form
//! the retrieval query.

use std::borrow::Cow;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::LineSpan;
use crate::lexer;
use crate::wire::ClientError;

pub const DEFAULT_CHUNK_LINES: usize = 3;
pub const DEFAULT_PROBE_STEPS: usize = 8;
pub const DEFAULT_SELECTED_CHUNKS: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub line_span: LineSpan,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkScore {
    pub chunk_index: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    /// Probe-selected chunks in file order.
    pub selected_chunks: Vec<String>,
    pub target_chunk: String,
    pub combined_text: String,
}

impl RetrievalQuery {
    pub fn new(selected_chunks: Vec<String>, target_chunk: String) -> Self {
        let combined_text = selected_chunks
            .iter()
            .chain(std::iter::once(&target_chunk))
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n");
        RetrievalQuery { selected_chunks, target_chunk, combined_text }
    }
}

/// A language model used for probing.
pub trait ProbeClient: Send + Sync {
    /// Generates `m` tokens greedily at temperature 0 after `prompt` and
    /// returns the sum over steps of the maximum vocabulary log-probability.
    fn greedy_score(&self, prompt: &str, m: usize) -> Result<f64, ClientError>;

    /// Whether `greedy_score` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

impl<F> ProbeClient for F
where
    F: Fn(&str, usize) -> Result<f64, ClientError> + Send + Sync,
{
    fn greedy_score(&self, prompt: &str, m: usize) -> Result<f64, ClientError> {
        self(prompt, m)
    }
}

/// Deterministic offline probe.
///
/// Confidence is minus the number of distinct identifiers that occur exactly
/// once in the prompt: a chunk whose names recur in the target chunk (or
/// within itself) leaves fewer dangling names and scores higher. Scores are
/// always `<= 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubProbe;

impl ProbeClient for StubProbe {
    fn greedy_score(&self, prompt: &str, _m: usize) -> Result<f64, ClientError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for id in lexer::identifiers(prompt) {
            *counts.entry(id).or_default() += 1;
        }
        let singletons = counts.values().filter(|&&c| c == 1).count();
        Ok(-(singletons as f64))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("file has no lines")]
    EmptyFile,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probe unavailable while scoring chunk {chunk_index}: {source}")]
    ProbeUnavailable {
        chunk_index: usize,
        #[source]
        source: ClientError,
    },
    #[error("probe returned non-finite confidence {value} for chunk {chunk_index}")]
    NonFinite { chunk_index: usize, value: f64 },
}

pub fn normalize_newlines(text: &str) -> Cow<'_, str> {
    if text.contains('\r') {
        Cow::Owned(text.replace("\r\n", "\n"))
    } else {
        Cow::Borrowed(text)
    }
}

/// Splits on `\n`; a trailing newline terminates the last line rather than
/// starting a new empty one.
pub fn split_lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').collect()
}

/// Partitions the file into `f`-line chunks and locates the chunk containing
/// `cursor_line`.
pub fn chunk_file(file_text: &str, f: usize, cursor_line: usize) -> Result<(Vec<Chunk>, usize), QueryError> {
    if f == 0 {
        return Err(QueryError::InvalidArgument("chunk length f must be >= 1".into()));
    }
    let text = normalize_newlines(file_text);
    let lines = split_lines(&text);
    if lines.is_empty() {
        return Err(QueryError::EmptyFile);
    }
    if cursor_line == 0 || cursor_line > lines.len() {
        return Err(QueryError::InvalidArgument(format!(
            "cursor line {cursor_line} outside 1..={}",
            lines.len()
        )));
    }
    let chunks = lines
        .chunks(f)
        .enumerate()
        .map(|(index, group)| {
            let start = index * f + 1;
            Chunk {
                index,
                line_span: LineSpan::new(start, start + group.len() - 1),
                text: group.join("\n"),
            }
        })
        .collect();
    Ok((chunks, (cursor_line - 1) / f))
}

/// The probe prompt: the candidate chunk, a newline, then the target chunk.
pub fn probe_prompt(chunk: &str, target: &str) -> String {
    format!("{chunk}\n{target}")
}

/// Scores every chunk except the target. Scoring is parallel when the probe
/// declares itself safe for concurrent calls.
pub fn score_chunks(
    chunks: &[Chunk],
    target_index: usize,
    probe: &dyn ProbeClient,
    m: usize,
) -> Result<Vec<ChunkScore>, QueryError> {
    let target = &chunks
        .get(target_index)
        .ok_or_else(|| QueryError::InvalidArgument(format!("target index {target_index} out of range")))?
        .text;
    let score_one = |chunk: &Chunk| -> Result<ChunkScore, QueryError> {
        let confidence = probe
            .greedy_score(&probe_prompt(&chunk.text, target), m)
            .map_err(|source| QueryError::ProbeUnavailable { chunk_index: chunk.index, source })?;
        if !confidence.is_finite() {
            return Err(QueryError::NonFinite { chunk_index: chunk.index, value: confidence });
        }
        Ok(ChunkScore { chunk_index: chunk.index, confidence })
    };
    let candidates = chunks.iter().filter(|c| c.index != target_index);
    if probe.concurrent_safe() {
        candidates.collect::<Vec<_>>().into_par_iter().map(score_one).collect()
    } else {
        candidates.map(score_one).collect()
    }
}

/// Indices of the `g` best chunks: highest confidence first, ties to the
/// lower chunk index. Returned in ascending index order.
pub fn select_top(scores: &[ChunkScore], g: usize) -> Vec<usize> {
    let mut ranked: Vec<&ChunkScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.chunk_index.cmp(&b.chunk_index))
    });
    let mut picked: Vec<usize> = ranked.into_iter().take(g).map(|s| s.chunk_index).collect();
    picked.sort_unstable();
    picked
}

/// Builds the retrieval query for a cursor on `cursor_line`. Lines after the
/// cursor are never seen: the file is cut at the cursor line first, so the
/// target chunk ends there.
pub fn construct_query(
    file_text: &str,
    cursor_line: usize,
    f: usize,
    m: usize,
    g: usize,
    probe: &dyn ProbeClient,
) -> Result<RetrievalQuery, QueryError> {
    let text = normalize_newlines(file_text);
    let lines = split_lines(&text);
    if lines.is_empty() {
        return Err(QueryError::EmptyFile);
    }
    if cursor_line == 0 || cursor_line > lines.len() {
        return Err(QueryError::InvalidArgument(format!(
            "cursor line {cursor_line} outside 1..={}",
            lines.len()
        )));
    }
    let visible = lines[..cursor_line].join("\n");
    let (chunks, target_index) = chunk_file(&visible, f, cursor_line)?;
    let target = chunks[target_index].text.clone();
    if g == 0 || chunks.len() < 2 {
        return Ok(RetrievalQuery::new(Vec::new(), target));
    }
    let scores = score_chunks(&chunks, target_index, probe, m)?;
    let selected = select_top(&scores, g)
        .into_iter()
        .map(|i| chunks[i].text.clone())
        .collect();
    Ok(RetrievalQuery::new(selected, target))
}
