//! Window-tournament reranking.
//!
//! The candidate list is cut into windows of `w` items where neighbouring
//! windows share one item. A picker chooses the most helpful snippet of each
//! window; winners are grouped `w` at a time into the next round until one
//! remains. That overall winner is extracted, removed from the (at most two)
//! windows holding it, and only the nodes on those windows' paths to the root
//! are replayed. Repeating this `u` times yields the top-`u` order.
//!
//! A node with a single candidate passes it up without asking the picker.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kb::{ItemId, KnowledgeBase};
use crate::retriever::RetrievalList;
use crate::sparse;
use crate::wire::ClientError;

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_TOP_U: usize = 10;
pub const DEFAULT_SNIPPET_CHARS: usize = 1200;
pub const TRUNCATION_MARKER: &str = "\n# ... (truncated)";

/// Chooses the most helpful snippet of a window.
pub trait PickerClient: Send + Sync {
    /// 0-based position of the chosen snippet in `window`.
    fn pick(&self, query: &str, window: &[&str]) -> Result<usize, ClientError>;

    fn concurrent_safe(&self) -> bool {
        false
    }
}

impl<F> PickerClient for F
where
    F: Fn(&str, &[&str]) -> Result<usize, ClientError> + Send + Sync,
{
    fn pick(&self, query: &str, window: &[&str]) -> Result<usize, ClientError> {
        self(query, window)
    }
}

/// Deterministic offline picker.
///
/// A snippet scores one point per distinct query subtoken it contains, plus
/// 10 when it holds an identifier that extends the identifier the query ends
/// in (the one being typed). Ties go to the earlier position.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubPicker;

/// The identifier being typed at the end of `text`, if any.
pub fn trailing_partial_identifier(text: &str) -> Option<&str> {
    let start = text
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_alphanumeric() || *c == '_')
        .last()
        .map(|(i, _)| i)?;
    let partial = &text[start..];
    if partial.starts_with(|c: char| c.is_ascii_digit()) {
        None
    } else {
        Some(partial)
    }
}

impl StubPicker {
    pub fn score(query: &str, snippet: &str) -> usize {
        let wanted: HashSet<String> = sparse::tokenize(query).into_iter().collect();
        let have: HashSet<String> = sparse::tokenize(snippet).into_iter().collect();
        let overlap = wanted.intersection(&have).count();
        let extends = trailing_partial_identifier(query).is_some_and(|p| {
            crate::lexer::identifiers(snippet)
                .iter()
                .any(|id| id.len() > p.len() && id.starts_with(p))
        });
        overlap + if extends { 10 } else { 0 }
    }
}

impl PickerClient for StubPicker {
    fn pick(&self, query: &str, window: &[&str]) -> Result<usize, ClientError> {
        let mut best = 0;
        let mut best_score = None;
        for (i, s) in window.iter().enumerate() {
            let score = Self::score(query, s);
            if best_score.map_or(true, |b| score > b) {
                best = i;
                best_score = Some(score);
            }
        }
        Ok(best)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Prompt sent to a language-model picker. `{query}` and `{snippets}` are
/// replaced; snippets are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PickerPrompt {
    pub template: String,
    pub snippet_chars: usize,
}

pub const DEFAULT_PICKER_TEMPLATE: &str = "\
You are given a piece of unfinished code (the query) and several code snippets \
retrieved from the same repository. Pick the most relevant code snippet to the \
query: the one that helps most to complete the code.

Query:
```python
{query}
```

Code snippets:
{snippets}

Answer with exactly one line of the form [C] = <number>, where <number> is the \
number of the chosen snippet.";

impl Default for PickerPrompt {
    fn default() -> Self {
        PickerPrompt { template: DEFAULT_PICKER_TEMPLATE.to_string(), snippet_chars: DEFAULT_SNIPPET_CHARS }
    }
}

/// Keeps the first `max_chars` characters, cutting the tail and marking the
/// cut.
pub fn truncate_snippet(text: &str, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        None => text.to_string(),
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &text[..cut]),
    }
}

impl PickerPrompt {
    pub fn render(&self, query: &str, window: &[&str]) -> String {
        let snippets = window
            .iter()
            .enumerate()
            .map(|(i, s)| format!("[{}]\n```python\n{}\n```", i + 1, truncate_snippet(s, self.snippet_chars)))
            .collect::<Vec<_>>()
            .join("\n\n");
        self.template.replace("{query}", query).replace("{snippets}", &snippets)
    }
}

/// Reads a `[C] = <number>` answer into a 0-based window position. A bare
/// number is accepted too. Several different answers are rejected.
pub fn parse_picker_reply(reply: &str, window_len: usize) -> Result<usize, ClientError> {
    let mut choices: Vec<usize> = Vec::new();
    let mut rest = reply;
    while let Some(at) = rest.find("[C]") {
        rest = &rest[at + 3..];
        let after = rest.trim_start();
        let Some(after) = after.strip_prefix('=').or_else(|| after.strip_prefix(':')) else {
            continue;
        };
        let after = after.trim_start().trim_start_matches('[');
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(n) = digits.parse::<usize>() {
            choices.push(n);
        }
    }
    if choices.is_empty() {
        let bare = reply.trim().trim_matches(|c| c == '[' || c == ']' || c == '.');
        if let Ok(n) = bare.parse::<usize>() {
            choices.push(n);
        }
    }
    choices.dedup();
    match choices.as_slice() {
        [n] if (1..=window_len).contains(n) => Ok(n - 1),
        [n] => Err(ClientError::InvalidReply(format!("choice {n} outside 1..={window_len}"))),
        [] => Err(ClientError::InvalidReply(format!("no selection in {:?}", truncate_snippet(reply, 80)))),
        _ => Err(ClientError::InvalidReply(format!("several selections {choices:?}"))),
    }
}

/// Window `k` covers positions `[k(w-1), k(w-1)+w)`, clipped to `n`.
pub fn make_windows(n: usize, w: usize) -> Vec<std::ops::Range<usize>> {
    assert!(w >= 2, "window size must be at least 2");
    if n == 0 {
        return Vec::new();
    }
    let count = if n <= w { 1 } else { (n - 1).div_ceil(w - 1) };
    (0..count).map(|k| k * (w - 1)..(k * (w - 1) + w).min(n)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub window: Vec<ItemId>,
    pub chosen: ItemId,
    /// The picker failed twice and the first snippet was taken.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankOutcome {
    pub ordered_items: Vec<ItemId>,
    pub picker_calls: usize,
    pub trace: Vec<TraceEntry>,
    /// The picker became unavailable; `ordered_items` is the input order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

/// The tournament tree over `n` items. Level 0 holds the windows; each
/// higher level groups `w` consecutive nodes of the level below.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TournamentShape {
    pub windows: Vec<std::ops::Range<usize>>,
    /// `levels[l][k]` is the range of level-`l - 1` children of node `k`;
    /// `levels[0]` is unused (leaves).
    pub levels: Vec<Vec<std::ops::Range<usize>>>,
}

impl TournamentShape {
    pub fn new(n: usize, w: usize) -> Self {
        let windows = make_windows(n, w);
        let mut levels = vec![Vec::new()];
        let mut width = windows.len();
        while width > 1 {
            let groups: Vec<_> = (0..width.div_ceil(w)).map(|k| k * w..((k + 1) * w).min(width)).collect();
            width = groups.len();
            levels.push(groups);
        }
        TournamentShape { windows, levels }
    }

    pub fn node_count(&self) -> usize {
        self.windows.len() + self.levels.iter().skip(1).map(Vec::len).sum::<usize>()
    }

    /// Nodes `(level, index)` from leaf `k` to the root.
    pub fn path(&self, leaf: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(0, leaf)];
        let mut k = leaf;
        for (l, groups) in self.levels.iter().enumerate().skip(1) {
            k = groups.iter().position(|g| g.contains(&k)).expect("every node has a parent");
            out.push((l, k));
        }
        out
    }

    /// Upper bound on picker calls for extracting `u` items when every call
    /// succeeds first time: one call per node to build, then one per node on
    /// the replayed paths for each extraction but the last.
    pub fn call_bound(&self, u: usize, n: usize) -> usize {
        let extractions = u.min(n);
        if extractions == 0 {
            return 0;
        }
        let leaves = self.windows.len();
        let mut widest = self.path(0).len();
        for k in 0..leaves.saturating_sub(1) {
            let union: BTreeSet<_> = self.path(k).into_iter().chain(self.path(k + 1)).collect();
            widest = widest.max(union.len());
        }
        self.node_count() + (extractions - 1) * widest
    }
}

/// A rerankable snippet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snippet {
    pub id: ItemId,
    pub text: String,
}

struct Tournament<'a> {
    items: &'a [Snippet],
    query: &'a str,
    picker: &'a dyn PickerClient,
    shape: TournamentShape,
    alive: Vec<bool>,
    /// `winners[l][k]`: winning item position of node `(l, k)`.
    winners: Vec<Vec<Option<usize>>>,
    calls: usize,
    trace: Vec<TraceEntry>,
}

struct PickerDown(ClientError);

/// Result of evaluating one node: winner, calls made, trace entry.
type NodeEval = (Option<usize>, usize, Option<TraceEntry>);

fn choose(
    items: &[Snippet],
    query: &str,
    picker: &dyn PickerClient,
    candidates: &[usize],
) -> Result<NodeEval, PickerDown> {
    match candidates {
        [] => return Ok((None, 0, None)),
        [only] => return Ok((Some(*only), 0, None)),
        _ => {}
    }
    let texts: Vec<&str> = candidates.iter().map(|&c| items[c].text.as_str()).collect();
    let mut calls = 0;
    let mut chosen = None;
    for _attempt in 0..2 {
        calls += 1;
        match picker.pick(query, &texts) {
            Ok(i) if i < texts.len() => {
                chosen = Some(i);
                break;
            }
            Ok(i) => log::warn!("picker chose {i} from a window of {}", texts.len()),
            Err(ClientError::InvalidReply(msg)) => log::warn!("picker reply rejected: {msg}"),
            Err(e @ ClientError::Unavailable(_)) => return Err(PickerDown(e)),
        }
    }
    let fallback = chosen.is_none();
    let winner = candidates[chosen.unwrap_or(0)];
    let entry = TraceEntry {
        window: candidates.iter().map(|&c| items[c].id.clone()).collect(),
        chosen: items[winner].id.clone(),
        fallback,
    };
    Ok((Some(winner), calls, Some(entry)))
}

impl<'a> Tournament<'a> {
    fn candidates(&self, level: usize, k: usize) -> Vec<usize> {
        if level == 0 {
            self.shape.windows[k].clone().filter(|&i| self.alive[i]).collect()
        } else {
            let mut out: Vec<usize> = Vec::new();
            for child in self.shape.levels[level][k].clone() {
                if let Some(wn) = self.winners[level - 1][child] {
                    if !out.contains(&wn) {
                        out.push(wn);
                    }
                }
            }
            out
        }
    }

    fn record(&mut self, level: usize, k: usize, eval: NodeEval) {
        let (winner, calls, entry) = eval;
        self.winners[level][k] = winner;
        self.calls += calls;
        self.trace.extend(entry);
    }

    fn build(&mut self) -> Result<(), PickerDown> {
        let leaves = self.shape.windows.len();
        let (items, query, picker) = (self.items, self.query, self.picker);
        let cands: Vec<Vec<usize>> = (0..leaves).map(|k| self.candidates(0, k)).collect();
        let evals: Vec<Result<NodeEval, PickerDown>> = if picker.concurrent_safe() {
            cands.par_iter().map(|c| choose(items, query, picker, c)).collect()
        } else {
            cands.iter().map(|c| choose(items, query, picker, c)).collect()
        };
        for (k, e) in evals.into_iter().enumerate() {
            self.record(0, k, e?);
        }
        for level in 1..self.shape.levels.len() {
            for k in 0..self.shape.levels[level].len() {
                let c = self.candidates(level, k);
                let e = choose(items, query, picker, &c)?;
                self.record(level, k, e);
            }
        }
        Ok(())
    }

    fn root(&self) -> Option<usize> {
        self.winners.last().and_then(|l| l.first().copied().flatten())
    }

    fn remove(&mut self, item: usize) -> Result<(), PickerDown> {
        self.alive[item] = false;
        let mut nodes: BTreeSet<(usize, usize)> = BTreeSet::new();
        for (k, win) in self.shape.windows.iter().enumerate() {
            if win.contains(&item) {
                nodes.extend(self.shape.path(k));
            }
        }
        for (level, k) in nodes {
            let c = self.candidates(level, k);
            let e = choose(self.items, self.query, self.picker, &c)?;
            self.record(level, k, e);
        }
        Ok(())
    }
}

/// Top-`u` items by repeated tournament extraction, best first.
pub fn heap_rerank(items: &[Snippet], query: &str, picker: &dyn PickerClient, u: usize, w: usize) -> RerankOutcome {
    let n = items.len();
    let take = u.min(n);
    if take == 0 {
        return RerankOutcome::default();
    }
    let shape = TournamentShape::new(n, w);
    let winners = std::iter::once(vec![None; shape.windows.len()])
        .chain(shape.levels.iter().skip(1).map(|l| vec![None; l.len()]))
        .collect();
    let mut t = Tournament {
        items,
        query,
        picker,
        shape,
        alive: vec![true; n],
        winners,
        calls: 0,
        trace: Vec::new(),
    };
    let mut ordered = Vec::with_capacity(take);
    let result = (|| -> Result<(), PickerDown> {
        t.build()?;
        while ordered.len() < take {
            let Some(best) = t.root() else { break };
            ordered.push(best);
            if ordered.len() < take {
                t.remove(best)?;
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => RerankOutcome {
            ordered_items: ordered.into_iter().map(|i| items[i].id.clone()).collect(),
            picker_calls: t.calls,
            trace: t.trace,
            degraded: false,
        },
        Err(PickerDown(e)) => {
            log::warn!("reranking degraded to retrieval order: {e}");
            RerankOutcome {
                ordered_items: items[..take].iter().map(|s| s.id.clone()).collect(),
                picker_calls: t.calls,
                trace: t.trace,
                degraded: true,
            }
        }
    }
}

/// Reranks a retrieval list, reading snippet texts from the knowledge base.
pub fn rerank(list: &RetrievalList, kb: &KnowledgeBase, picker: &dyn PickerClient, u: usize, w: usize) -> RerankOutcome {
    let snippets: Vec<Snippet> = list
        .candidates
        .iter()
        .filter_map(|c| kb.get(&c.id))
        .map(|it| Snippet { id: it.id.clone(), text: it.text.clone() })
        .collect();
    heap_rerank(&snippets, &list.query.combined_text, picker, u, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Snippets whose text is their score; the picker takes the largest.
    fn scored(scores: &[u32]) -> Vec<Snippet> {
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| Snippet { id: ItemId(format!("i{i:02}")), text: s.to_string() })
            .collect()
    }

    fn argmax(_q: &str, window: &[&str]) -> Result<usize, ClientError> {
        let vals: Vec<u32> = window.iter().map(|s| s.parse().unwrap()).collect();
        let best = *vals.iter().max().unwrap();
        Ok(vals.iter().position(|&v| v == best).unwrap())
    }

    fn top_by_score(items: &[Snippet], u: usize) -> Vec<ItemId> {
        let mut v: Vec<&Snippet> = items.iter().collect();
        v.sort_by_key(|s| std::cmp::Reverse(s.text.parse::<u32>().unwrap()));
        v.into_iter().take(u).map(|s| s.id.clone()).collect()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(make_windows(31, 3).len(), 15);
        assert_eq!(make_windows(5, 3), vec![0..3, 2..5]);
        assert_eq!(make_windows(2, 3), vec![0..2]);
        assert_eq!(make_windows(6, 3), vec![0..3, 2..5, 4..6]);
        assert!(make_windows(0, 3).is_empty());
    }

    #[test]
    fn thirty_one_items_top_ten() {
        let scores: Vec<u32> = (0..31).map(|i| (i * 17 + 5) % 31).collect();
        let items = scored(&scores);
        let out = heap_rerank(&items, "q", &argmax, 10, 3);
        assert_eq!(out.ordered_items, top_by_score(&items, 10));
        let bound = TournamentShape::new(31, 3).call_bound(10, 31);
        assert!(out.picker_calls <= bound, "{} > {bound}", out.picker_calls);
        assert_eq!(out.trace.len(), out.picker_calls);
    }

    #[test]
    fn single_item_needs_no_call() {
        let items = scored(&[4]);
        let out = heap_rerank(&items, "q", &argmax, 10, 3);
        assert_eq!(out.ordered_items, vec![ItemId::from("i00")]);
        assert_eq!(out.picker_calls, 0);
    }

    #[test]
    fn empty_input_gives_empty_outcome() {
        let out = heap_rerank(&[], "q", &argmax, 10, 3);
        assert_eq!(out, RerankOutcome::default());
    }

    #[test]
    fn bad_replies_retry_then_fall_back() {
        let calls = AtomicUsize::new(0);
        let picker = |_q: &str, _w: &[&str]| -> Result<usize, ClientError> {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ClientError::InvalidReply("gibberish".into()))
        };
        let items = scored(&[1, 2, 3]);
        let out = heap_rerank(&items, "q", &picker, 1, 3);
        assert_eq!(out.ordered_items, vec![ItemId::from("i00")]);
        assert_eq!(out.picker_calls, 2);
        assert!(out.trace[0].fallback);
        assert!(!out.degraded);
    }

    #[test]
    fn out_of_range_choice_counts_as_bad_reply() {
        let picker = |_q: &str, w: &[&str]| -> Result<usize, ClientError> { Ok(w.len()) };
        let out = heap_rerank(&scored(&[1, 2]), "q", &picker, 1, 3);
        assert_eq!(out.picker_calls, 2);
        assert!(out.trace[0].fallback);
    }

    #[test]
    fn unavailable_picker_degrades_to_input_order() {
        let picker = |_q: &str, _w: &[&str]| -> Result<usize, ClientError> {
            Err(ClientError::Unavailable("connection refused".into()))
        };
        let items = scored(&[1, 9, 3, 7]);
        let out = heap_rerank(&items, "q", &picker, 3, 3);
        assert!(out.degraded);
        assert_eq!(out.ordered_items, vec![ItemId::from("i00"), ItemId::from("i01"), ItemId::from("i02")]);
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_picker_reply("[C] = 3", 3).unwrap(), 2);
        assert_eq!(parse_picker_reply("The answer is\n[C]=1.", 2).unwrap(), 0);
        assert_eq!(parse_picker_reply("[C] = [2]", 2).unwrap(), 1);
        assert_eq!(parse_picker_reply(" 2 ", 3).unwrap(), 1);
        assert!(parse_picker_reply("[C] = 4", 3).is_err());
        assert!(parse_picker_reply("[C] = 0", 3).is_err());
        assert!(parse_picker_reply("[C] = 1 or [C] = 2", 3).is_err());
        assert!(parse_picker_reply("snippet two", 3).is_err());
    }

    #[test]
    fn prompt_numbers_and_truncates() {
        let p = PickerPrompt { snippet_chars: 5, ..PickerPrompt::default() };
        let text = p.render("cfg = parse_conf", &["abcdefgh", "xy"]);
        assert!(text.contains("cfg = parse_conf"));
        assert!(text.contains("[1]\n```python\nabcde\n# ... (truncated)\n```"));
        assert!(text.contains("[2]\n```python\nxy\n```"));
        assert!(text.contains("[C] = <number>"));
    }

    #[test]
    fn stub_picker_prefers_completion_source() {
        let window = ["DEFAULT = 1", "def parse_config(path):\n    pass", "def parse(x):\n    pass"];
        assert_eq!(StubPicker.pick("cfg = parse_conf", &window).unwrap(), 1);
        assert_eq!(trailing_partial_identifier("x = foo.ba"), Some("ba"));
        assert_eq!(trailing_partial_identifier("x = 12"), None);
        assert_eq!(trailing_partial_identifier("f(x, "), None);
    }

    proptest! {
        #[test]
        fn windows_overlap_by_one(n in 1usize..60, w in 2usize..6) {
            let ws = make_windows(n, w);
            prop_assert_eq!(ws.first().map(|r| r.start), Some(0));
            prop_assert_eq!(ws.last().map(|r| r.end), Some(n));
            for pair in ws.windows(2) {
                prop_assert_eq!(pair[0].end - 1, pair[1].start);
            }
            for r in &ws[..ws.len() - 1] {
                prop_assert_eq!(r.len(), w);
            }
        }

        #[test]
        fn matches_sorted_order(order in (1usize..41).prop_flat_map(|n| Just((0..n as u32).collect::<Vec<_>>()).prop_shuffle()),
                                u in 1usize..45, w in 2usize..5) {
            let items = scored(&order);
            let out = heap_rerank(&items, "q", &argmax, u, w);
            prop_assert_eq!(&out.ordered_items, &top_by_score(&items, u));
            prop_assert!(out.picker_calls <= TournamentShape::new(items.len(), w).call_bound(u, items.len()));
        }
    }
}
