//! TF-IDF keyword index over knowledge items.
//!
//! Weights are raw term frequency times `ln(N / df) + 1`; similarity is the
//! cosine of the query and item weight vectors. Query terms missing from the
//! vocabulary are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ItemId, KnowledgeBase};
use crate::rank::{top_k, Scored};

pub const SPARSE_FILE: &str = "sparse.idx";
const FORMAT: &str = "coderag-sparse";
const VERSION: u32 = 1;

/// Identifier-aware tokenizer: splits on non-alphanumerics (so `snake_case`
/// splits on `_`), then on lower→upper and acronym→word camel-case
/// boundaries, and lowercases every piece.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_uppercase() && cur.is_uppercase() && next_lower);
            if boundary {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    out
}

/// Raw term counts keyed by term, in term order.
fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

pub fn idf(n_items: usize, df: usize) -> f64 {
    (n_items as f64 / df as f64).ln() + 1.0
}

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sparse index: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    /// term → term id; ids follow lexicographic term order.
    vocabulary: BTreeMap<String, u32>,
    idf: Vec<f64>,
    /// term id → (item ordinal, tf), item ordinals ascending.
    postings: Vec<Vec<(u32, u32)>>,
    item_ids: Vec<ItemId>,
    item_norms: Vec<f64>,
}

/// On-disk form: counts only; weights and norms are recomputed on load.
#[derive(Serialize, Deserialize)]
struct Persisted {
    format: String,
    version: u32,
    items: Vec<ItemId>,
    terms: Vec<String>,
    postings: Vec<Vec<(u32, u32)>>,
}

impl SparseIndex {
    pub fn build(kb: &KnowledgeBase) -> SparseIndex {
        Self::from_documents(kb.items.iter().map(|it| (it.id.clone(), it.text.as_str())))
    }

    /// Indexes arbitrary `(id, text)` documents.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = (ItemId, &'a str)>) -> SparseIndex {
        let mut item_ids = Vec::new();
        let mut per_term: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (ordinal, (id, text)) in docs.into_iter().enumerate() {
            item_ids.push(id);
            for (term, tf) in term_counts(text) {
                per_term.entry(term).or_default().push((ordinal as u32, tf));
            }
        }
        let (terms, postings): (Vec<String>, Vec<Vec<(u32, u32)>>) = per_term.into_iter().unzip();
        Self::assemble(item_ids, terms, postings)
    }

    fn assemble(item_ids: Vec<ItemId>, terms: Vec<String>, postings: Vec<Vec<(u32, u32)>>) -> SparseIndex {
        let n = item_ids.len();
        let vocabulary = terms.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        let idf: Vec<f64> = postings.iter().map(|p| idf(n, p.len())).collect();
        // Accumulate squared weights per item in term-id order.
        let mut sq = vec![0.0f64; n];
        for (term, plist) in postings.iter().enumerate() {
            for &(item, tf) in plist {
                let w = f64::from(tf) * idf[term];
                sq[item as usize] += w * w;
            }
        }
        let item_norms = sq.into_iter().map(f64::sqrt).collect();
        SparseIndex { vocabulary, idf, postings, item_ids, item_norms }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, u32> {
        &self.vocabulary
    }

    pub fn document_frequency(&self, term: &str) -> Option<usize> {
        self.vocabulary.get(term).map(|&t| self.postings[t as usize].len())
    }

    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&t| self.idf[t as usize])
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.item_ids
    }

    pub fn item_norms(&self) -> &[f64] {
        &self.item_norms
    }

    /// Cosine-ranked items sharing at least one term with the query, at most
    /// `j` of them. Ties break by ascending item id.
    pub fn retrieve(&self, query_text: &str, j: usize) -> Vec<(ItemId, f64)> {
        let mut query: Vec<(u32, f64)> = term_counts(query_text)
            .into_iter()
            .filter_map(|(term, tf)| {
                self.vocabulary
                    .get(&term)
                    .map(|&t| (t, f64::from(tf) * self.idf[t as usize]))
            })
            .collect();
        query.sort_by_key(|&(t, _)| t);
        let qnorm = query.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt();
        if qnorm == 0.0 {
            return Vec::new();
        }
        let mut dots = vec![0.0f64; self.item_ids.len()];
        let mut seen = vec![false; self.item_ids.len()];
        let mut touched = Vec::new();
        for &(term, qw) in &query {
            let idf = self.idf[term as usize];
            for &(item, tf) in &self.postings[term as usize] {
                let i = item as usize;
                if !seen[i] {
                    seen[i] = true;
                    touched.push(i);
                }
                dots[i] += qw * (f64::from(tf) * idf);
            }
        }
        let scored = touched.into_iter().filter_map(|i| {
            let norm = self.item_norms[i];
            let score = dots[i] / (qnorm * norm);
            (norm > 0.0 && score > 0.0).then(|| Scored { id: self.item_ids[i].clone(), score })
        });
        top_k(scored, j)
    }

    pub fn to_json(&self) -> String {
        let mut terms: Vec<(&String, &u32)> = self.vocabulary.iter().collect();
        terms.sort_by_key(|(_, &id)| id);
        let persisted = Persisted {
            format: FORMAT.to_string(),
            version: VERSION,
            items: self.item_ids.clone(),
            terms: terms.into_iter().map(|(t, _)| t.clone()).collect(),
            postings: self.postings.clone(),
        };
        serde_json::to_string(&persisted).expect("sparse index serializes")
    }

    /// Decodes an untrusted `sparse.idx`.
    pub fn from_json(text: &str) -> Result<SparseIndex, SparseError> {
        let p: Persisted =
            serde_json::from_str(text).map_err(|e| SparseError::Format(e.to_string()))?;
        if p.format != FORMAT || p.version != VERSION {
            return Err(SparseError::Format(format!("unsupported format {} v{}", p.format, p.version)));
        }
        if p.terms.len() != p.postings.len() {
            return Err(SparseError::Format("terms and postings differ in length".into()));
        }
        if p.terms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SparseError::Format("terms are not strictly sorted".into()));
        }
        let n = p.items.len();
        for plist in &p.postings {
            if plist.is_empty() {
                return Err(SparseError::Format("term with empty posting list".into()));
            }
            if plist.iter().any(|&(item, tf)| item as usize >= n || tf == 0)
                || plist.windows(2).any(|w| w[0].0 >= w[1].0)
            {
                return Err(SparseError::Format("invalid posting".into()));
            }
        }
        Ok(Self::assemble(p.items, p.terms, p.postings))
    }

    pub fn save(&self, dir: &Path) -> Result<(), SparseError> {
        let path = dir.join(SPARSE_FILE);
        fs::write(&path, self.to_json()).map_err(|source| SparseError::Io { path, source })
    }

    pub fn load(dir: &Path) -> Result<SparseIndex, SparseError> {
        let path = dir.join(SPARSE_FILE);
        let text = fs::read_to_string(&path).map_err(|source| SparseError::Io { path, source })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(docs: &[&str]) -> SparseIndex {
        SparseIndex::from_documents(
            docs.iter().enumerate().map(|(i, d)| (ItemId(format!("{i}")), *d)),
        )
    }

    #[test]
    fn tokenizer_splits_identifiers() {
        assert_eq!(tokenize("parse_config(path)"), vec!["parse", "config", "path"]);
        assert_eq!(tokenize("HTTPServer.getValue"), vec!["http", "server", "get", "value"]);
        assert_eq!(tokenize("a b"), vec!["a", "b"]);
        assert_eq!(tokenize("utf8 v2"), vec!["utf8", "v2"]);
        assert!(tokenize("  ( ) ").is_empty());
    }

    #[test]
    fn document_frequencies() {
        let idx = index(&["a b", "b c"]);
        assert_eq!(idx.document_frequency("a"), Some(1));
        assert_eq!(idx.document_frequency("b"), Some(2));
        assert_eq!(idx.document_frequency("c"), Some(1));
        assert_eq!(idx.idf_of("b"), Some(1.0));
        assert_eq!(idx.idf_of("a"), Some(2f64.ln() + 1.0));
    }

    #[test]
    fn single_item_idf_is_one() {
        let idx = index(&["x y y"]);
        assert_eq!(idx.idf_of("x"), Some(1.0));
        assert_eq!(idx.idf_of("y"), Some(1.0));
    }

    #[test]
    fn empty_item_is_never_retrieved() {
        let idx = index(&["", "a"]);
        assert_eq!(idx.item_norms()[0], 0.0);
        let hits = idx.retrieve("a", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.as_str(), "1");
    }

    #[test]
    fn hand_computed_cosine() {
        // Query "a": only item 0 contains it; cosine = w_a / |(w_a, w_b)|.
        let idx = index(&["a b", "b c"]);
        let hits = idx.retrieve("a", 2);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.as_str(), "0");
        let wa = 2f64.ln() + 1.0;
        let expected = wa / (wa * wa + 1.0).sqrt();
        assert!((hits[0].1 - expected).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_empty_and_identity_scores_one() {
        let idx = index(&["alpha beta", "gamma"]);
        assert!(idx.retrieve("zeta", 3).is_empty());
        let hits = idx.retrieve("alpha beta", 3);
        assert_eq!(hits[0].0.as_str(), "0");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn persisted_form_round_trips() {
        let idx = index(&["def parse_config(path): pass", "x = 1", "", "class A: pass"]);
        let back = SparseIndex::from_json(&idx.to_json()).unwrap();
        assert_eq!(back, idx);
        assert!(SparseIndex::from_json("{}").is_err());
        assert!(SparseIndex::from_json(
            r#"{"format":"coderag-sparse","version":1,"items":["a"],"terms":["x"],"postings":[[[3,1]]]}"#
        )
        .is_err());
    }
}
