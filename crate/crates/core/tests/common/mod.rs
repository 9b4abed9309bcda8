//! Reference implementations and fixture loaders shared by the integration
//! tests. Everything here is written independently of the library code it
//! checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use coderag::kb::ItemId;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Full `(m+1) x (n+1)` dynamic-programming table.
pub fn levenshtein_table(x: &str, y: &str) -> usize {
    let a: Vec<char> = x.chars().collect();
    let b: Vec<char> = y.chars().collect();
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + cost);
        }
    }
    t[a.len()][b.len()]
}

pub fn random_string(rng: &mut impl Rng, max_len: usize, alphabet: &[char]) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

/// Sort by descending score, ties by ascending id, keep `j`.
pub fn rank(mut scored: Vec<(ItemId, f64)>, j: usize) -> Vec<(ItemId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(j);
    scored
}

/// Brute-force TF-IDF cosine: raw term frequency times `ln(N/df) + 1`,
/// items with no shared term (or zero score) left out.
pub fn tfidf_oracle(docs: &[(ItemId, String)], query: &str, j: usize) -> Vec<(ItemId, f64)> {
    let tf = |text: &str| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for t in coderag::sparse::tokenize(text) {
            *m.entry(t).or_insert(0.0) += 1.0;
        }
        m
    };
    let doc_tf: Vec<BTreeMap<String, f64>> = docs.iter().map(|(_, t)| tf(t)).collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in &doc_tf {
        for term in d.keys() {
            *df.entry(term.as_str()).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let idf = |term: &str| (n / df[term] as f64).ln() + 1.0;
    let q: Vec<(String, f64)> = tf(query)
        .into_iter()
        .filter(|(t, _)| df.contains_key(t.as_str()))
        .map(|(t, c)| {
            let w = c * idf(&t);
            (t, w)
        })
        .collect();
    let qnorm = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if qnorm == 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for ((id, _), d) in docs.iter().zip(&doc_tf) {
        let norm = d.iter().map(|(t, c)| (c * idf(t)).powi(2)).sum::<f64>().sqrt();
        let mut dot = 0.0;
        let mut shared = false;
        for (t, qw) in &q {
            if let Some(c) = d.get(t) {
                shared = true;
                dot += qw * (c * idf(t));
            }
        }
        if !shared || norm == 0.0 {
            continue;
        }
        let score = dot / (qnorm * norm);
        if score > 0.0 {
            out.push((id.clone(), score));
        }
    }
    rank(out, j)
}

/// L2 normalization in f64, stored as f32.
pub fn unit(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
}

/// Brute-force cosine over unit vectors; zero rows never match.
pub fn cosine_oracle(rows: &[(ItemId, Vec<f32>)], query: &[f32], j: usize) -> Vec<(ItemId, f64)> {
    let q = unit(query);
    let scored = rows
        .iter()
        .filter_map(|(id, raw)| {
            let r = unit(raw);
            if r.iter().all(|&x| x == 0.0) {
                return None;
            }
            let s: f64 = q.iter().zip(&r).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            Some((id.clone(), s))
        })
        .collect();
    rank(scored, j)
}

/// Random corpus over a small vocabulary so terms repeat across items.
pub fn random_corpus(rng: &mut impl Rng, max_items: usize) -> Vec<(ItemId, String)> {
    const WORDS: &[&str] = &[
        "parse", "config", "load", "user", "account", "deposit", "token", "normalize", "path", "file",
        "json", "read", "write", "cache", "size", "http", "get", "set", "value", "count",
    ];
    let n = rng.gen_range(1..=max_items);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(0..12);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let a = WORDS.choose(rng).unwrap();
                    match rng.gen_range(0..3) {
                        0 => a.to_string(),
                        1 => format!("{a}_{}", WORDS.choose(rng).unwrap()),
                        _ => {
                            let b = WORDS.choose(rng).unwrap();
                            let mut cap = b.chars();
                            let first = cap.next().unwrap().to_uppercase().collect::<String>();
                            format!("{a}{first}{}", cap.as_str())
                        }
                    }
                })
                .collect();
            (ItemId(format!("f{}.py:{}-{}:Function#0", i % 7, i, i)), words.join(" "))
        })
        .collect()
}

pub fn random_query(rng: &mut impl Rng) -> String {
    random_corpus(rng, 3).into_iter().map(|(_, t)| t).collect::<Vec<_>>().join(" ")
}
