//! Multi-path retrieval: dataflow, sparse and dense results merged into one
//! candidate list of at most `2j + 1` items.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataflow;
use crate::dense::{DenseError, DenseIndex, EmbedderClient};
use crate::kb::{ItemId, KnowledgeBase};
use crate::query::RetrievalQuery;
use crate::sparse::SparseIndex;

pub const DEFAULT_PER_PATH: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalPath {
    Dataflow,
    Sparse,
    Dense,
}

impl RetrievalPath {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalPath::Dataflow => "dataflow",
            RetrievalPath::Sparse => "sparse",
            RetrievalPath::Dense => "dense",
        }
    }
}

/// The enabled retrieval paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathSet {
    pub sparse: bool,
    pub dense: bool,
    pub dataflow: bool,
}

impl PathSet {
    pub const ALL: PathSet = PathSet { sparse: true, dense: true, dataflow: true };
    pub const NONE: PathSet = PathSet { sparse: false, dense: false, dataflow: false };

    pub fn contains(self, path: RetrievalPath) -> bool {
        match path {
            RetrievalPath::Sparse => self.sparse,
            RetrievalPath::Dense => self.dense,
            RetrievalPath::Dataflow => self.dataflow,
        }
    }

    pub fn is_empty(self) -> bool {
        self == PathSet::NONE
    }
}

impl Default for PathSet {
    fn default() -> Self {
        PathSet::ALL
    }
}

impl fmt::Display for PathSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [RetrievalPath::Sparse, RetrievalPath::Dense, RetrievalPath::Dataflow]
            .into_iter()
            .filter(|p| self.contains(*p))
            .map(RetrievalPath::name)
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown retrieval path {0:?} (expected sparse, dense, dataflow, all or none)")]
pub struct PathSetError(String);

impl FromStr for PathSet {
    type Err = PathSetError;

    /// Comma-separated path names; `all` and `none` are shorthands.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = PathSet::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "sparse" | "s" => set.sparse = true,
                "dense" | "d" => set.dense = true,
                "dataflow" | "df" => set.dataflow = true,
                "all" => set = PathSet::ALL,
                "none" => {}
                _ => return Err(PathSetError(part.to_string())),
            }
        }
        Ok(set)
    }
}

impl Serialize for PathSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PathSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Path scores may be infinite (the dataflow sentinel), which JSON numbers
/// cannot carry; those are written as strings.
mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad score {t:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub id: ItemId,
    pub path: RetrievalPath,
    /// 1-based rank within its path.
    pub path_rank: usize,
    #[serde(with = "score_serde")]
    pub path_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalList {
    pub query: RetrievalQuery,
    pub candidates: Vec<RetrievalCandidate>,
}

impl RetrievalList {
    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.candidates.iter().map(|c| &c.id)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Wall-clock time per path; `None` for disabled paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PathTimings {
    pub sparse: Option<Duration>,
    pub dense: Option<Duration>,
    pub dataflow: Option<Duration>,
}

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("dense retrieval requested but no dense index is loaded")]
    DenseIndexMissing,
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error("per-path result count j must be >= 1")]
    InvalidDepth,
}

/// The indexes a retrieval runs against.
#[derive(Clone, Copy)]
pub struct Indexes<'a> {
    pub kb: &'a KnowledgeBase,
    pub sparse: &'a SparseIndex,
    pub dense: Option<&'a DenseIndex>,
}

/// Concatenates path results in the order dataflow, sparse, dense and drops
/// repeated ids, keeping the first occurrence.
pub fn merge(
    query: RetrievalQuery,
    dataflow: &[(ItemId, f64)],
    sparse: &[(ItemId, f64)],
    dense: &[(ItemId, f64)],
) -> RetrievalList {
    let mut seen = HashSet::new();
    let candidates = [
        (RetrievalPath::Dataflow, dataflow),
        (RetrievalPath::Sparse, sparse),
        (RetrievalPath::Dense, dense),
    ]
    .into_iter()
    .flat_map(|(path, hits)| {
        hits.iter().enumerate().map(move |(r, (id, score))| RetrievalCandidate {
            id: id.clone(),
            path,
            path_rank: r + 1,
            path_score: *score,
        })
    })
    .filter(|c| seen.insert(c.id.clone()))
    .collect();
    RetrievalList { query, candidates }
}

/// Runs the enabled paths. `prefix` is the file text up to the cursor, from
/// which the dataflow graph is built; a prefix with no statements makes the
/// dataflow path contribute nothing.
pub fn retrieve_all(
    query: &RetrievalQuery,
    prefix: &str,
    indexes: Indexes<'_>,
    embedder: &dyn EmbedderClient,
    j: usize,
    paths: PathSet,
) -> Result<(RetrievalList, PathTimings), RetrieveError> {
    if j == 0 {
        return Err(RetrieveError::InvalidDepth);
    }
    let mut timings = PathTimings::default();

    let mut flow = Vec::new();
    if paths.dataflow {
        let t = Instant::now();
        match dataflow::build_dataflow_graph(prefix) {
            Ok(graph) => flow = dataflow::dataflow_retrieve(&graph, indexes.kb),
            Err(e) => log::info!("dataflow path skipped: {e}"),
        }
        timings.dataflow = Some(t.elapsed());
    }

    let mut sparse_hits = Vec::new();
    if paths.sparse {
        let t = Instant::now();
        sparse_hits = indexes.sparse.retrieve(&query.combined_text, j);
        timings.sparse = Some(t.elapsed());
    }

    let mut dense_hits = Vec::new();
    if paths.dense {
        let index = indexes.dense.ok_or(RetrieveError::DenseIndexMissing)?;
        let t = Instant::now();
        dense_hits = index.retrieve(&query.combined_text, embedder, j)?;
        timings.dense = Some(t.elapsed());
    }

    let list = merge(query.clone(), &flow, &sparse_hits, &dense_hits);
    log::debug!(
        "retrieved {} candidates ({} dataflow, {} sparse, {} dense, paths {paths})",
        list.len(),
        flow.len(),
        sparse_hits.len(),
        dense_hits.len()
    );
    Ok((list, timings))
}
