//! Consistency-filtered training data for a small picker.
//!
//! For each query and each subset size `i`, three random subsets of the
//! candidate list are drawn and shown to the picker five times. A subset
//! becomes a training sample only when one snippet wins at least four of the
//! five votes.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::ItemId;
use crate::rerank::{PickerClient, Snippet};
use crate::wire::ClientError;

pub const DEFAULT_SIZES: [usize; 6] = [2, 3, 4, 5, 6, 7];
pub const SUBSETS_PER_SIZE: usize = 3;
pub const VOTES: usize = 5;
pub const CONSENSUS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSnippet {
    pub id: ItemId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationSample {
    pub query: String,
    pub snippets: Vec<SampleSnippet>,
    pub chosen_id: ItemId,
    /// The id chosen by each vote; `None` where the picker gave no usable
    /// answer.
    pub votes: Vec<Option<ItemId>>,
}

impl DistillationSample {
    /// Re-checks the consensus rule against the stored votes.
    pub fn verify(&self) -> bool {
        let agree = self.votes.iter().filter(|v| v.as_ref() == Some(&self.chosen_id)).count();
        self.votes.len() == VOTES && agree >= CONSENSUS && self.snippets.iter().any(|s| s.id == self.chosen_id)
    }
}

/// One query with its candidates, in retrieval order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillInput {
    pub query: String,
    pub candidates: Vec<Snippet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistillConfig {
    pub seed: u64,
    /// Reorder the subset before every vote.
    pub shuffle_votes: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistillReport {
    pub samples: Vec<DistillationSample>,
    /// `(query ordinal, subset size)` for each draw skipped because the list
    /// was too short.
    pub skipped: Vec<(usize, usize)>,
    /// Subsets drawn and voted on.
    pub subsets: usize,
}

#[derive(Debug, Error)]
#[error("picker unavailable at query {query}: {source}")]
pub struct DistillError {
    pub query: usize,
    #[source]
    pub source: ClientError,
    /// Everything produced before the failure.
    pub partial: DistillReport,
}

fn vote(
    picker: &dyn PickerClient,
    query: &str,
    subset: &[&Snippet],
    rng: &mut ChaCha8Rng,
    shuffle: bool,
) -> Result<Option<ItemId>, ClientError> {
    let mut order: Vec<usize> = (0..subset.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let texts: Vec<&str> = order.iter().map(|&k| subset[k].text.as_str()).collect();
    for _attempt in 0..2 {
        match picker.pick(query, &texts) {
            Ok(p) if p < texts.len() => return Ok(Some(subset[order[p]].id.clone())),
            Ok(p) => log::warn!("picker chose {p} from {} snippets", texts.len()),
            Err(ClientError::InvalidReply(msg)) => log::warn!("picker reply rejected: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn consensus(votes: &[Option<ItemId>]) -> Option<ItemId> {
    votes.iter().flatten().find(|cand| votes.iter().filter(|v| v.as_ref() == Some(*cand)).count() >= CONSENSUS).cloned()
}

fn distill_one(
    ordinal: usize,
    input: &DistillInput,
    picker: &dyn PickerClient,
    sizes: &[usize],
    config: DistillConfig,
) -> Result<DistillReport, (DistillReport, ClientError)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(ordinal as u64);
    let mut report = DistillReport::default();
    for &size in sizes {
        for _ in 0..SUBSETS_PER_SIZE {
            if size == 0 || input.candidates.len() < size {
                log::info!("query {ordinal}: list of {} too short for size {size}", input.candidates.len());
                report.skipped.push((ordinal, size));
                continue;
            }
            let subset: Vec<&Snippet> = index::sample(&mut rng, input.candidates.len(), size)
                .into_iter()
                .map(|k| &input.candidates[k])
                .collect();
            report.subsets += 1;
            let mut votes = Vec::with_capacity(VOTES);
            for _ in 0..VOTES {
                match vote(picker, &input.query, &subset, &mut rng, config.shuffle_votes) {
                    Ok(v) => votes.push(v),
                    Err(e) => return Err((report, e)),
                }
            }
            if let Some(chosen_id) = consensus(&votes) {
                report.samples.push(DistillationSample {
                    query: input.query.clone(),
                    snippets: subset
                        .iter()
                        .map(|s| SampleSnippet { id: s.id.clone(), text: s.text.clone() })
                        .collect(),
                    chosen_id,
                    votes,
                });
            }
        }
    }
    Ok(report)
}

/// Draws subsets for every input and keeps those the picker agrees on.
/// Output order follows input order, and a fixed seed gives identical output
/// whatever the thread count.
pub fn build_distillation_data(
    inputs: &[DistillInput],
    picker: &dyn PickerClient,
    sizes: &[usize],
    config: DistillConfig,
) -> Result<DistillReport, DistillError> {
    let run = |(k, input): (usize, &DistillInput)| distill_one(k, input, picker, sizes, config);
    let results: Vec<_> = if picker.concurrent_safe() {
        inputs.par_iter().enumerate().map(run).collect()
    } else {
        inputs.iter().enumerate().map(run).collect()
    };
    let mut total = DistillReport::default();
    for (k, r) in results.into_iter().enumerate() {
        let (part, err) = match r {
            Ok(part) => (part, None),
            Err((part, e)) => (part, Some(e)),
        };
        total.samples.extend(part.samples);
        total.skipped.extend(part.skipped);
        total.subsets += part.subsets;
        if let Some(source) = err {
            return Err(DistillError { query: k, source, partial: total });
        }
    }
    Ok(total)
}

pub fn write_jsonl(samples: &[DistillationSample], out: &mut dyn Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Probability that some snippet wins at least `CONSENSUS` of `VOTES` votes
/// when every vote is uniform over `k` snippets.
pub fn uniform_consensus_probability(k: usize) -> f64 {
    let k = k as f64;
    let binom = |n: u64, r: u64| -> f64 { (1..=r).map(|i| (n - r + i) as f64 / i as f64).product() };
    let p = 1.0 / k;
    let single: f64 = (CONSENSUS..=VOTES)
        .map(|r| binom(VOTES as u64, r as u64) * p.powi(r as i32) * (1.0 - p).powi((VOTES - r) as i32))
        .sum();
    // two different snippets cannot both reach a 4-of-5 majority
    k * single
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerank::StubPicker;
    use std::sync::Mutex;

    fn input(n: usize) -> DistillInput {
        DistillInput {
            query: "q".into(),
            candidates: (0..n)
                .map(|i| Snippet { id: ItemId(format!("c{i}")), text: format!("{}", (i * 7) % 11) })
                .collect(),
        }
    }

    fn argmax(_q: &str, w: &[&str]) -> Result<usize, ClientError> {
        let v: Vec<u32> = w.iter().map(|s| s.parse().unwrap()).collect();
        let best = *v.iter().max().unwrap();
        Ok(v.iter().position(|&x| x == best).unwrap())
    }

    const CFG: DistillConfig = DistillConfig { seed: 7, shuffle_votes: false };

    #[test]
    fn deterministic_picker_always_agrees() {
        let inputs = vec![input(9), input(7), input(4)];
        let r = build_distillation_data(&inputs, &argmax, &DEFAULT_SIZES, CFG).unwrap();
        // the 4-item list cannot supply sizes 5, 6, 7
        assert_eq!(r.skipped.len(), 9);
        assert_eq!(r.samples.len(), 3 * 6 * 3 - 9);
        assert!(r.samples.iter().all(DistillationSample::verify));
    }

    #[test]
    fn same_seed_same_bytes() {
        let inputs = vec![input(8), input(12)];
        let cfg = DistillConfig { shuffle_votes: true, ..CFG };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_jsonl(&build_distillation_data(&inputs, &StubPicker, &DEFAULT_SIZES, cfg).unwrap().samples, &mut a).unwrap();
        write_jsonl(&build_distillation_data(&inputs, &StubPicker, &DEFAULT_SIZES, cfg).unwrap().samples, &mut b).unwrap();
        assert_eq!(a, b);
        let other = DistillConfig { seed: 8, ..cfg };
        let mut c = Vec::new();
        write_jsonl(&build_distillation_data(&inputs, &StubPicker, &DEFAULT_SIZES, other).unwrap().samples, &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn subsets_have_distinct_members() {
        let r = build_distillation_data(&[input(10)], &argmax, &DEFAULT_SIZES, CFG).unwrap();
        for s in &r.samples {
            let mut ids: Vec<_> = s.snippets.iter().map(|x| &x.id).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), s.snippets.len());
        }
    }

    #[test]
    fn unavailable_picker_keeps_partial_output() {
        let calls = Mutex::new(0);
        let picker = |q: &str, w: &[&str]| -> Result<usize, ClientError> {
            let mut c = calls.lock().unwrap();
            *c += 1;
            if *c > 20 {
                Err(ClientError::Unavailable("gone".into()))
            } else {
                argmax(q, w)
            }
        };
        let err = build_distillation_data(&[input(9)], &picker, &DEFAULT_SIZES, CFG).unwrap_err();
        assert_eq!(err.partial.samples.len(), 4);
    }

    #[test]
    fn split_votes_emit_nothing() {
        let turn = Mutex::new(0usize);
        let picker = |_q: &str, w: &[&str]| -> Result<usize, ClientError> {
            let mut t = turn.lock().unwrap();
            *t += 1;
            Ok(*t % 2 % w.len())
        };
        let r = build_distillation_data(&[input(5)], &picker, &[2], CFG).unwrap();
        assert_eq!(r.subsets, 3);
        assert!(r.samples.is_empty());
    }

    #[test]
    fn consensus_probability_by_enumeration() {
        // all 5^5 vote sequences over 5 snippets
        let mut hits = 0u32;
        for code in 0..5u32.pow(5) {
            let mut counts = [0u8; 5];
            let mut c = code;
            for _ in 0..5 {
                counts[(c % 5) as usize] += 1;
                c /= 5;
            }
            if counts.iter().any(|&n| n >= 4) {
                hits += 1;
            }
        }
        assert_eq!(hits, 105);
        assert!((uniform_consensus_probability(5) - 105.0 / 3125.0).abs() < 1e-12);
    }
}
