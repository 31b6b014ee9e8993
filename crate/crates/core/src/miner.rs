//! Hard-negative mining: embed queries and candidates with a frozen
//! previous-stage model, rank each query's negatives, drop suspected
//! false negatives above a threshold bound, keep the top-k.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{RetrievalPool, TaskInstance, TokenSequence};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::objectives::RerankLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Absolute,
    RelativeToPositive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub k: usize,
    pub filter_mode: FilterMode,
    /// Absolute cosine bound, or margin below the query's best positive
    /// score, depending on `filter_mode`.
    pub threshold: f32,
}

impl Default for MiningConfig {
    fn default() -> Self {
        // Scale-free default: drop any negative scoring at or above its
        // query's positive.
        MiningConfig { k: 8, filter_mode: FilterMode::RelativeToPositive, threshold: 0.0 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("mining: k must be >= 1"));
        }
        match self.filter_mode {
            FilterMode::Absolute => {
                if !(self.threshold > -1.0 && self.threshold <= 1.0) {
                    return Err(Error::validation(format!(
                        "mining: absolute threshold {} outside (-1, 1]",
                        self.threshold
                    )));
                }
            }
            FilterMode::RelativeToPositive => {
                if self.threshold < 0.0 {
                    return Err(Error::validation(format!(
                        "mining: relative margin {} must be >= 0",
                        self.threshold
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MiningResult {
    /// Index of the query in the task list handed to `mine`.
    pub query_id: u32,
    /// Sorted by score descending, ties by ascending candidate id; ≤ k.
    pub hard_negatives: Vec<(u32, f32)>,
    /// Negatives dropped as suspected false negatives, same ordering.
    pub filtered_out: Vec<(u32, f32)>,
}

/// Apply the filter/top-k rule to one query's scored candidate list.
/// `scores` pairs candidate id with cosine similarity; positives are
/// dropped first, then everything above `bound` moves to filtered_out,
/// then the top-k of the remainder are kept.
pub fn select_hard_negatives(
    query_id: u32,
    scores: &[(u32, f32)],
    positive_ids: &[u32],
    bound: f32,
    k: usize,
) -> MiningResult {
    let mut kept: Vec<(u32, f32)> = Vec::new();
    let mut filtered: Vec<(u32, f32)> = Vec::new();
    for &(id, s) in scores {
        if positive_ids.contains(&id) {
            continue;
        }
        if s > bound {
            filtered.push((id, s));
        } else {
            kept.push((id, s));
        }
    }
    let by_rank = |a: &(u32, f32), b: &(u32, f32)| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    };
    kept.sort_by(by_rank);
    filtered.sort_by(by_rank);
    kept.truncate(k);
    MiningResult { query_id, hard_negatives: kept, filtered_out: filtered }
}

/// Mine hard negatives for every task against `pool` using the frozen
/// `model`. Deterministic; parallel over queries with results emitted in
/// query order.
pub fn mine(
    model: &Encoder,
    tasks: &[TaskInstance],
    pool: &RetrievalPool,
    cfg: &MiningConfig,
) -> Result<Vec<MiningResult>> {
    cfg.validate()?;
    if pool.candidates.is_empty() {
        return Err(Error::contract("mine: empty candidate pool"));
    }
    for (qi, t) in tasks.iter().enumerate() {
        for pid in &t.positive_ids {
            if pool.get(*pid).is_none() {
                return Err(Error::contract(format!(
                    "mine: query {qi} positive {pid} missing from pool {}",
                    pool.pool_id
                )));
            }
        }
    }

    let cand_seqs: Vec<TokenSequence> =
        pool.candidates.iter().map(|(_, s)| s.clone()).collect();
    let cand_embs = model.encode_batch(&cand_seqs)?;
    let queries: Vec<TokenSequence> = tasks.iter().map(|t| t.query.clone()).collect();
    let query_embs = model.encode_batch(&queries)?;

    use rayon::prelude::*;
    let results: Vec<MiningResult> = tasks
        .par_iter()
        .enumerate()
        .map(|(qi, t)| {
            let q = &query_embs[qi].values;
            let scores: Vec<(u32, f32)> = pool
                .candidates
                .iter()
                .zip(&cand_embs)
                .map(|((id, _), e)| (*id, dot(q, &e.values)))
                .collect();
            let bound = match cfg.filter_mode {
                FilterMode::Absolute => cfg.threshold,
                FilterMode::RelativeToPositive => {
                    let best_pos = scores
                        .iter()
                        .filter(|(id, _)| t.positive_ids.contains(id))
                        .map(|(_, s)| *s)
                        .fold(f32::NEG_INFINITY, f32::max);
                    best_pos - cfg.threshold
                }
            };
            select_hard_negatives(qi as u32, &scores, &t.positive_ids, bound, cfg.k)
        })
        .collect();
    Ok(results)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

/// One reranker training example: the query joined with a candidate and
/// a YES/NO relevance label.
#[derive(Debug, Clone)]
pub struct RerankExample {
    pub query: TokenSequence,
    pub candidate: TokenSequence,
    pub candidate_id: u32,
    pub label: RerankLabel,
}

/// Per query: one YES positive pair (lowest positive id, for
/// determinism) plus up to `n_negatives` NO pairs from the top of the
/// mined hard negatives.
pub fn build_reranker_training_set(
    tasks: &[TaskInstance],
    pool: &RetrievalPool,
    mining: &[MiningResult],
    n_negatives: usize,
) -> Result<Vec<RerankExample>> {
    let mut out = Vec::new();
    for m in mining {
        let t = tasks.get(m.query_id as usize).ok_or_else(|| {
            Error::contract(format!("reranker set: query id {} out of range", m.query_id))
        })?;
        let pos_id = *t
            .positive_ids
            .iter()
            .min()
            .ok_or_else(|| Error::contract("reranker set: query without positives"))?;
        let pos_seq = pool
            .get(pos_id)
            .ok_or_else(|| Error::contract(format!("reranker set: positive {pos_id} not in pool")))?;
        out.push(RerankExample {
            query: t.query.clone(),
            candidate: pos_seq.clone(),
            candidate_id: pos_id,
            label: RerankLabel::Yes,
        });
        for &(nid, _) in m.hard_negatives.iter().take(n_negatives) {
            let seq = pool.get(nid).ok_or_else(|| {
                Error::contract(format!("reranker set: negative {nid} not in pool"))
            })?;
            out.push(RerankExample {
                query: t.query.clone(),
                candidate: seq.clone(),
                candidate_id: nid,
                label: RerankLabel::No,
            });
        }
    }
    Ok(out)
}

/// Mine every task in the corpus against its own local pool. Query ids
/// in the result are indices into `corpus.tasks`.
pub fn mine_corpus(
    model: &Encoder,
    corpus: &crate::corpus::Corpus,
    cfg: &MiningConfig,
) -> Result<Vec<MiningResult>> {
    let mut out = Vec::new();
    for pool in &corpus.pools {
        let scoped: Vec<(usize, TaskInstance)> = corpus
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.pool_id == pool.pool_id)
            .map(|(i, t)| (i, t.clone()))
            .collect();
        let tasks: Vec<TaskInstance> = scoped.iter().map(|(_, t)| t.clone()).collect();
        let mut mined = mine(model, &tasks, pool, cfg)?;
        for m in &mut mined {
            m.query_id = scoped[m.query_id as usize].0 as u32;
        }
        out.extend(mined);
    }
    out.sort_by_key(|m| m.query_id);
    Ok(out)
}

/// Corpus-wide reranker training set; mining query ids are indices into
/// `corpus.tasks` (as produced by `mine_corpus`).
pub fn build_reranker_training_set_corpus(
    corpus: &crate::corpus::Corpus,
    mining: &[MiningResult],
    n_negatives: usize,
) -> Result<Vec<RerankExample>> {
    let mut out = Vec::new();
    for m in mining {
        let t = corpus.tasks.get(m.query_id as usize).ok_or_else(|| {
            Error::contract(format!("reranker set: query id {} out of range", m.query_id))
        })?;
        let pool = corpus
            .pool(&t.pool_id)
            .ok_or_else(|| Error::contract(format!("reranker set: missing pool {}", t.pool_id)))?;
        let one = build_reranker_training_set(
            std::slice::from_ref(t),
            pool,
            &[MiningResult { query_id: 0, ..m.clone() }],
            n_negatives,
        )?;
        out.extend(one);
    }
    Ok(out)
}

pub fn save_mining(path: &Path, results: &[MiningResult]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::validation(format!("serialize mining result: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mining(path: &Path) -> Result<Vec<MiningResult>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
