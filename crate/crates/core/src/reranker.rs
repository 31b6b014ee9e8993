//! Pointwise cross-encoder reranker and the recall-then-rerank pipeline.
//!
//! The reranker scores a (query, candidate) pair by encoding their
//! joined sequence (query, separator, candidate) with a bidirectional
//! masked-mean encoder and passing the pooled state through a linear
//! head; σ(logit) is the YES-probability used as the rerank score.

use crate::corpus::{Modality, RetrievalPool, TokenSequence, SEP_TOKEN};
use crate::encoder::{
    pool, AttentionMode, BoundEncoder, Encoder, EncoderConfig, PoolingMode,
};
use crate::error::{Error, Result};
use crate::objectives::{fuse_scores, FusedScoreSet};
use crate::tensor::{NodeId, Parameter, Tape};

pub struct RerankerModel {
    pub encoder: Encoder,
}

/// Default joined-sequence budget: instruction + query + separator +
/// candidate fits comfortably.
pub const RERANKER_MAX_LEN: usize = 96;

impl RerankerModel {
    /// Reranker encoder config derived from a retriever config: same
    /// width/depth, bidirectional attention, masked-mean pooling, longer
    /// max_len for joined sequences.
    pub fn config_from(base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            attention_mode: AttentionMode::Bidirectional,
            pooling_mode: PoolingMode::MaskedMean,
            compression_suffix: false,
            max_len: RERANKER_MAX_LEN,
            ..base.clone()
        }
    }

    /// Fresh reranker. The head starts at zero, so an untrained model
    /// scores every pair exactly 0.5.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<RerankerModel> {
        let mut encoder = Encoder::init(cfg, seed)?;
        let d = encoder.cfg.d_model;
        encoder.params.push(Parameter::new("head.w", vec![d], vec![0.0; d]));
        encoder.params.push(Parameter::new("head.b", vec![1], vec![0.0]));
        Ok(RerankerModel { encoder })
    }

    /// Wrap an existing parameter set (e.g. loaded from a checkpoint).
    pub fn from_encoder(encoder: Encoder) -> Result<RerankerModel> {
        if encoder.params.get("head.w").is_none() || encoder.params.get("head.b").is_none() {
            return Err(Error::contract("reranker: parameter set lacks head.w/head.b"));
        }
        Ok(RerankerModel { encoder })
    }

    /// Differentiable logit for a joined pair on an existing tape.
    pub fn logit_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        query: &TokenSequence,
        candidate: &TokenSequence,
    ) -> Result<NodeId> {
        let joined = join(query, candidate, self.encoder.cfg.max_len)?;
        let (hidden, span, len) = bound.forward_hidden(tape, &joined)?;
        let pooled = pool(tape, hidden, PoolingMode::MaskedMean, span, len)?;
        let w = bound.node("head.w").expect("head.w bound");
        let b = bound.node("head.b").expect("head.b bound");
        let prod = tape.mul(pooled, w)?;
        let s = tape.sum(prod, None)?;
        tape.add(s, b)
    }

    /// YES-probability for one pair; pure given frozen parameters.
    pub fn score(&self, query: &TokenSequence, candidate: &TokenSequence) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = self.encoder.frozen_bind(&mut tape);
        let logit = self.logit_on_tape(&mut tape, &bound, query, candidate)?;
        let p = tape.sigmoid(logit);
        Ok(tape.item(p))
    }
}

/// Query tokens, one separator, candidate tokens; the query's
/// instruction span carries over. Length is always len(q)+1+len(c).
pub fn join(
    query: &TokenSequence,
    candidate: &TokenSequence,
    max_len: usize,
) -> Result<TokenSequence> {
    let total = query.len() + 1 + candidate.len();
    if total > max_len {
        return Err(Error::validation(format!(
            "join: combined length {total} exceeds max_len {max_len}"
        )));
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.extend_from_slice(&query.tokens);
    tokens.push(SEP_TOKEN);
    tokens.extend_from_slice(&candidate.tokens);
    let mut tags = Vec::with_capacity(total);
    tags.extend_from_slice(&query.modality_tags);
    tags.push(Modality::Text);
    tags.extend_from_slice(&candidate.modality_tags);
    Ok(TokenSequence {
        tokens,
        modality_tags: tags,
        instruction_span: query.instruction_span,
        concept_id: query.concept_id,
    })
}

#[derive(Debug, Clone)]
pub struct RerankRequest {
    pub query: TokenSequence,
    /// Retriever's top-m, retriever order preserved.
    pub candidates: Vec<(u32, TokenSequence)>,
    pub top_m: usize,
}

/// Score the request's top-m candidates pointwise; output sorted by
/// YES-probability descending, ties by ascending candidate id.
pub fn rerank(model: &RerankerModel, req: &RerankRequest) -> Result<Vec<(u32, f32)>> {
    if req.top_m > req.candidates.len() {
        return Err(Error::contract(format!(
            "rerank: top_m {} exceeds candidate count {}",
            req.top_m,
            req.candidates.len()
        )));
    }
    use rayon::prelude::*;
    let mut scored: Vec<(u32, f32)> = req.candidates[..req.top_m]
        .par_iter()
        .map(|(id, seq)| model.score(&req.query, seq).map(|s| (*id, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    Ok(scored)
}

/// Instrumented work counters for the pipeline's complexity contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PipelineCost {
    pub similarity_computations: usize,
    pub reranker_forwards: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Full ranking: fused top-m first, retriever-only tail after.
    pub ranking: Vec<(u32, f32)>,
    pub fused: FusedScoreSet,
    pub cost: PipelineCost,
}

/// Recall-then-rerank: the retriever scores the whole pool, the top-m
/// shortlist is reranked, and the two scores fuse per the α rule.
/// Candidates outside the shortlist keep their retriever ranking below
/// every shortlisted entry. `normalize_recall` min-max rescales the
/// shortlist's retriever scores to [0,1] before fusion.
#[allow(clippy::too_many_arguments)]
pub fn recall_then_rerank(
    retriever: &Encoder,
    reranker: &RerankerModel,
    alpha: f32,
    query_id: u32,
    query: &TokenSequence,
    pool: &RetrievalPool,
    top_m: usize,
    normalize_recall: bool,
) -> Result<PipelineOutput> {
    if pool.candidates.is_empty() {
        return Err(Error::contract("recall_then_rerank: empty pool"));
    }
    let m = top_m.min(pool.candidates.len());

    let q = retriever.encode(query)?;
    let seqs: Vec<TokenSequence> = pool.candidates.iter().map(|(_, s)| s.clone()).collect();
    let embs = retriever.encode_batch(&seqs)?;
    let mut recall_scores: Vec<(u32, f32)> = pool
        .candidates
        .iter()
        .zip(&embs)
        .map(|((id, _), e)| {
            let mut acc = 0.0f64;
            for (a, b) in q.values.iter().zip(&e.values) {
                acc += *a as f64 * *b as f64;
            }
            (*id, acc as f32)
        })
        .collect();
    let cost_sims = recall_scores.len();
    recall_scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });

    let shortlist = &recall_scores[..m];
    let req = RerankRequest {
        query: query.clone(),
        candidates: shortlist
            .iter()
            .map(|(id, _)| (*id, pool.get(*id).unwrap().clone()))
            .collect(),
        top_m: m,
    };
    let reranked = rerank(reranker, &req)?;
    let rerank_by_id: std::collections::BTreeMap<u32, f32> = reranked.into_iter().collect();

    let ids: Vec<u32> = shortlist.iter().map(|(id, _)| *id).collect();
    let mut s_recall: Vec<f32> = shortlist.iter().map(|(_, s)| *s).collect();
    if normalize_recall && m > 1 {
        let lo = s_recall.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = s_recall.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in &mut s_recall {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    let s_rerank: Vec<f32> = ids.iter().map(|id| rerank_by_id[id]).collect();
    let fused = fuse_scores(query_id, ids.clone(), s_recall, s_rerank, alpha)?;

    let mut head: Vec<(u32, f32)> = ids
        .iter()
        .zip(&fused.s_multi)
        .map(|(id, s)| (*id, *s))
        .collect();
    head.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    let tail = recall_scores[m..].to_vec();
    let mut ranking = head;
    ranking.extend(tail);

    Ok(PipelineOutput {
        ranking,
        fused,
        cost: PipelineCost { similarity_computations: cost_sims, reranker_forwards: m },
    })
}

/// Fixed-precision per-query report line for bit-stable diffs.
pub fn fused_report_line(f: &FusedScoreSet) -> String {
    let mut s = format!("query {} alpha {:.6}", f.query_id, f.alpha);
    for (i, id) in f.candidate_ids.iter().enumerate() {
        s.push_str(&format!(
            " | {} r {:.6} k {:.6} m {:.6}",
            id, f.s_recall[i], f.s_rerank[i], f.s_multi[i]
        ));
    }
    s
}
