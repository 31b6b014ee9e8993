//! Training objectives: InfoNCE with fixed or learnable temperature,
//! pointwise rerank NLL, teacher→student distillation KL, and the linear
//! score-fusion rule that combines retriever and reranker scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Parameter, Tape};

pub const TAU_MIN: f32 = 1e-3;
pub const TAU_MAX: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempMode {
    Fixed,
    Learnable,
}

/// Softmax temperature, stored as a log-parameter so τ stays positive by
/// construction; clamped to [1e-3, 1.0] after every optimizer step.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub mode: TempMode,
    pub log_param: Parameter,
}

impl Temperature {
    pub fn new(mode: TempMode, initial: f32) -> Result<Temperature> {
        if !(initial > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        let v = initial.clamp(TAU_MIN, TAU_MAX);
        let mut p = Parameter::new("log_tau", vec![1], vec![v.ln()]);
        p.trainable = mode == TempMode::Learnable;
        Ok(Temperature { mode, log_param: p })
    }

    pub fn fixed(value: f32) -> Result<Temperature> {
        Temperature::new(TempMode::Fixed, value)
    }

    pub fn tau(&self) -> f32 {
        self.log_param.data[0].exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Re-apply the clamp after an optimizer step touched the log-param.
    pub fn project(&mut self) {
        let lo = TAU_MIN.ln();
        let hi = TAU_MAX.ln();
        self.log_param.data[0] = self.log_param.data[0].clamp(lo, hi);
    }

    /// Scalar node carrying 1/τ; differentiable when learnable.
    pub fn bind_inv_tau(&self, tape: &mut Tape) -> NodeId {
        self.bind(tape).inv_tau
    }

    /// Bind returning both the log-τ leaf (for gradient read-back) and
    /// the derived 1/τ node.
    pub fn bind(&self, tape: &mut Tape) -> BoundTemp {
        let param = tape.param(&self.log_param);
        let neg = tape.neg(param);
        let inv_tau = tape.exp(neg);
        BoundTemp { param, inv_tau }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundTemp {
    pub param: NodeId,
    pub inv_tau: NodeId,
}

/// Query×candidate cosine similarities living on a tape, with each row's
/// paired-positive column.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub node: NodeId,
    pub positive_index: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(tape: &Tape, node: NodeId, positive_index: Vec<usize>) -> Result<Self> {
        let (r, c) = match tape.shape(node) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::contract(format!(
                    "similarity matrix must be rank-2, got {s:?}"
                )))
            }
        };
        if positive_index.len() != r {
            return Err(Error::contract(format!(
                "similarity matrix: {} positive indices for {r} rows",
                positive_index.len()
            )));
        }
        if let Some(&bad) = positive_index.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!(
                "similarity matrix: positive index {bad} out of {c} columns"
            )));
        }
        Ok(SimilarityMatrix { node, positive_index })
    }

    /// Check the cosine-similarity bound ±1 + 1e-5 on current values.
    pub fn validate_cosine_bounds(&self, tape: &Tape) -> Result<()> {
        for &v in tape.value(self.node) {
            if !(v.abs() <= 1.0 + 1e-5) {
                return Err(Error::Numeric(format!("similarity {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uni,
    Bi,
}

/// InfoNCE over in-batch negatives. `bi` averages the query→candidate
/// and candidate→query directions (requires positive_index to be a
/// permutation, e.g. the identity for aligned batches).
pub fn info_nce(
    tape: &mut Tape,
    sim: &SimilarityMatrix,
    temp: &Temperature,
    direction: Direction,
) -> Result<NodeId> {
    let inv_tau = temp.bind_inv_tau(tape);
    info_nce_with(tape, sim, inv_tau, direction)
}

/// `info_nce` against a pre-bound 1/τ node, so callers can keep the
/// temperature leaf for gradient read-back.
pub fn info_nce_with(
    tape: &mut Tape,
    sim: &SimilarityMatrix,
    inv_tau: NodeId,
    direction: Direction,
) -> Result<NodeId> {
    let (r, c) = {
        let s = tape.shape(sim.node);
        (s[0], s[1])
    };
    if r == 0 || c == 0 {
        return Err(Error::contract("info_nce: empty similarity matrix"));
    }
    let scaled = tape.mul(sim.node, inv_tau)?;
    let fwd = tape.cross_entropy_rows(scaled, &sim.positive_index)?;
    match direction {
        Direction::Uni => Ok(fwd),
        Direction::Bi => {
            if r != c {
                return Err(Error::contract(format!(
                    "info_nce bi: matrix must be square, got {r}x{c}"
                )));
            }
            // invert the row→positive-column map
            let mut col_target = vec![usize::MAX; c];
            for (row, &col) in sim.positive_index.iter().enumerate() {
                if col_target[col] != usize::MAX {
                    return Err(Error::contract(
                        "info_nce bi: positive_index is not a permutation",
                    ));
                }
                col_target[col] = row;
            }
            let t = tape.transpose(scaled)?;
            let bwd = tape.cross_entropy_rows(t, &col_target)?;
            let s = tape.add(fwd, bwd)?;
            Ok(tape.scale(s, 0.5))
        }
    }
}

/// Per-query mined hard negatives accompanying an in-batch similarity row.
#[derive(Debug, Clone)]
pub struct HardNegRow {
    pub candidate_ids: Vec<u32>,
    /// [1, n] similarity node; `None` iff `candidate_ids` is empty.
    pub sims: Option<NodeId>,
}

impl HardNegRow {
    pub fn empty() -> Self {
        HardNegRow { candidate_ids: Vec::new(), sims: None }
    }
}

/// InfoNCE whose per-row denominator additionally covers that row's
/// mined hard negatives. With all-empty hard sets this is exactly
/// `info_nce` (uni direction).
pub fn info_nce_with_hard_negs(
    tape: &mut Tape,
    sim: &SimilarityMatrix,
    hard: &[HardNegRow],
    positive_ids: &[u32],
    temp: &Temperature,
) -> Result<NodeId> {
    let inv_tau = temp.bind_inv_tau(tape);
    info_nce_with_hard_negs_bound(tape, sim, hard, positive_ids, inv_tau)
}

/// `info_nce_with_hard_negs` against a pre-bound 1/τ node.
pub fn info_nce_with_hard_negs_bound(
    tape: &mut Tape,
    sim: &SimilarityMatrix,
    hard: &[HardNegRow],
    positive_ids: &[u32],
    inv_tau: NodeId,
) -> Result<NodeId> {
    let r = tape.shape(sim.node)[0];
    if hard.len() != r || positive_ids.len() != r {
        return Err(Error::contract(format!(
            "info_nce_with_hard_negs: {} hard rows / {} positive ids for {r} queries",
            hard.len(),
            positive_ids.len()
        )));
    }
    for (i, h) in hard.iter().enumerate() {
        if h.candidate_ids.contains(&positive_ids[i]) {
            return Err(Error::contract(format!(
                "info_nce_with_hard_negs: row {i} lists its positive {} as a hard negative",
                positive_ids[i]
            )));
        }
        match &h.sims {
            Some(n) => {
                let s = tape.shape(*n);
                if s != [1, h.candidate_ids.len()] {
                    return Err(Error::contract(format!(
                        "info_nce_with_hard_negs: row {i} sims shape {s:?} for {} ids",
                        h.candidate_ids.len()
                    )));
                }
            }
            None => {
                if !h.candidate_ids.is_empty() {
                    return Err(Error::contract(format!(
                        "info_nce_with_hard_negs: row {i} has ids but no sims node"
                    )));
                }
            }
        }
    }
    if hard.iter().all(|h| h.candidate_ids.is_empty()) {
        return info_nce_with(tape, sim, inv_tau, Direction::Uni);
    }

    let scaled = tape.mul(sim.node, inv_tau)?;
    let mut total: Option<NodeId> = None;
    for i in 0..r {
        let row = tape.slice_rows(scaled, i, 1)?;
        let full = match &hard[i].sims {
            Some(h) => {
                let hs = tape.mul(*h, inv_tau)?;
                tape.concat_cols(&[row, hs])?
            }
            None => row,
        };
        let ce = tape.cross_entropy_rows(full, &[sim.positive_index[i]])?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / r as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankLabel {
    Yes,
    No,
}

/// Pointwise reranker NLL: −log σ(z) for YES, −log(1−σ(z)) for NO,
/// realized through softplus for numerical stability.
pub fn rerank_nll(tape: &mut Tape, logit: NodeId, label: RerankLabel) -> Result<NodeId> {
    if tape.value(logit).len() != 1 {
        return Err(Error::contract("rerank_nll: logit must be scalar"));
    }
    match label {
        RerankLabel::Yes => {
            let n = tape.neg(logit);
            Ok(tape.softplus(n))
        }
        RerankLabel::No => Ok(tape.softplus(logit)),
    }
}

/// Fused retriever+reranker score list for one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedScoreSet {
    pub query_id: u32,
    pub candidate_ids: Vec<u32>,
    pub s_recall: Vec<f32>,
    pub s_rerank: Vec<f32>,
    pub alpha: f32,
    pub s_multi: Vec<f32>,
}

/// `s_multi = α·s_recall + (1−α)·s_rerank`, exact, no normalization.
pub fn fuse_scores(
    query_id: u32,
    candidate_ids: Vec<u32>,
    s_recall: Vec<f32>,
    s_rerank: Vec<f32>,
    alpha: f32,
) -> Result<FusedScoreSet> {
    if s_recall.len() != s_rerank.len() || candidate_ids.len() != s_recall.len() {
        return Err(Error::contract(format!(
            "fuse_scores: lengths differ ({} ids, {} recall, {} rerank)",
            candidate_ids.len(),
            s_recall.len(),
            s_rerank.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("fuse_scores: alpha {alpha} outside [0, 1]")));
    }
    let s_multi = s_recall
        .iter()
        .zip(&s_rerank)
        .map(|(r, k)| alpha * r + (1.0 - alpha) * k)
        .collect();
    Ok(FusedScoreSet { query_id, candidate_ids, s_recall, s_rerank, alpha, s_multi })
}

/// Indices sorted by score descending; ties broken by ascending id.
pub fn argsort_desc(ids: &[u32], scores: &[f32]) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..ids.len()).collect();
    ix.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(ids[a].cmp(&ids[b]))
    });
    ix
}

/// KL(P‖Q) between the detached teacher distribution
/// P = softmax(s_multi / teacher_temp) and the student distribution
/// Q = softmax(student_sims / τ). Gradient reaches the student only.
pub fn distill_kl(
    tape: &mut Tape,
    teacher: &FusedScoreSet,
    candidate_ids: &[u32],
    student_sims: NodeId,
    student_temp: &Temperature,
    teacher_temp: f32,
) -> Result<NodeId> {
    let inv_tau = student_temp.bind_inv_tau(tape);
    distill_kl_bound(tape, teacher, candidate_ids, student_sims, inv_tau, teacher_temp)
}

/// `distill_kl` against a pre-bound student 1/τ node.
pub fn distill_kl_bound(
    tape: &mut Tape,
    teacher: &FusedScoreSet,
    candidate_ids: &[u32],
    student_sims: NodeId,
    inv_tau: NodeId,
    teacher_temp: f32,
) -> Result<NodeId> {
    if candidate_ids != teacher.candidate_ids.as_slice() {
        return Err(Error::contract(
            "distill_kl: student candidate list differs from teacher's",
        ));
    }
    let n = candidate_ids.len();
    if n == 0 {
        return Err(Error::contract("distill_kl: empty candidate set"));
    }
    let shape = tape.shape(student_sims).to_vec();
    if shape != [1, n] && shape != [n] {
        return Err(Error::contract(format!(
            "distill_kl: student sims shape {shape:?} for {n} candidates"
        )));
    }
    if !(teacher_temp > 0.0) {
        return Err(Error::validation("distill_kl: teacher_temp must be positive"));
    }

    // teacher side entirely in f64, entering the tape as constants
    let logits: Vec<f64> = teacher.s_multi.iter().map(|&s| s as f64 / teacher_temp as f64).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / sum).collect();
    let p_log_p: f64 = p.iter().map(|&pi| if pi > 0.0 { pi * pi.ln() } else { 0.0 }).sum();

    let p_node = tape.constant(p.iter().map(|&v| v as f32).collect(), shape.clone());
    let plogp_node = tape.scalar_const(p_log_p as f32);

    let scaled = tape.mul(student_sims, inv_tau)?;
    let log_q = tape.log_softmax_rows(scaled)?;
    let weighted = tape.mul(p_node, log_q)?;
    let cross = tape.sum(weighted, None)?;
    tape.sub(plogp_node, cross)
}
