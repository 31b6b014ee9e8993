//! Progressive-transition training driver: staged curriculum over the
//! synthetic corpus, adaptive-moment optimizer, LR scaling rule,
//! hard-negative continual training, distillation, and byte-stable
//! checkpointing.
//!
//! Batch composition is a pure function of (stage seed, step), so a
//! checkpoint needs no RNG payload and resume is bit-exact.

use std::io::{BufRead, BufWriter, Read as _, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSequence};
use crate::encoder::{AttentionMode, BoundEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::miner::{MiningResult, RerankExample};
use crate::objectives::{
    self, rerank_nll, Direction, FusedScoreSet, HardNegRow, SimilarityMatrix, TempMode,
    Temperature,
};
use crate::reranker::RerankerModel;
use crate::seeding;
use crate::tensor::{NodeId, ParamSet, Parameter, Tape};

// ── LR scaling ──────────────────────────────────────────────────────

/// Square-root batch-size scaling: `base_lr · sqrt(new/base)`.
pub fn scale_lr(base_lr: f64, base_batch: u64, new_batch: u64) -> f64 {
    assert!(base_batch > 0 && new_batch > 0, "scale_lr: batches must be positive");
    base_lr * ((new_batch as f64) / (base_batch as f64)).sqrt()
}

// ── optimizer ───────────────────────────────────────────────────────

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state, one slot per parameter in `ParamSet` order
/// plus one trailing slot for the temperature log-parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &ParamSet, with_temp: bool) -> AdamState {
        let mut sizes: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
        if with_temp {
            sizes.push(1);
        }
        AdamState::new(&sizes)
    }
}

/// One bias-corrected adaptive-moment update for slot `slot`.
/// `grad` may be `None` (no gradient reached the parameter): moments
/// still decay, parameters move only by the accumulated moment.
pub fn adam_update(
    state: &mut AdamState,
    slot: usize,
    data: &mut [f32],
    grad: Option<&[f32]>,
    lr: f64,
) {
    let t = state.t as i32;
    debug_assert!(t >= 1, "advance state.t before updating");
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let m = &mut state.m[slot];
    let v = &mut state.v[slot];
    for i in 0..data.len() {
        let g = grad.map_or(0.0, |g| g[i] as f64);
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        data[i] = (data[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
    }
}

// ── stage configuration ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    TextAdapt,
    CrossModal,
    InstructionTune,
    HardNeg,
    Distill,
    RerankTrain,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::TextAdapt => "text_adapt",
            StageKind::CrossModal => "cross_modal",
            StageKind::InstructionTune => "instruction_tune",
            StageKind::HardNeg => "hard_neg",
            StageKind::Distill => "distill",
            StageKind::RerankTrain => "rerank_train",
        }
    }

    pub fn from_name(s: &str) -> Option<StageKind> {
        [
            StageKind::TextAdapt,
            StageKind::CrossModal,
            StageKind::InstructionTune,
            StageKind::HardNeg,
            StageKind::Distill,
            StageKind::RerankTrain,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    /// Required predecessor in the progressive curriculum; `None` means
    /// the stage starts from fresh initialization.
    pub fn expected_predecessor(self) -> Option<StageKind> {
        match self {
            StageKind::TextAdapt | StageKind::RerankTrain => None,
            StageKind::CrossModal => Some(StageKind::TextAdapt),
            StageKind::InstructionTune => Some(StageKind::CrossModal),
            StageKind::HardNeg => Some(StageKind::InstructionTune),
            StageKind::Distill => Some(StageKind::HardNeg),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TempSpec {
    pub mode: TempMode,
    pub initial: f32,
}

impl TempSpec {
    pub fn fixed(v: f32) -> TempSpec {
        TempSpec { mode: TempMode::Fixed, initial: v }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub temperature: TempSpec,
    pub loss_direction: Direction,
    /// Attention mode used during this stage (stage 1 trains causal,
    /// later stages bidirectional); `None` keeps the model config.
    pub attention_mode_override: Option<AttentionMode>,
    /// Number of synthetic pairs for the pair-based stages; task-based
    /// stages use the whole task list.
    pub n_pairs: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("stage: batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::validation("stage: lr must be positive"));
        }
        if !(self.temperature.initial > 0.0) {
            return Err(Error::validation("stage: temperature must be positive"));
        }
        Ok(())
    }
}

/// One structured log record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f32,
    pub tau: f32,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn save_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::validation(format!("serialize step log: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ── checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &str = "MMRLCKPT v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub lineage: Vec<String>,
    pub step: u64,
    pub params: ParamSet,
    pub temperature: Temperature,
    pub rng_seed: u64,
    pub config_fingerprint: String,
}

impl Checkpoint {
    pub fn fresh(params: ParamSet, temperature: Temperature, seed: u64, fp: String) -> Checkpoint {
        Checkpoint {
            stage: "init".to_string(),
            lineage: vec!["init".to_string()],
            step: 0,
            params,
            temperature,
            rng_seed: seed,
            config_fingerprint: fp,
        }
    }

    /// Textual header (format, lineage, tensor table) followed by raw
    /// little-endian f32 payloads; byte-stable for identical state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{CKPT_MAGIC}")?;
        writeln!(w, "stage {}", self.stage)?;
        writeln!(w, "lineage {}", self.lineage.join(","))?;
        writeln!(w, "step {}", self.step)?;
        writeln!(
            w,
            "temp_mode {}",
            match self.temperature.mode {
                TempMode::Fixed => "fixed",
                TempMode::Learnable => "learnable",
            }
        )?;
        writeln!(w, "rng_seed {}", self.rng_seed)?;
        writeln!(w, "config_fingerprint {}", self.config_fingerprint)?;
        let mut entries: Vec<(String, Vec<usize>, bool, Vec<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.trainable, p.data.clone()))
            .collect();
        entries.push((
            "log_tau".to_string(),
            vec![1],
            self.temperature.log_param.trainable,
            self.temperature.log_param.data.clone(),
        ));
        writeln!(w, "tensors {}", entries.len())?;
        let mut offset = 0usize;
        for (name, shape, trainable, data) in &entries {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(
                w,
                "tensor {name} {} {} {offset} {}",
                dims.join("x"),
                if *trainable { 1 } else { 0 },
                data.len()
            )?;
            offset += data.len();
        }
        writeln!(w, "payload {offset}")?;
        for (_, _, _, data) in &entries {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        let mut next = |f: &mut std::io::BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            f.read_line(&mut line)?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        let bad = |what: &str| Error::validation(format!("checkpoint {}: bad {what}", path.display()));

        if next(&mut f)? != CKPT_MAGIC {
            return Err(bad("magic"));
        }
        let stage = next(&mut f)?.strip_prefix("stage ").ok_or_else(|| bad("stage"))?.to_string();
        let lineage: Vec<String> = next(&mut f)?
            .strip_prefix("lineage ")
            .ok_or_else(|| bad("lineage"))?
            .split(',')
            .map(|s| s.to_string())
            .collect();
        let step: u64 = next(&mut f)?
            .strip_prefix("step ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("step"))?;
        let temp_mode = match next(&mut f)?.strip_prefix("temp_mode ") {
            Some("fixed") => TempMode::Fixed,
            Some("learnable") => TempMode::Learnable,
            _ => return Err(bad("temp_mode")),
        };
        let rng_seed: u64 = next(&mut f)?
            .strip_prefix("rng_seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng_seed"))?;
        let config_fingerprint = next(&mut f)?
            .strip_prefix("config_fingerprint ")
            .ok_or_else(|| bad("config_fingerprint"))?
            .to_string();
        let n_tensors: usize = next(&mut f)?
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("tensors"))?;
        let mut table = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let l = next(&mut f)?;
            let mut it = l.split(' ');
            let (tag, name, dims, trainable, len) = (
                it.next().ok_or_else(|| bad("tensor"))?,
                it.next().ok_or_else(|| bad("tensor name"))?.to_string(),
                it.next().ok_or_else(|| bad("tensor dims"))?.to_string(),
                it.next().ok_or_else(|| bad("tensor flag"))?.to_string(),
                {
                    let _offset = it.next().ok_or_else(|| bad("tensor offset"))?;
                    it.next()
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| bad("tensor len"))?
                },
            );
            if tag != "tensor" {
                return Err(bad("tensor tag"));
            }
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("tensor dim")))
                .collect::<Result<_>>()?;
            table.push((name, shape, trainable == "1", len));
        }
        let payload: usize = next(&mut f)?
            .strip_prefix("payload ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("payload"))?;

        let mut raw = vec![0u8; payload * 4];
        f.read_exact(&mut raw)?;
        let mut floats = Vec::with_capacity(payload);
        for chunk in raw.chunks_exact(4) {
            floats.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }

        let mut params = ParamSet::new();
        let mut temperature: Option<Temperature> = None;
        let mut off = 0usize;
        for (name, shape, trainable, len) in table {
            let data = floats[off..off + len].to_vec();
            off += len;
            if name == "log_tau" {
                let mut t = Temperature::new(temp_mode, 0.5).expect("temp init");
                t.log_param.data = data;
                t.log_param.trainable = trainable;
                temperature = Some(t);
            } else {
                let mut p = Parameter::new(name, shape, data);
                p.trainable = trainable;
                params.push(p);
            }
        }
        let temperature = temperature.ok_or_else(|| bad("missing log_tau tensor"))?;
        Ok(Checkpoint { stage, lineage, step, params, temperature, rng_seed, config_fingerprint })
    }
}

/// FNV-64 fingerprint of a serializable value, hex-encoded.
pub fn fingerprint_json<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("fingerprint serialization");
    format!("{:016x}", seeding::derive(0, &json))
}

// ── stage driver ────────────────────────────────────────────────────

/// Embed a batch of sequences on one tape; returns a [B, d] matrix.
fn embed_rows(tape: &mut Tape, bound: &BoundEncoder, seqs: &[&TokenSequence]) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        rows.push(bound.forward(tape, s)?);
    }
    tape.concat_rows(&rows)
}

/// Deterministic epoch order: a pure function of (seed, epoch).
fn epoch_order(seed: u64, stage: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(seed, &format!("stage/{stage}/epoch/{epoch}"));
    ix.shuffle(&mut rng);
    ix
}

fn check_lineage(cfg: &StageConfig, init: Option<&Checkpoint>) -> Result<()> {
    match (cfg.stage.expected_predecessor(), init) {
        (None, _) => Ok(()),
        (Some(want), Some(ck)) => {
            if ck.stage == want.name() {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "stage {} requires a {} checkpoint, got {}",
                    cfg.stage.name(),
                    want.name(),
                    ck.stage
                )))
            }
        }
        (Some(want), None) => Err(Error::contract(format!(
            "stage {} requires a {} checkpoint, got fresh init",
            cfg.stage.name(),
            want.name()
        ))),
    }
}

fn stage_temperature(cfg: &StageConfig, init: Option<&Checkpoint>) -> Result<Temperature> {
    // A learnable temperature carries over from a learnable predecessor;
    // otherwise the stage spec resets it.
    if cfg.temperature.mode == TempMode::Learnable {
        if let Some(ck) = init {
            if ck.temperature.mode == TempMode::Learnable {
                return Ok(ck.temperature.clone());
            }
        }
    }
    Temperature::new(cfg.temperature.mode, cfg.temperature.initial)
}

struct StageRunner {
    model: Encoder,
    temp: Temperature,
    adam: AdamState,
    lr: f64,
    log: Vec<StepLog>,
    step: u64,
}

impl StageRunner {
    fn new(
        enc_cfg: &EncoderConfig,
        cfg: &StageConfig,
        init: Option<&Checkpoint>,
    ) -> Result<StageRunner> {
        cfg.validate()?;
        check_lineage(cfg, init)?;
        let mut model_cfg = enc_cfg.clone();
        if let Some(mode) = cfg.attention_mode_override {
            model_cfg.attention_mode = mode;
        }
        let params = match init {
            Some(ck) => ck.params.clone(),
            None => Encoder::init(model_cfg.clone(), cfg.seed)?.params,
        };
        model_cfg.validate()?;
        let temp = stage_temperature(cfg, init)?;
        let adam = AdamState::for_params(&params, true);
        Ok(StageRunner {
            model: Encoder { cfg: model_cfg, params },
            temp,
            adam,
            lr: cfg.lr,
            log: Vec::new(),
            step: 0,
        })
    }

    /// Apply gradients from `tape` to model + temperature parameters.
    fn apply_step(&mut self, tape: &Tape, bound: &BoundEncoder, temp_node: Option<NodeId>) {
        self.adam.t += 1;
        let n_params = self.model.params.len();
        for (slot, (name, node)) in bound.nodes().iter().enumerate() {
            let p = self.model.params.get_mut(name).expect("bound param exists");
            if !p.trainable {
                continue;
            }
            adam_update(&mut self.adam, slot, &mut p.data, tape.grad(*node), self.lr);
        }
        if let Some(tn) = temp_node {
            if self.temp.log_param.trainable {
                adam_update(
                    &mut self.adam,
                    n_params,
                    &mut self.temp.log_param.data,
                    tape.grad(tn),
                    self.lr,
                );
                self.temp.project();
            }
        }
    }

    fn record(&mut self, loss: f32, started: Instant) {
        self.step += 1;
        self.log.push(StepLog {
            step: self.step,
            loss,
            tau: self.temp.tau(),
            lr: self.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    fn guard_nan(&self, loss: f32, batch_ids: &[usize]) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {}; batch items {:?}",
                self.step + 1,
                batch_ids
            )));
        }
        Ok(())
    }

    fn into_checkpoint(self, cfg: &StageConfig, init: Option<&Checkpoint>) -> Checkpoint {
        let mut lineage = init.map(|c| c.lineage.clone()).unwrap_or_default();
        lineage.push(cfg.stage.name().to_string());
        Checkpoint {
            stage: cfg.stage.name().to_string(),
            lineage,
            step: self.step,
            params: self.model.params,
            temperature: self.temp,
            rng_seed: cfg.seed,
            config_fingerprint: fingerprint_json(cfg),
        }
    }
}

/// Run one contrastive stage (text_adapt / cross_modal /
/// instruction_tune) over its data source.
pub fn run_stage(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    cfg: &StageConfig,
    init: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let pairs: Vec<(TokenSequence, TokenSequence)> = match cfg.stage {
        StageKind::TextAdapt => corpus.text_pretrain_pairs(cfg.seed, cfg.n_pairs),
        StageKind::CrossModal => corpus.text_image_pairs(cfg.seed, cfg.n_pairs),
        StageKind::InstructionTune => instruction_pairs(corpus)?,
        other => {
            return Err(Error::validation(format!(
                "run_stage: stage {} has its own driver",
                other.name()
            )))
        }
    };
    let mut runner = StageRunner::new(enc_cfg, cfg, init)?;
    if pairs.is_empty() && cfg.epochs > 0 {
        return Err(Error::contract("run_stage: empty data source"));
    }

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, cfg.stage.name(), epoch, pairs.len());
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut tape = Tape::new();
            let bound = runner.model.bind(&mut tape);
            let bt = runner.temp.bind(&mut tape);
            let queries: Vec<&TokenSequence> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let cands: Vec<&TokenSequence> = chunk.iter().map(|&i| &pairs[i].1).collect();
            let q = embed_rows(&mut tape, &bound, &queries)?;
            let c = embed_rows(&mut tape, &bound, &cands)?;
            let sims = tape.matmul_nt(q, c)?;
            let sim = SimilarityMatrix::new(&tape, sims, (0..chunk.len()).collect())?;
            let loss =
                objectives::info_nce_with(&mut tape, &sim, bt.inv_tau, cfg.loss_direction)?;
            let loss_v = tape.item(loss);
            runner.guard_nan(loss_v, chunk)?;
            tape.backward(loss)?;
            runner.apply_step(&tape, &bound, Some(bt.param));
            runner.record(loss_v, started);
        }
    }
    let log = runner.log.clone();
    Ok((runner.into_checkpoint(cfg, init), log))
}

/// (query-with-instruction, positive candidate) pairs for stage 3+.
fn instruction_pairs(corpus: &Corpus) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    corpus
        .tasks
        .iter()
        .map(|t| {
            let pid = *t
                .positive_ids
                .iter()
                .min()
                .ok_or_else(|| Error::contract("task without positives"))?;
            let pool = corpus
                .pool(&t.pool_id)
                .ok_or_else(|| Error::contract(format!("missing pool {}", t.pool_id)))?;
            let seq = pool
                .get(pid)
                .ok_or_else(|| Error::contract(format!("positive {pid} not in pool")))?;
            Ok((t.query.clone(), seq.clone()))
        })
        .collect()
}

/// Continual finetuning with mined hard negatives mixed into the
/// in-batch denominator.
pub fn run_hard_neg_stage(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    cfg: &StageConfig,
    init: Option<&Checkpoint>,
    mining: &[MiningResult],
) -> Result<(Checkpoint, Vec<StepLog>)> {
    if cfg.stage != StageKind::HardNeg {
        return Err(Error::validation("run_hard_neg_stage: wrong stage kind"));
    }
    let pairs = instruction_pairs(corpus)?;
    let by_query: std::collections::BTreeMap<u32, &MiningResult> =
        mining.iter().map(|m| (m.query_id, m)).collect();
    let mut runner = StageRunner::new(enc_cfg, cfg, init)?;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, cfg.stage.name(), epoch, pairs.len());
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut tape = Tape::new();
            let bound = runner.model.bind(&mut tape);
            let bt = runner.temp.bind(&mut tape);
            let queries: Vec<&TokenSequence> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let cands: Vec<&TokenSequence> = chunk.iter().map(|&i| &pairs[i].1).collect();
            let q = embed_rows(&mut tape, &bound, &queries)?;
            let c = embed_rows(&mut tape, &bound, &cands)?;
            let sims = tape.matmul_nt(q, c)?;
            let sim = SimilarityMatrix::new(&tape, sims, (0..chunk.len()).collect())?;

            let mut hard_rows = Vec::with_capacity(chunk.len());
            let mut positive_ids = Vec::with_capacity(chunk.len());
            for (row, &qi) in chunk.iter().enumerate() {
                let task = &corpus.tasks[qi];
                let m = by_query.get(&(qi as u32)).ok_or_else(|| {
                    Error::contract(format!("hard_neg: no mining entry for query {qi}"))
                })?;
                positive_ids.push(*task.positive_ids.iter().min().unwrap());
                if m.hard_negatives.is_empty() {
                    hard_rows.push(HardNegRow::empty());
                    continue;
                }
                let pool = corpus.pool(&task.pool_id).unwrap();
                let negs: Vec<&TokenSequence> = m
                    .hard_negatives
                    .iter()
                    .map(|(id, _)| {
                        pool.get(*id).ok_or_else(|| {
                            Error::contract(format!("hard_neg: candidate {id} not in pool"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let h = embed_rows(&mut tape, &bound, &negs)?;
                let q_row = tape.slice_rows(q, row, 1)?;
                let hsims = tape.matmul_nt(q_row, h)?;
                hard_rows.push(HardNegRow {
                    candidate_ids: m.hard_negatives.iter().map(|(id, _)| *id).collect(),
                    sims: Some(hsims),
                });
            }

            let loss = objectives::info_nce_with_hard_negs_bound(
                &mut tape,
                &sim,
                &hard_rows,
                &positive_ids,
                bt.inv_tau,
            )?;
            let loss_v = tape.item(loss);
            runner.guard_nan(loss_v, chunk)?;
            tape.backward(loss)?;
            runner.apply_step(&tape, &bound, Some(bt.param));
            runner.record(loss_v, started);
        }
    }
    let log = runner.log.clone();
    Ok((runner.into_checkpoint(cfg, init), log))
}

/// Distill the fused teacher's score distribution into the retriever on
/// a seeded fraction of queries.
pub fn run_distill_stage(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    cfg: &StageConfig,
    init: Option<&Checkpoint>,
    teacher_scores: &[FusedScoreSet],
    sample_fraction: f64,
    teacher_temp: f32,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    if cfg.stage != StageKind::Distill {
        return Err(Error::validation("run_distill_stage: wrong stage kind"));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "distill: sample_fraction {sample_fraction} outside (0, 1]"
        )));
    }
    let n = corpus.tasks.len();
    let take = ((n as f64) * sample_fraction).ceil() as usize;
    let mut order: Vec<usize> = {
        let mut ix: Vec<usize> = (0..n).collect();
        let mut rng = seeding::rng(cfg.seed, "distill/sample");
        ix.shuffle(&mut rng);
        ix.truncate(take);
        ix.sort_unstable();
        ix
    };
    let by_query: std::collections::BTreeMap<u32, &FusedScoreSet> =
        teacher_scores.iter().map(|f| (f.query_id, f)).collect();
    let missing: Vec<usize> =
        order.iter().copied().filter(|&i| !by_query.contains_key(&(i as u32))).collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "distill: teacher scores missing for queries {missing:?}"
        )));
    }

    let mut runner = StageRunner::new(enc_cfg, cfg, init)?;
    for epoch in 0..cfg.epochs {
        // reshuffle the sampled subset per epoch, deterministically
        let mut rng = seeding::rng(cfg.seed, &format!("distill/epoch/{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut tape = Tape::new();
            let bound = runner.model.bind(&mut tape);
            let bt = runner.temp.bind(&mut tape);
            let mut total: Option<NodeId> = None;
            for &qi in chunk {
                let task = &corpus.tasks[qi];
                let teacher = by_query[&(qi as u32)];
                let pool = corpus.pool(&task.pool_id).ok_or_else(|| {
                    Error::contract(format!("distill: missing pool {}", task.pool_id))
                })?;
                let cand_seqs: Vec<&TokenSequence> = teacher
                    .candidate_ids
                    .iter()
                    .map(|id| {
                        pool.get(*id).ok_or_else(|| {
                            Error::contract(format!("distill: candidate {id} not in pool"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let qe = bound.forward(&mut tape, &task.query)?;
                let q_row = tape.concat_rows(&[qe])?;
                let c = embed_rows(&mut tape, &bound, &cand_seqs)?;
                let sims = tape.matmul_nt(q_row, c)?;
                let kl = objectives::distill_kl_bound(
                    &mut tape,
                    teacher,
                    &teacher.candidate_ids,
                    sims,
                    bt.inv_tau,
                    teacher_temp,
                )?;
                total = Some(match total {
                    Some(t) => tape.add(t, kl)?,
                    None => kl,
                });
            }
            let loss = tape.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f32);
            let loss_v = tape.item(loss);
            runner.guard_nan(loss_v, chunk)?;
            tape.backward(loss)?;
            runner.apply_step(&tape, &bound, Some(bt.param));
            runner.record(loss_v, started);
        }
    }
    let log = runner.log.clone();
    Ok((runner.into_checkpoint(cfg, init), log))
}

/// Train the cross-encoder reranker on mined YES/NO pairs.
pub fn run_rerank_stage(
    examples: &[RerankExample],
    reranker_cfg: &EncoderConfig,
    cfg: &StageConfig,
) -> Result<(RerankerModel, Checkpoint, Vec<StepLog>)> {
    if cfg.stage != StageKind::RerankTrain {
        return Err(Error::validation("run_rerank_stage: wrong stage kind"));
    }
    cfg.validate()?;
    if examples.is_empty() && cfg.epochs > 0 {
        return Err(Error::contract("rerank_train: empty training set"));
    }
    let mut model = RerankerModel::init(reranker_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::for_params(&model.encoder.params, false);
    let mut log = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, cfg.stage.name(), epoch, examples.len());
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut tape = Tape::new();
            let bound = model.encoder.bind(&mut tape);
            let mut total: Option<NodeId> = None;
            for &i in chunk {
                let ex = &examples[i];
                let logit = model.logit_on_tape(&mut tape, &bound, &ex.query, &ex.candidate)?;
                let nll = rerank_nll(&mut tape, logit, ex.label)?;
                total = Some(match total {
                    Some(t) => tape.add(t, nll)?,
                    None => nll,
                });
            }
            let loss = tape.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f32);
            let loss_v = tape.item(loss);
            if !loss_v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite reranker loss at step {}; batch items {chunk:?}",
                    step + 1
                )));
            }
            tape.backward(loss)?;
            adam.t += 1;
            for (slot, (name, node)) in bound.nodes().iter().enumerate() {
                let p = model.encoder.params.get_mut(name).expect("bound param");
                if p.trainable {
                    adam_update(&mut adam, slot, &mut p.data, tape.grad(*node), cfg.lr);
                }
            }
            step += 1;
            log.push(StepLog {
                step,
                loss: loss_v,
                tau: 0.0,
                lr: cfg.lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    let ck = Checkpoint {
        stage: cfg.stage.name().to_string(),
        lineage: vec![cfg.stage.name().to_string()],
        step,
        params: model.encoder.params.clone(),
        temperature: Temperature::fixed(1.0)?,
        rng_seed: cfg.seed,
        config_fingerprint: fingerprint_json(cfg),
    };
    Ok((model, ck, log))
}
