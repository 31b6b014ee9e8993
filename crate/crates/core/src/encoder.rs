//! Small transformer embedder covering the architectural variants under
//! study: causal vs bidirectional attention, last-token / mean /
//! instruction-masked-mean pooling, optional compression suffix, and
//! toggleable learned positional embeddings.
//!
//! Pre-LN blocks, SiLU MLP, single shared embedding table for text,
//! image and instruction token ids. Output embeddings are always
//! L2-normalized, so cosine similarity equals dot product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, EMB_TOKEN, SUFFIX_TOKEN_LO, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{NodeId, ParamSet, Parameter, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    LastToken,
    Mean,
    MaskedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub pooling_mode: PoolingMode,
    pub compression_suffix: bool,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: VOCAB_SIZE,
            max_len: 48,
            attention_mode: AttentionMode::Bidirectional,
            pooling_mode: PoolingMode::Mean,
            compression_suffix: false,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::validation("encoder: zero-sized dimension"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "encoder: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::validation(format!(
                "encoder: vocab_size {} below required {VOCAB_SIZE}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Unit-norm embedding produced by `encode`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

const MLP_RATIO: usize = 2;

impl Encoder {
    /// Random initialization; parameter order is canonical and stable.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Encoder> {
        cfg.validate()?;
        let mut rng = seeding::rng(seed, "encoder/init");
        let d = cfg.d_model;
        let mut params = ParamSet::new();

        let uniform = |n: usize, r: f32, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            (0..n).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * r).collect()
        };

        params.push(Parameter::new(
            "embed",
            vec![cfg.vocab_size, d],
            uniform(cfg.vocab_size * d, 0.08, &mut rng),
        ));
        params.push(Parameter::new(
            "pos",
            vec![cfg.max_len, d],
            uniform(cfg.max_len * d, 0.02, &mut rng),
        ));
        let r = 1.0 / (d as f32).sqrt();
        let h = MLP_RATIO * d;
        for l in 0..cfg.n_layers {
            params.push(Parameter::new(format!("l{l}.ln1.g"), vec![d], vec![1.0; d]));
            params.push(Parameter::new(format!("l{l}.ln1.b"), vec![d], vec![0.0; d]));
            for name in ["wq", "wk", "wv", "wo"] {
                params.push(Parameter::new(
                    format!("l{l}.{name}"),
                    vec![d, d],
                    uniform(d * d, r, &mut rng),
                ));
            }
            params.push(Parameter::new(format!("l{l}.ln2.g"), vec![d], vec![1.0; d]));
            params.push(Parameter::new(format!("l{l}.ln2.b"), vec![d], vec![0.0; d]));
            params.push(Parameter::new(
                format!("l{l}.w1"),
                vec![d, h],
                uniform(d * h, r, &mut rng),
            ));
            params.push(Parameter::new(format!("l{l}.b1"), vec![h], vec![0.0; h]));
            params.push(Parameter::new(
                format!("l{l}.w2"),
                vec![h, d],
                uniform(h * d, 1.0 / (h as f32).sqrt(), &mut rng),
            ));
            params.push(Parameter::new(format!("l{l}.b2"), vec![d], vec![0.0; d]));
        }
        params.push(Parameter::new("lnf.g", vec![d], vec![1.0; d]));
        params.push(Parameter::new("lnf.b", vec![d], vec![0.0; d]));

        Ok(Encoder { cfg, params })
    }

    /// Register every parameter on `tape`, yielding node handles for a
    /// differentiable forward pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        let nodes = self.params.iter().map(|p| (p.name.clone(), tape.param(p))).collect();
        BoundEncoder { cfg: self.cfg.clone(), nodes }
    }

    /// Gradient read-back order matches `params` order.
    pub fn encode(&self, input: &TokenSequence) -> Result<EmbeddingVector> {
        let mut tape = Tape::new();
        let bound = self.frozen_bind(&mut tape);
        let node = bound.forward(&mut tape, input)?;
        Ok(EmbeddingVector { values: tape.value(node).to_vec() })
    }

    /// Bind with gradients off: forward-only, cheaper backward bookkeeping.
    pub fn frozen_bind(&self, tape: &mut Tape) -> BoundEncoder {
        let nodes = self
            .params
            .iter()
            .map(|p| (p.name.clone(), tape.constant(p.data.clone(), p.shape.clone())))
            .collect();
        BoundEncoder { cfg: self.cfg.clone(), nodes }
    }

    /// Elementwise equal to `encode` per item; items run in parallel on
    /// independent tapes and are written back by index.
    pub fn encode_batch(&self, inputs: &[TokenSequence]) -> Result<Vec<EmbeddingVector>> {
        use rayon::prelude::*;
        let results: Vec<Result<EmbeddingVector>> =
            inputs.par_iter().map(|s| self.encode(s)).collect();
        results
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| annotate_item(i, e)))
            .collect()
    }
}

fn annotate_item(i: usize, e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("item {i}: {m}")),
        Error::Validation(m) => Error::Validation(format!("item {i}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("item {i}: {m}")),
        other => other,
    }
}

pub struct BoundEncoder {
    cfg: EncoderConfig,
    nodes: Vec<(String, NodeId)>,
}

const LN_EPS: f32 = 1e-5;
const MASK_NEG: f32 = -1e9;

impl BoundEncoder {
    /// Parameter nodes in registration order, for gradient read-back.
    pub fn nodes(&self) -> &[(String, NodeId)] {
        &self.nodes
    }

    /// Node handle for a named parameter.
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    fn p(&self, name: &str) -> NodeId {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .1
    }

    /// Full forward pass: returns the L2-normalized embedding node,
    /// shape [d_model].
    pub fn forward(&self, tape: &mut Tape, input: &TokenSequence) -> Result<NodeId> {
        let (hidden, span, len) = self.forward_hidden(tape, input)?;
        let pooled = pool(tape, hidden, self.cfg.pooling_mode, span, len)?;
        tape.l2_normalize_rows(pooled)
    }

    /// Final-layer-norm hidden states, shape [len, d_model]; also returns
    /// the instruction span and the post-suffix length.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        input: &TokenSequence,
    ) -> Result<(NodeId, Option<(usize, usize)>, usize)> {
        input.validate()?;
        if input.is_empty() {
            return Err(Error::validation("encode: empty token sequence"));
        }
        let mut tokens: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        if self.cfg.compression_suffix {
            for t in SUFFIX_TOKEN_LO..EMB_TOKEN {
                tokens.push(t as usize);
            }
            tokens.push(EMB_TOKEN as usize);
        }
        let len = tokens.len();
        if len > self.cfg.max_len {
            return Err(Error::validation(format!(
                "encode: sequence length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }

        let embed = self.p("embed");
        let mut x = tape.embed_lookup(embed, &tokens)?;
        if self.cfg.positional_encoding {
            let pos = self.p("pos");
            let pos_slice = tape.slice_rows(pos, 0, len)?;
            x = tape.add(x, pos_slice)?;
        }

        let mask = match self.cfg.attention_mode {
            AttentionMode::Bidirectional => None,
            AttentionMode::Causal => {
                let mut m = vec![0.0f32; len * len];
                for i in 0..len {
                    for j in (i + 1)..len {
                        m[i * len + j] = MASK_NEG;
                    }
                }
                Some(tape.constant(m, vec![len, len]))
            }
        };

        for l in 0..self.cfg.n_layers {
            x = self.block(tape, x, l, len, mask)?;
        }
        let g = self.p("lnf.g");
        let b = self.p("lnf.b");
        let hidden = tape.layer_norm(x, g, b, LN_EPS)?;
        Ok((hidden, input.instruction_span, len))
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        l: usize,
        len: usize,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;

        // attention sublayer
        let g1 = self.p(&format!("l{l}.ln1.g"));
        let b1 = self.p(&format!("l{l}.ln1.b"));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let q = tape.matmul(h, self.p(&format!("l{l}.wq")))?;
        let k = tape.matmul(h, self.p(&format!("l{l}.wk")))?;
        let v = tape.matmul(h, self.p(&format!("l{l}.wv")))?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
            if let Some(m) = mask {
                scaled = tape.add(scaled, m)?;
            }
            debug_assert_eq!(tape.shape(scaled), &[len, len]);
            let att = tape.softmax_rows(scaled)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let o = tape.matmul(merged, self.p(&format!("l{l}.wo")))?;
        let x = tape.add(x, o)?;

        // MLP sublayer
        let g2 = self.p(&format!("l{l}.ln2.g"));
        let b2 = self.p(&format!("l{l}.ln2.b"));
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let z = tape.matmul(h, self.p(&format!("l{l}.w1")))?;
        let z = tape.add_row(z, self.p(&format!("l{l}.b1")))?;
        let sig = tape.sigmoid(z);
        let act = tape.mul(z, sig)?; // SiLU
        let m = tape.matmul(act, self.p(&format!("l{l}.w2")))?;
        let m = tape.add_row(m, self.p(&format!("l{l}.b2")))?;
        tape.add(x, m)
    }
}

/// Pool per-token states into one raw vector.
///
/// `span` is the instruction span inside the (possibly suffix-extended)
/// sequence of length `len`; only `masked_mean` consults it.
pub fn pool(
    tape: &mut Tape,
    hidden: NodeId,
    mode: PoolingMode,
    span: Option<(usize, usize)>,
    len: usize,
) -> Result<NodeId> {
    match mode {
        PoolingMode::LastToken => {
            let row = tape.slice_rows(hidden, len - 1, 1)?;
            // flatten [1,d] → [d] view via mean over the single row
            tape.mean(row, Some(0))
        }
        PoolingMode::Mean => tape.mean(hidden, Some(0)),
        PoolingMode::MaskedMean => {
            let keep: Vec<bool> = match span {
                None => vec![true; len],
                Some((s, e)) => (0..len).map(|i| i < s || i >= e).collect(),
            };
            if keep.iter().all(|&k| !k) {
                return Err(Error::validation(
                    "masked_mean: instruction span covers every token",
                ));
            }
            tape.masked_mean_rows(hidden, &keep)
        }
    }
}
