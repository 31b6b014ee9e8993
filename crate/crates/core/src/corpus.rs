//! Synthetic multimodal retrieval corpora with exact ground truth.
//!
//! Every item is a token sequence sampled from a latent "concept"; two
//! items are relevant to each other iff they share a concept, so all
//! retrieval metrics have a brute-force oracle. Eight task types cover
//! the query→candidate modality grid (text, image, and mixed on both
//! sides), each with its own local candidate pool; the global pool is
//! the disjoint union of the locals.
//!
//! Vocabulary layout: text tokens `[0, 4095]`, image-patch tokens
//! `[4096, 8191]`, instruction tokens `[8192, 8255]`, then a handful of
//! reserved ids for the compression suffix (see `encoder`).

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const TEXT_TOKEN_LO: u32 = 0;
pub const TEXT_TOKEN_HI: u32 = 4095;
pub const IMAGE_TOKEN_LO: u32 = 4096;
pub const IMAGE_TOKEN_HI: u32 = 8191;
pub const INSTR_TOKEN_LO: u32 = 8192;
pub const INSTR_TOKEN_HI: u32 = 8255;
/// Five summarization-cue ids plus the final `<emb>` readout id.
pub const SUFFIX_TOKEN_LO: u32 = 8256;
pub const EMB_TOKEN: u32 = 8261;
/// Separator between query and candidate in cross-encoder joins.
pub const SEP_TOKEN: u32 = 8262;
/// Embedding-table size covering every id above.
pub const VOCAB_SIZE: usize = 8263;

pub const MIN_SEQ_LEN: usize = 8;
pub const MAX_SEQ_LEN: usize = 32;

const D_LATENT: usize = 16;
const PROFILE_SUPPORT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

/// Modality composition of one side of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    Text,
    Image,
    Mixed,
}

/// The 8 query→candidate modality patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    TextToImage,
    TextToText,
    TextToImageText,
    ImageToText,
    ImageToImage,
    ImageTextToText,
    ImageTextToImage,
    ImageTextToImageText,
}

impl TaskType {
    pub const ALL: [TaskType; 8] = [
        TaskType::TextToImage,
        TaskType::TextToText,
        TaskType::TextToImageText,
        TaskType::ImageToText,
        TaskType::ImageToImage,
        TaskType::ImageTextToText,
        TaskType::ImageTextToImage,
        TaskType::ImageTextToImageText,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::TextToImage => "t2i",
            TaskType::TextToText => "t2t",
            TaskType::TextToImageText => "t2it",
            TaskType::ImageToText => "i2t",
            TaskType::ImageToImage => "i2i",
            TaskType::ImageTextToText => "it2t",
            TaskType::ImageTextToImage => "it2i",
            TaskType::ImageTextToImageText => "it2it",
        }
    }

    pub fn query_composition(self) -> Composition {
        match self {
            TaskType::TextToImage | TaskType::TextToText | TaskType::TextToImageText => {
                Composition::Text
            }
            TaskType::ImageToText | TaskType::ImageToImage => Composition::Image,
            _ => Composition::Mixed,
        }
    }

    pub fn candidate_composition(self) -> Composition {
        match self {
            TaskType::TextToText | TaskType::ImageToText | TaskType::ImageTextToText => {
                Composition::Text
            }
            TaskType::TextToImage | TaskType::ImageToImage | TaskType::ImageTextToImage => {
                Composition::Image
            }
            TaskType::TextToImageText | TaskType::ImageTextToImageText => Composition::Mixed,
        }
    }

    /// Fixed instruction template: 4–8 reserved-range tokens whose first
    /// id identifies the task type.
    pub fn instruction_tokens(self) -> Vec<u32> {
        let k = self.index() as u32;
        let base = INSTR_TOKEN_LO + k * 8;
        let len = 4 + (self.index() % 5) as u32;
        (0..len).map(|j| base + j).collect()
    }

    /// Inverse of `instruction_tokens`: recover the task type from an
    /// instruction fragment's first token.
    pub fn from_instruction(tokens: &[u32]) -> Option<TaskType> {
        let first = *tokens.first()?;
        if !(INSTR_TOKEN_LO..=INSTR_TOKEN_HI).contains(&first) {
            return None;
        }
        let k = ((first - INSTR_TOKEN_LO) / 8) as usize;
        Self::ALL.get(k).copied().filter(|t| t.instruction_tokens()[0] == first)
    }
}

/// A categorical distribution over a token-id support set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabProfile {
    pub tokens: Vec<u32>,
    pub weights: Vec<f32>,
}

impl VocabProfile {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let u: f32 = rng.gen();
        let mut acc = 0.0f32;
        for (t, w) in self.tokens.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return *t;
            }
        }
        *self.tokens.last().unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concept {
    pub id: u32,
    pub latent: Vec<f32>,
    pub text_profile: VocabProfile,
    pub image_profile: VocabProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub modality_tags: Vec<Modality>,
    /// Half-open [start, end) range of instruction tokens, if any.
    pub instruction_span: Option<(usize, usize)>,
    /// Ground truth; hidden from the model, used only by oracles.
    pub concept_id: u32,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_tags.len() != self.tokens.len() {
            return Err(Error::contract(format!(
                "token sequence: {} tags for {} tokens",
                self.modality_tags.len(),
                self.tokens.len()
            )));
        }
        if let Some((s, e)) = self.instruction_span {
            if s >= e || e > self.tokens.len() {
                return Err(Error::contract(format!(
                    "instruction span [{s}, {e}) out of bounds for length {}",
                    self.tokens.len()
                )));
            }
            if self.modality_tags[s..e].iter().any(|&m| m != Modality::Text) {
                return Err(Error::contract("instruction tokens must carry text tags"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_type: TaskType,
    pub instruction: TokenSequence,
    /// Instruction prepended to the query body; `instruction_span`
    /// covers the prefix.
    pub query: TokenSequence,
    pub positive_ids: Vec<u32>,
    pub pool_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    Local,
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub pool_id: String,
    pub candidates: Vec<(u32, TokenSequence)>,
    pub scope: PoolScope,
}

impl RetrievalPool {
    pub fn get(&self, id: u32) -> Option<&TokenSequence> {
        self.candidates.iter().find(|(cid, _)| *cid == id).map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_concepts: usize,
    pub n_queries_per_task: usize,
    pub noise: f32,
    /// Candidates in each task's local pool; must be ≥ n_concepts so
    /// every concept is represented.
    pub candidates_per_pool: usize,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::validation("corpus: n_concepts must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::validation("corpus: noise must lie in [0, 1)"));
        }
        if self.candidates_per_pool < self.n_concepts {
            return Err(Error::validation("corpus: candidates_per_pool must be >= n_concepts"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub concepts: Vec<Concept>,
    pub tasks: Vec<TaskInstance>,
    /// Local pools only; `global_pool` derives the union.
    pub pools: Vec<RetrievalPool>,
}

/// Spec-default pool sizing: two candidates per concept.
pub fn generate_corpus(
    seed: u64,
    n_concepts: usize,
    n_queries_per_task: usize,
    noise: f32,
) -> Result<Corpus> {
    Corpus::generate(&CorpusSpec {
        seed,
        n_concepts,
        n_queries_per_task,
        noise,
        candidates_per_pool: 2 * n_concepts,
    })
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let concepts = gen_concepts(spec.seed, spec.n_concepts);

        let mut pools = Vec::with_capacity(TaskType::ALL.len());
        let mut tasks = Vec::new();
        let mut next_candidate_id = 0u32;

        for task_type in TaskType::ALL {
            let mut rng =
                seeding::rng(spec.seed, &format!("corpus/pool/{}", task_type.name()));
            let comp = task_type.candidate_composition();
            let mut candidates = Vec::with_capacity(spec.candidates_per_pool);
            for slot in 0..spec.candidates_per_pool {
                // First pass covers every concept once, then round-robin.
                let concept = &concepts[slot % spec.n_concepts];
                let seq = sample_sequence(&mut rng, &concepts, concept.id, comp, spec.noise, None);
                candidates.push((next_candidate_id, seq));
                next_candidate_id += 1;
            }
            let pool = RetrievalPool {
                pool_id: task_type.name().to_string(),
                candidates,
                scope: PoolScope::Local,
            };

            let mut qrng =
                seeding::rng(spec.seed, &format!("corpus/query/{}", task_type.name()));
            for _ in 0..spec.n_queries_per_task {
                let concept = &concepts[qrng.gen_range(0..spec.n_concepts)];
                let body = sample_sequence(
                    &mut qrng,
                    &concepts,
                    concept.id,
                    task_type.query_composition(),
                    spec.noise,
                    None,
                );
                let instr_tokens = task_type.instruction_tokens();
                let instruction = TokenSequence {
                    modality_tags: vec![Modality::Text; instr_tokens.len()],
                    tokens: instr_tokens.clone(),
                    instruction_span: None,
                    concept_id: concept.id,
                };
                let mut tokens = instr_tokens.clone();
                tokens.extend_from_slice(&body.tokens);
                let mut tags = vec![Modality::Text; instr_tokens.len()];
                tags.extend_from_slice(&body.modality_tags);
                let query = TokenSequence {
                    tokens,
                    modality_tags: tags,
                    instruction_span: Some((0, instr_tokens.len())),
                    concept_id: concept.id,
                };
                let positive_ids: Vec<u32> = pool
                    .candidates
                    .iter()
                    .filter(|(_, s)| s.concept_id == concept.id)
                    .map(|(id, _)| *id)
                    .collect();
                tasks.push(TaskInstance {
                    task_type,
                    instruction,
                    query,
                    positive_ids,
                    pool_id: pool.pool_id.clone(),
                });
            }
            pools.push(pool);
        }

        Ok(Corpus { spec: spec.clone(), concepts, tasks, pools })
    }

    /// Union of all local pools; ids stay globally unique by construction.
    pub fn global_pool(&self) -> RetrievalPool {
        let mut candidates = Vec::new();
        for p in &self.pools {
            candidates.extend(p.candidates.iter().cloned());
        }
        RetrievalPool { pool_id: "global".to_string(), candidates, scope: PoolScope::Global }
    }

    pub fn pool(&self, pool_id: &str) -> Option<&RetrievalPool> {
        self.pools.iter().find(|p| p.pool_id == pool_id)
    }

    /// Stage-1 paraphrase pairs: two text samples from one concept.
    pub fn text_pretrain_pairs(
        &self,
        seed: u64,
        n_pairs: usize,
    ) -> Vec<(TokenSequence, TokenSequence)> {
        let mut rng = seeding::rng(seed, "corpus/text_pairs");
        (0..n_pairs)
            .map(|_| {
                let c = self.concepts[rng.gen_range(0..self.concepts.len())].id;
                let q = sample_sequence(
                    &mut rng,
                    &self.concepts,
                    c,
                    Composition::Text,
                    self.spec.noise,
                    None,
                );
                let p = sample_sequence(
                    &mut rng,
                    &self.concepts,
                    c,
                    Composition::Text,
                    self.spec.noise,
                    None,
                );
                (q, p)
            })
            .collect()
    }

    /// Stage-2 alignment pairs: text query, image positive, one concept.
    pub fn text_image_pairs(
        &self,
        seed: u64,
        n_pairs: usize,
    ) -> Vec<(TokenSequence, TokenSequence)> {
        let mut rng = seeding::rng(seed, "corpus/text_image_pairs");
        (0..n_pairs)
            .map(|_| {
                let c = self.concepts[rng.gen_range(0..self.concepts.len())].id;
                let q = sample_sequence(
                    &mut rng,
                    &self.concepts,
                    c,
                    Composition::Text,
                    self.spec.noise,
                    None,
                );
                let p = sample_sequence(
                    &mut rng,
                    &self.concepts,
                    c,
                    Composition::Image,
                    self.spec.noise,
                    None,
                );
                (q, p)
            })
            .collect()
    }

    // ── serialization: one JSON record per line ─────────────────────

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("spec.json"), std::iter::once(&self.spec))?;
        write_jsonl(&dir.join("concepts.jsonl"), self.concepts.iter())?;
        write_jsonl(&dir.join("tasks.jsonl"), self.tasks.iter())?;
        let lines = self.pools.iter().flat_map(|p| {
            p.candidates.iter().map(move |(id, seq)| CandidateRecord {
                pool_id: p.pool_id.clone(),
                candidate_id: *id,
                sequence: seq.clone(),
            })
        });
        let records: Vec<CandidateRecord> = lines.collect();
        write_jsonl(&dir.join("candidates.jsonl"), records.iter())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let spec: CorpusSpec = read_jsonl(&dir.join("spec.json"))?
            .into_iter()
            .next()
            .ok_or_else(|| Error::validation("corpus dir: empty spec.json"))?;
        let concepts: Vec<Concept> = read_jsonl(&dir.join("concepts.jsonl"))?;
        let tasks: Vec<TaskInstance> = read_jsonl(&dir.join("tasks.jsonl"))?;
        let records: Vec<CandidateRecord> = read_jsonl(&dir.join("candidates.jsonl"))?;
        let mut by_pool: BTreeMap<String, Vec<(u32, TokenSequence)>> = BTreeMap::new();
        for r in records {
            by_pool.entry(r.pool_id).or_default().push((r.candidate_id, r.sequence));
        }
        // Preserve generation order: pools follow the task-type order.
        let mut pools = Vec::new();
        for t in TaskType::ALL {
            if let Some(cands) = by_pool.remove(t.name()) {
                pools.push(RetrievalPool {
                    pool_id: t.name().to_string(),
                    candidates: cands,
                    scope: PoolScope::Local,
                });
            }
        }
        Ok(Corpus { spec, concepts, tasks, pools })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    pool_id: String,
    candidate_id: u32,
    sequence: TokenSequence,
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl Iterator<Item = &'a T>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::validation(format!("serialize {}: {e}", path.display())))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

fn gen_concepts(seed: u64, n: usize) -> Vec<Concept> {
    let mut rng = seeding::rng(seed, "corpus/concepts");
    (0..n as u32)
        .map(|id| {
            let mut latent: Vec<f32> = (0..D_LATENT).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            let norm: f32 = latent.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in &mut latent {
                *v /= norm;
            }
            let text_profile = gen_profile(&mut rng, TEXT_TOKEN_LO, TEXT_TOKEN_HI);
            let image_profile = gen_profile(&mut rng, IMAGE_TOKEN_LO, IMAGE_TOKEN_HI);
            Concept { id, latent, text_profile, image_profile }
        })
        .collect()
}

fn gen_profile(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> VocabProfile {
    let mut tokens = Vec::with_capacity(PROFILE_SUPPORT);
    while tokens.len() < PROFILE_SUPPORT {
        let t = rng.gen_range(lo..=hi);
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }
    let raw: Vec<f32> = (0..PROFILE_SUPPORT).map(|_| rng.gen::<f32>() + 0.1).collect();
    let sum: f32 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / sum).collect();
    VocabProfile { tokens, weights }
}

/// Sample one sequence for `concept_id` with the given modality layout.
/// With probability `noise` each token is drawn from a random other
/// concept's profile instead (token-level noise mixing). Mixed layout is
/// image tokens followed by text tokens.
fn sample_sequence(
    rng: &mut ChaCha8Rng,
    concepts: &[Concept],
    concept_id: u32,
    comp: Composition,
    noise: f32,
    len_override: Option<usize>,
) -> TokenSequence {
    let len = len_override.unwrap_or_else(|| rng.gen_range(MIN_SEQ_LEN..=MAX_SEQ_LEN));
    let cix = concepts.iter().position(|c| c.id == concept_id).unwrap();
    let mut tokens = Vec::with_capacity(len);
    let mut tags = Vec::with_capacity(len);
    for pos in 0..len {
        let modality = match comp {
            Composition::Text => Modality::Text,
            Composition::Image => Modality::Image,
            Composition::Mixed => {
                if pos < len / 2 {
                    Modality::Image
                } else {
                    Modality::Text
                }
            }
        };
        let source = if concepts.len() > 1 && rng.gen::<f32>() < noise {
            // pick a different concept uniformly
            let mut other = rng.gen_range(0..concepts.len() - 1);
            if other >= cix {
                other += 1;
            }
            &concepts[other]
        } else {
            &concepts[cix]
        };
        let tok = match modality {
            Modality::Text => source.text_profile.sample(rng),
            Modality::Image => source.image_profile.sample(rng),
        };
        tokens.push(tok);
        tags.push(modality);
    }
    TokenSequence { tokens, modality_tags: tags, instruction_span: None, concept_id }
}
