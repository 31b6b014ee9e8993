//! Run configuration (TOML) and the `mmrl` command-line interface.
//!
//! A run config describes the corpus, the encoder, the ordered stage
//! schedule, mining, the reranker pipeline, distillation, and
//! evaluation. Every artifact a run writes is listed in `manifest.json`
//! together with the config fingerprint and a content hash, so two runs
//! of the same config can be compared file by file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalScope, GridTrainSpec};
use crate::miner::{self, MiningConfig};
use crate::objectives::{Direction, FusedScoreSet, TempMode};
use crate::reranker::{self, RerankerModel};
use crate::trainer::{
    self, fingerprint_json, Checkpoint, StageConfig, StageKind, StepLog, TempSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable consulted when `--threads` is not given.
pub const THREADS_ENV: &str = "MMRL_THREADS";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankerParams {
    /// Shortlist size handed from the retriever to the reranker.
    pub top_m: usize,
    /// Fusion weight on the retriever score.
    pub alpha: f32,
    /// NO examples per query in the reranker training set.
    pub n_negatives: usize,
    /// Min-max rescale shortlist retriever scores before fusion.
    pub normalize_recall: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillParams {
    pub sample_fraction: f64,
    pub teacher_temp: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    pub scope: EvalScope,
    /// Optional metric applied to every task (e.g. "map@10"); `None`
    /// uses the per-task defaults.
    pub metric: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub stages: Vec<StageConfig>,
    pub mining: MiningConfig,
    pub reranker: RerankerParams,
    pub distill: DistillParams,
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "config schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.mining.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        if self.reranker.top_m == 0 {
            return Err(Error::validation("reranker: top_m must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.reranker.alpha) {
            return Err(Error::validation(format!(
                "reranker: alpha {} outside [0, 1]",
                self.reranker.alpha
            )));
        }
        if !(self.distill.sample_fraction > 0.0 && self.distill.sample_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "distill: sample_fraction {} outside (0, 1]",
                self.distill.sample_fraction
            )));
        }
        if !(self.distill.teacher_temp > 0.0) {
            return Err(Error::validation("distill: teacher_temp must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }

    pub fn stage_config(&self, kind: StageKind) -> Result<&StageConfig> {
        self.stages.iter().find(|s| s.stage == kind).ok_or_else(|| {
            Error::validation(format!("config has no [[stages]] entry for {}", kind.name()))
        })
    }

    /// Re-seed every stage and the corpus from one root seed.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.corpus.seed = seed;
        for s in &mut self.stages {
            s.seed = seed;
        }
        self
    }

    /// Small end-to-end configuration used by the quickstart command;
    /// runs the full five-stage recipe plus reranker in well under a
    /// minute.
    pub fn quickstart(seed: u64) -> RunConfig {
        let stage = |kind: StageKind,
                     dir: Direction,
                     epochs: usize,
                     attn: Option<crate::encoder::AttentionMode>,
                     temp: TempSpec| StageConfig {
            stage: kind,
            batch_size: 8,
            lr: 1e-3,
            epochs,
            temperature: temp,
            loss_direction: dir,
            attention_mode_override: attn,
            n_pairs: 32,
            seed,
        };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            corpus: CorpusSpec {
                seed,
                n_concepts: 6,
                n_queries_per_task: 2,
                noise: 0.1,
                candidates_per_pool: 6,
            },
            encoder: EncoderConfig {
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                ..Default::default()
            },
            stages: vec![
                stage(
                    StageKind::TextAdapt,
                    Direction::Uni,
                    1,
                    Some(crate::encoder::AttentionMode::Causal),
                    TempSpec::fixed(0.05),
                ),
                stage(StageKind::CrossModal, Direction::Bi, 1, None, TempSpec::fixed(0.05)),
                stage(
                    StageKind::InstructionTune,
                    Direction::Bi,
                    1,
                    None,
                    TempSpec { mode: TempMode::Learnable, initial: 0.05 },
                ),
                stage(
                    StageKind::HardNeg,
                    Direction::Uni,
                    1,
                    None,
                    TempSpec { mode: TempMode::Learnable, initial: 0.05 },
                ),
                stage(
                    StageKind::Distill,
                    Direction::Uni,
                    1,
                    None,
                    TempSpec { mode: TempMode::Learnable, initial: 0.05 },
                ),
                stage(StageKind::RerankTrain, Direction::Uni, 1, None, TempSpec::fixed(1.0)),
            ],
            mining: MiningConfig::default(),
            reranker: RerankerParams {
                top_m: 4,
                alpha: 0.5,
                n_negatives: 2,
                normalize_recall: true,
            },
            distill: DistillParams { sample_fraction: 0.5, teacher_temp: 0.05 },
            eval: EvalParams { scope: EvalScope::Local, metric: None },
        }
    }
}

// ── manifest ────────────────────────────────────────────────────────

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub fnv64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub artifacts: Vec<ManifestEntry>,
}

/// Hash every listed artifact (paths relative to `root`) and write
/// `manifest.json` alongside them.
pub fn write_manifest(root: &Path, fingerprint: &str, artifacts: &[PathBuf]) -> Result<()> {
    let mut entries = Vec::new();
    for rel in artifacts {
        let full = root.join(rel);
        let bytes = std::fs::read(&full)?;
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            fnv64: format!("{:016x}", fnv1a64(&bytes)),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_fingerprint: fingerprint.to_string(),
        artifacts: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("serialize manifest: {e}")))?;
    std::fs::write(root.join("manifest.json"), json)?;
    Ok(())
}

// ── pipeline drivers ────────────────────────────────────────────────

fn save_stage(
    out: &Path,
    name: &str,
    ckpt: &Checkpoint,
    log: &[StepLog],
    artifacts: &mut Vec<PathBuf>,
) -> Result<()> {
    let ckpt_rel = PathBuf::from(format!("ckpt_{name}.mmrl"));
    let log_rel = PathBuf::from(format!("log_{name}.jsonl"));
    ckpt.save(&out.join(&ckpt_rel))?;
    trainer::save_log(&out.join(&log_rel), log)?;
    // step logs carry wall-times and are deliberately left out of the
    // manifest: every manifested artifact must be run-to-run identical
    artifacts.push(ckpt_rel);
    Ok(())
}

/// Score every query with the recall-then-rerank pipeline over its local
/// pool. Query ids in the result index `corpus.tasks`.
pub fn pipeline_scores(
    retriever: &Encoder,
    rr: &RerankerModel,
    corpus: &Corpus,
    params: &RerankerParams,
) -> Result<Vec<FusedScoreSet>> {
    let mut out = Vec::with_capacity(corpus.tasks.len());
    for (qi, t) in corpus.tasks.iter().enumerate() {
        let pool = corpus
            .pool(&t.pool_id)
            .ok_or_else(|| Error::contract(format!("pipeline: missing pool {}", t.pool_id)))?;
        let top_m = params.top_m.min(pool.candidates.len());
        let o = reranker::recall_then_rerank(
            retriever,
            rr,
            params.alpha,
            qi as u32,
            &t.query,
            pool,
            top_m,
            params.normalize_recall,
        )?;
        out.push(o.fused);
    }
    Ok(out)
}

pub fn save_scores(path: &Path, scores: &[FusedScoreSet]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scores {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::validation(format!("serialize scores: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<Vec<FusedScoreSet>> {
    use std::io::BufRead;
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("scores line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Everything the quickstart produces, for callers that want to inspect
/// the result in memory as well as on disk.
pub struct PipelineRun {
    pub retriever: Encoder,
    pub reranker: RerankerModel,
    pub final_report_avg: f64,
}

/// Generate data, run all five progressive stages plus the reranker,
/// score the pipeline, distill, evaluate, and write a manifest. Every
/// output is a pure function of the config, so a second run into a
/// second directory produces byte-identical files.
pub fn run_full_pipeline(run: &RunConfig, out: &Path) -> Result<PipelineRun> {
    run.validate()?;
    std::fs::create_dir_all(out)?;
    let fp = run.fingerprint();
    let mut artifacts: Vec<PathBuf> = Vec::new();

    run.save(&out.join("config.toml"))?;
    artifacts.push(PathBuf::from("config.toml"));

    let corpus = Corpus::generate(&run.corpus)?;
    corpus.save(&out.join("corpus"))?;
    for f in ["spec.json", "concepts.jsonl", "tasks.jsonl", "candidates.jsonl"] {
        artifacts.push(PathBuf::from("corpus").join(f));
    }

    // progressive stages 1–3
    let (c1, l1) = trainer::run_stage(&corpus, &run.encoder, run.stage_config(StageKind::TextAdapt)?, None)?;
    save_stage(out, "text_adapt", &c1, &l1, &mut artifacts)?;
    let (c2, l2) =
        trainer::run_stage(&corpus, &run.encoder, run.stage_config(StageKind::CrossModal)?, Some(&c1))?;
    save_stage(out, "cross_modal", &c2, &l2, &mut artifacts)?;
    let (c3, l3) = trainer::run_stage(
        &corpus,
        &run.encoder,
        run.stage_config(StageKind::InstructionTune)?,
        Some(&c2),
    )?;
    save_stage(out, "instruction_tune", &c3, &l3, &mut artifacts)?;

    // mining with the stage-3 model
    let retr3 = Encoder { cfg: run.encoder.clone(), params: c3.params.clone() };
    let mining = miner::mine_corpus(&retr3, &corpus, &run.mining)?;
    miner::save_mining(&out.join("mining.jsonl"), &mining)?;
    artifacts.push(PathBuf::from("mining.jsonl"));

    // stage 4: hard negatives
    let (c4, l4) = trainer::run_hard_neg_stage(
        &corpus,
        &run.encoder,
        run.stage_config(StageKind::HardNeg)?,
        Some(&c3),
        &mining,
    )?;
    save_stage(out, "hard_neg", &c4, &l4, &mut artifacts)?;

    // reranker (fresh start) on pairs mined by the stage-4 model
    let retr4 = Encoder { cfg: run.encoder.clone(), params: c4.params.clone() };
    let mining4 = miner::mine_corpus(&retr4, &corpus, &run.mining)?;
    let examples =
        miner::build_reranker_training_set_corpus(&corpus, &mining4, run.reranker.n_negatives)?;
    let rr_cfg = RerankerModel::config_from(&run.encoder);
    let (rr, rc, rl) =
        trainer::run_rerank_stage(&examples, &rr_cfg, run.stage_config(StageKind::RerankTrain)?)?;
    save_stage(out, "rerank_train", &rc, &rl, &mut artifacts)?;

    // teacher scores from the fused pipeline, then distillation
    let teacher = pipeline_scores(&retr4, &rr, &corpus, &run.reranker)?;
    save_scores(&out.join("teacher_scores.jsonl"), &teacher)?;
    artifacts.push(PathBuf::from("teacher_scores.jsonl"));

    let (c5, l5) = trainer::run_distill_stage(
        &corpus,
        &run.encoder,
        run.stage_config(StageKind::Distill)?,
        Some(&c4),
        &teacher,
        run.distill.sample_fraction,
        run.distill.teacher_temp,
    )?;
    save_stage(out, "distill", &c5, &l5, &mut artifacts)?;

    // final evaluation
    let retr5 = Encoder { cfg: run.encoder.clone(), params: c5.params };
    let mut report = evaluator::evaluate(
        &retr5,
        &corpus,
        run.eval.scope,
        run.eval.metric.as_deref(),
        run.corpus.seed,
    )?;
    report.config_fingerprint = fp.clone();
    report.save(out, "eval")?;
    artifacts.push(PathBuf::from("eval.txt"));
    artifacts.push(PathBuf::from("eval.csv"));

    write_manifest(out, &fp, &artifacts)?;
    Ok(PipelineRun { retriever: retr5, reranker: rr, final_report_avg: report.avg })
}

// ── command-line interface ──────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "mmrl",
    about = "Multimodal retrieval training recipe on synthetic corpora",
    version
)]
struct Cli {
    /// Worker threads for parallel sections (0 = rayon default).
    /// Outputs are identical for any thread count. Falls back to the
    /// MMRL_THREADS environment variable.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Path to the run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed everywhere in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(&self.config)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus into a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage; later stages need --init (and --mining /
    /// --teacher-scores where applicable).
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Corpus directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Stage name: text_adapt, cross_modal, instruction_tune,
        /// hard_neg, or distill.
        #[arg(long)]
        stage: String,
        /// Predecessor checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Mining results (hard_neg stage).
        #[arg(long)]
        mining: Option<PathBuf>,
        /// Fused teacher scores (distill stage).
        #[arg(long)]
        teacher_scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine hard negatives with a frozen checkpoint.
    Mine {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output jsonl file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cross-encoder reranker from mined pairs.
    TrainReranker {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mining: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every query with recall-then-rerank and write fused scores.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Reranker checkpoint from train-reranker.
        #[arg(long)]
        reranker: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a retriever checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// local or global; defaults to the config's eval scope.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate an ablation grid across seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// table1 (attention/pooling/suffix) or table2 (masking).
        #[arg(long)]
        grid: String,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole recipe end to end with a small built-in config.
    Quickstart {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_scope(s: &str) -> Result<EvalScope> {
    match s {
        "local" => Ok(EvalScope::Local),
        "global" => Ok(EvalScope::Global),
        other => Err(Error::validation(format!("scope must be local or global, got {other}"))),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::validation(format!("bad seed list entry {p:?}")))
        })
        .collect()
}

fn load_retriever(run: &RunConfig, ckpt: &Path) -> Result<(Checkpoint, Encoder)> {
    let c = Checkpoint::load(ckpt)?;
    let enc = Encoder { cfg: run.encoder.clone(), params: c.params.clone() };
    Ok((c, enc))
}

fn init_threads(n: usize) -> Result<()> {
    let n = if n == 0 {
        std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(0)
    } else {
        n
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run_cmd(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.cmd {
        Cmd::GenData { cfg, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::generate(&run.corpus)?;
            corpus.save(&out)?;
            println!("wrote corpus to {} ({} tasks)", out.display(), corpus.tasks.len());
        }
        Cmd::Train { cfg, data, stage, init, mining, teacher_scores, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let kind = StageKind::from_name(&stage)
                .ok_or_else(|| Error::validation(format!("unknown stage {stage}")))?;
            let scfg = run.stage_config(kind)?;
            let init_ckpt = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let (ckpt, log) = match kind {
                StageKind::TextAdapt | StageKind::CrossModal | StageKind::InstructionTune => {
                    trainer::run_stage(&corpus, &run.encoder, scfg, init_ckpt.as_ref())?
                }
                StageKind::HardNeg => {
                    let mpath = mining
                        .ok_or_else(|| Error::validation("hard_neg stage needs --mining"))?;
                    let mined = miner::load_mining(&mpath)?;
                    trainer::run_hard_neg_stage(
                        &corpus,
                        &run.encoder,
                        scfg,
                        init_ckpt.as_ref(),
                        &mined,
                    )?
                }
                StageKind::Distill => {
                    let spath = teacher_scores
                        .ok_or_else(|| Error::validation("distill stage needs --teacher-scores"))?;
                    let teacher = load_scores(&spath)?;
                    trainer::run_distill_stage(
                        &corpus,
                        &run.encoder,
                        scfg,
                        init_ckpt.as_ref(),
                        &teacher,
                        run.distill.sample_fraction,
                        run.distill.teacher_temp,
                    )?
                }
                StageKind::RerankTrain => {
                    return Err(Error::validation("use the train-reranker subcommand"))
                }
            };
            std::fs::create_dir_all(&out)?;
            let mut artifacts = Vec::new();
            save_stage(&out, kind.name(), &ckpt, &log, &mut artifacts)?;
            write_manifest(&out, &run.fingerprint(), &artifacts)?;
            let last = log.last().map(|l| l.loss).unwrap_or(f32::NAN);
            println!("stage {} done: {} steps, final loss {last:.6}", kind.name(), log.len());
        }
        Cmd::Mine { cfg, data, ckpt, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let (_, enc) = load_retriever(&run, &ckpt)?;
            let mined = miner::mine_corpus(&enc, &corpus, &run.mining)?;
            miner::save_mining(&out, &mined)?;
            let total: usize = mined.iter().map(|m| m.hard_negatives.len()).sum();
            println!("mined {total} hard negatives for {} queries", mined.len());
        }
        Cmd::TrainReranker { cfg, data, mining, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let mined = miner::load_mining(&mining)?;
            let examples = miner::build_reranker_training_set_corpus(
                &corpus,
                &mined,
                run.reranker.n_negatives,
            )?;
            let rr_cfg = RerankerModel::config_from(&run.encoder);
            let (_, rc, rl) = trainer::run_rerank_stage(
                &examples,
                &rr_cfg,
                run.stage_config(StageKind::RerankTrain)?,
            )?;
            std::fs::create_dir_all(&out)?;
            let mut artifacts = Vec::new();
            save_stage(&out, "rerank_train", &rc, &rl, &mut artifacts)?;
            write_manifest(&out, &run.fingerprint(), &artifacts)?;
            println!("reranker trained on {} examples, {} steps", examples.len(), rl.len());
        }
        Cmd::Pipeline { cfg, data, ckpt, reranker: rr_path, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let (_, enc) = load_retriever(&run, &ckpt)?;
            let rr_ckpt = Checkpoint::load(&rr_path)?;
            let rr = RerankerModel::from_encoder(Encoder {
                cfg: RerankerModel::config_from(&run.encoder),
                params: rr_ckpt.params,
            })?;
            let scores = pipeline_scores(&enc, &rr, &corpus, &run.reranker)?;
            std::fs::create_dir_all(&out)?;
            save_scores(&out.join("fused_scores.jsonl"), &scores)?;
            let report: String = scores
                .iter()
                .map(|s| reranker::fused_report_line(s) + "\n")
                .collect();
            std::fs::write(out.join("fused_report.txt"), report)?;
            write_manifest(
                &out,
                &run.fingerprint(),
                &[PathBuf::from("fused_scores.jsonl"), PathBuf::from("fused_report.txt")],
            )?;
            println!("scored {} queries", scores.len());
        }
        Cmd::Eval { cfg, data, ckpt, scope, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let (_, enc) = load_retriever(&run, &ckpt)?;
            let scope = match scope {
                Some(s) => parse_scope(&s)?,
                None => run.eval.scope,
            };
            let mut report = evaluator::evaluate(
                &enc,
                &corpus,
                scope,
                run.eval.metric.as_deref(),
                run.corpus.seed,
            )?;
            report.config_fingerprint = run.fingerprint();
            std::fs::create_dir_all(&out)?;
            report.save(&out, "eval")?;
            write_manifest(
                &out,
                &run.fingerprint(),
                &[PathBuf::from("eval.txt"), PathBuf::from("eval.csv")],
            )?;
            print!("{}", report.render_text());
        }
        Cmd::Ablate { cfg, data, grid, seeds, out } => {
            let run = cfg.load()?;
            let corpus = Corpus::load(&data)?;
            let cells = match grid.as_str() {
                "table1" => evaluator::table1_grid(),
                "table2" => evaluator::table2_grid(),
                other => {
                    return Err(Error::validation(format!(
                        "grid must be table1 or table2, got {other}"
                    )))
                }
            };
            let seeds = parse_seeds(&seeds)?;
            let s1 = run.stage_config(StageKind::TextAdapt)?;
            let train = GridTrainSpec {
                n_pairs: s1.n_pairs,
                batch_size: s1.batch_size,
                lr: s1.lr,
                epochs: s1.epochs,
            };
            let result = evaluator::run_ablation_grid(
                &grid,
                &cells,
                &run.encoder,
                &corpus,
                &seeds,
                &train,
            )?;
            std::fs::create_dir_all(&out)?;
            result.save(&out, &grid)?;
            write_manifest(
                &out,
                &run.fingerprint(),
                &[PathBuf::from(format!("{grid}.txt")), PathBuf::from(format!("{grid}.csv"))],
            )?;
            print!("{}", result.render_text());
        }
        Cmd::Quickstart { out, seed } => {
            let run = RunConfig::quickstart(seed);
            let r = run_full_pipeline(&run, &out)?;
            println!(
                "quickstart complete: eval avg {:.6}, manifest at {}",
                r.final_report_avg,
                out.join("manifest.json").display()
            );
        }
    }
    Ok(())
}

/// Binary entry point: parse arguments, run, and on failure print one
/// machine-parseable line to stderr and exit with the error's code
/// (2 validation, 3 runtime, 4 numeric).
pub fn cli_main() {
    let cli = Cli::parse();
    if let Err(e) = run_cmd(cli) {
        eprintln!("error category={} message={}", e.category(), e);
        std::process::exit(e.exit_code());
    }
}
