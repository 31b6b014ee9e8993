//! Loss-function verification against independent f64 oracles.
//!
//! Each objective is recomputed from the same f32 inputs by a separate
//! straight-line f64 implementation; graph and oracle must agree within
//! 1e-6 absolute on 50 randomized instances per loss, plus the worked
//! closed-form values ln 2 and ln(1 + e^-20).

use mmrl::objectives::{
    self, Direction, FusedScoreSet, HardNegRow, RerankLabel, SimilarityMatrix, Temperature,
};
use mmrl::seeding;
use mmrl::tensor::Tape;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const N_INSTANCES: usize = 50;
const TOL: f64 = 1e-6;

/// f32 inverse temperature exactly as the graph derives it:
/// exp32(-ln32(clamp(tau))).
fn inv_tau_f32(tau: f32) -> f32 {
    (-(tau.clamp(1e-3, 1.0).ln())).exp()
}

/// f64 cross-entropy of one row of f32 logits against a target column.
fn ce_row(logits: &[f32], target: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - mx).exp()).sum();
    mx + sum.ln() - logits[target] as f64
}

/// Scale a similarity row by 1/tau with the same f32 product rounding
/// the graph performs, then continue in f64.
fn scaled_row(sims: &[f32], inv_tau: f32) -> Vec<f32> {
    sims.iter().map(|&s| s * inv_tau).collect()
}

fn rand_sims(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect()
}

fn rand_tau(rng: &mut ChaCha8Rng) -> f32 {
    0.2 + 0.8 * rng.gen::<f32>()
}

pub fn info_nce_uni_matches_oracle() {
    for i in 0..N_INSTANCES {
        let mut rng = seeding::rng(0x10ce, &format!("uni/{i}"));
        let r = rng.gen_range(1..6);
        let c = rng.gen_range(r..r + 6);
        let data = rand_sims(&mut rng, r * c);
        let pos: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        let tau = rand_tau(&mut rng);

        let mut t = Tape::new();
        let node = t.leaf(data.clone(), vec![r, c]);
        let sim = SimilarityMatrix::new(&t, node, pos.clone()).unwrap();
        let temp = Temperature::fixed(tau).unwrap();
        let loss = objectives::info_nce(&mut t, &sim, &temp, Direction::Uni).unwrap();

        let it = inv_tau_f32(tau);
        let oracle: f64 = (0..r)
            .map(|row| ce_row(&scaled_row(&data[row * c..(row + 1) * c], it), pos[row]))
            .sum::<f64>()
            / r as f64;
        let got = t.item(loss) as f64;
        assert!((got - oracle).abs() < TOL, "uni[{i}]: graph {got} oracle {oracle}");
    }
}

pub fn info_nce_bi_matches_oracle() {
    for i in 0..N_INSTANCES {
        let mut rng = seeding::rng(0x10ce, &format!("bi/{i}"));
        let n = rng.gen_range(2..6);
        let data = rand_sims(&mut rng, n * n);
        // random permutation as positive assignment
        let mut pos: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            pos.swap(k, rng.gen_range(0..=k));
        }
        let tau = rand_tau(&mut rng);

        let mut t = Tape::new();
        let node = t.leaf(data.clone(), vec![n, n]);
        let sim = SimilarityMatrix::new(&t, node, pos.clone()).unwrap();
        let temp = Temperature::fixed(tau).unwrap();
        let loss = objectives::info_nce(&mut t, &sim, &temp, Direction::Bi).unwrap();

        let it = inv_tau_f32(tau);
        let scaled: Vec<f32> = data.iter().map(|&s| s * it).collect();
        let row_ce: f64 =
            (0..n).map(|r| ce_row(&scaled[r * n..(r + 1) * n], pos[r])).sum::<f64>() / n as f64;
        // column direction: candidate j's positive row is the inverse
        // permutation; transpose and reuse the row oracle
        let mut inv = vec![0usize; n];
        for (r, &p) in pos.iter().enumerate() {
            inv[p] = r;
        }
        let col_ce: f64 = (0..n)
            .map(|j| {
                let col: Vec<f32> = (0..n).map(|r| scaled[r * n + j]).collect();
                ce_row(&col, inv[j])
            })
            .sum::<f64>()
            / n as f64;
        // the graph stores each direction's mean as f32 before averaging
        let oracle = 0.5 * (row_ce as f32 as f64 + col_ce as f32 as f64);
        let got = t.item(loss) as f64;
        assert!((got - oracle).abs() < TOL, "bi[{i}]: graph {got} oracle {oracle}");
    }
}

pub fn info_nce_hard_negs_matches_oracle() {
    for i in 0..N_INSTANCES {
        let mut rng = seeding::rng(0x10ce, &format!("hard/{i}"));
        let n = rng.gen_range(1..5);
        let data = rand_sims(&mut rng, n * n);
        let tau = rand_tau(&mut rng);
        let positive_ids: Vec<u32> = (0..n as u32).collect();

        let mut t = Tape::new();
        let node = t.leaf(data.clone(), vec![n, n]);
        let sim = SimilarityMatrix::new(&t, node, (0..n).collect()).unwrap();
        let temp = Temperature::fixed(tau).unwrap();

        let mut hard = Vec::new();
        let mut hard_vals: Vec<Vec<f32>> = Vec::new();
        for _ in 0..n {
            let k = rng.gen_range(0..4);
            if k == 0 {
                hard.push(HardNegRow::empty());
                hard_vals.push(Vec::new());
            } else {
                let vals = rand_sims(&mut rng, k);
                let hs = t.leaf(vals.clone(), vec![1, k]);
                hard.push(HardNegRow {
                    candidate_ids: (100..100 + k as u32).collect(),
                    sims: Some(hs),
                });
                hard_vals.push(vals);
            }
        }
        let loss =
            objectives::info_nce_with_hard_negs(&mut t, &sim, &hard, &positive_ids, &temp)
                .unwrap();

        let it = inv_tau_f32(tau);
        let oracle: f64 = (0..n)
            .map(|r| {
                let mut row = scaled_row(&data[r * n..(r + 1) * n], it);
                row.extend(scaled_row(&hard_vals[r], it));
                ce_row(&row, r) as f32 as f64
            })
            .sum::<f64>()
            / n as f64;
        let got = t.item(loss) as f64;
        assert!((got - oracle).abs() < TOL, "hard[{i}]: graph {got} oracle {oracle}");
    }
}

pub fn rerank_nll_matches_oracle() {
    for i in 0..N_INSTANCES {
        let mut rng = seeding::rng(0x10ce, &format!("nll/{i}"));
        let z = (rng.gen::<f32>() * 2.0 - 1.0) * 10.0;
        let label = if rng.gen::<bool>() { RerankLabel::Yes } else { RerankLabel::No };

        let mut t = Tape::new();
        let zn = t.leaf(vec![z], vec![1]);
        let loss = objectives::rerank_nll(&mut t, zn, label).unwrap();

        let s = match label {
            RerankLabel::Yes => -(z as f64),
            RerankLabel::No => z as f64,
        };
        // ln(1 + e^s), computed stably
        let oracle = if s > 0.0 { s + (-s).exp().ln_1p() } else { s.exp().ln_1p() };
        let got = t.item(loss) as f64;
        assert!((got - oracle).abs() < TOL, "nll[{i}]: graph {got} oracle {oracle}");
    }
}

pub fn distill_kl_matches_oracle() {
    for i in 0..N_INSTANCES {
        let mut rng = seeding::rng(0x10ce, &format!("kl/{i}"));
        let n = rng.gen_range(2..8);
        let ids: Vec<u32> = (0..n as u32).collect();
        let s_multi = rand_sims(&mut rng, n);
        let student = rand_sims(&mut rng, n);
        let tau = rand_tau(&mut rng);
        let teacher_temp = rand_tau(&mut rng);

        let teacher = FusedScoreSet {
            query_id: 0,
            candidate_ids: ids.clone(),
            s_recall: s_multi.clone(),
            s_rerank: s_multi.clone(),
            alpha: 1.0,
            s_multi: s_multi.clone(),
        };

        let mut t = Tape::new();
        let sn = t.leaf(student.clone(), vec![1, n]);
        let temp = Temperature::fixed(tau).unwrap();
        let loss =
            objectives::distill_kl(&mut t, &teacher, &ids, sn, &temp, teacher_temp).unwrap();

        // teacher distribution in f64 from the fused f32 scores
        let logits: Vec<f64> =
            s_multi.iter().map(|&s| s as f64 / teacher_temp as f64).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
        let plogp: f64 = p.iter().map(|&pi| pi * pi.ln()).sum::<f64>() as f32 as f64;

        // student log-probabilities, with the graph's f32 roundings
        let it = inv_tau_f32(tau);
        let scaled = scaled_row(&student, it);
        let smx = scaled.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let ssum: f64 = scaled.iter().map(|&v| (v as f64 - smx).exp()).sum();
        let lse = smx + ssum.ln();
        let cross: f64 = scaled
            .iter()
            .zip(&p)
            .map(|(&sv, &pi)| ((pi as f32) * ((sv as f64 - lse) as f32)) as f64)
            .sum();
        let oracle = plogp - cross;
        let got = t.item(loss) as f64;
        assert!((got - oracle).abs() < TOL, "kl[{i}]: graph {got} oracle {oracle}");
    }
}

pub fn worked_closed_forms() {
    // two tied candidates: -ln softmax = ln 2, independent of tau
    let mut t = Tape::new();
    let node = t.leaf(vec![0.7, 0.7], vec![1, 2]);
    let sim = SimilarityMatrix::new(&t, node, vec![0]).unwrap();
    let temp = Temperature::fixed(0.31).unwrap();
    let loss = objectives::info_nce(&mut t, &sim, &temp, Direction::Uni).unwrap();
    assert!((t.item(loss) as f64 - std::f64::consts::LN_2).abs() < TOL);

    // confident correct reranker: ln(1 + e^-20)
    let z = t.leaf(vec![20.0], vec![1]);
    let nll = objectives::rerank_nll(&mut t, z, RerankLabel::Yes).unwrap();
    let want = (-20.0f64).exp().ln_1p();
    assert!((t.item(nll) as f64 - want).abs() < TOL);

    // identical teacher and student: KL exactly zero
    let ids = vec![0u32, 1, 2];
    let s = vec![0.9f32, 0.5, 0.1];
    let teacher = FusedScoreSet {
        query_id: 0,
        candidate_ids: ids.clone(),
        s_recall: s.clone(),
        s_rerank: s.clone(),
        alpha: 0.5,
        s_multi: s.clone(),
    };
    let mut t2 = Tape::new();
    let sn = t2.leaf(s.clone(), vec![1, 3]);
    let temp = Temperature::fixed(1.0).unwrap();
    let kl = objectives::distill_kl(&mut t2, &teacher, &ids, sn, &temp, 1.0).unwrap();
    assert!((t2.item(kl) as f64).abs() < TOL);
}

/// Run every oracle suite (50 randomized instances per loss plus the
/// worked closed forms).
pub fn run_all() {
    info_nce_uni_matches_oracle();
    info_nce_bi_matches_oracle();
    info_nce_hard_negs_matches_oracle();
    rerank_nll_matches_oracle();
    distill_kl_matches_oracle();
    worked_closed_forms();
}
