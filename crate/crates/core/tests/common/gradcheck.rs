//! Finite-difference gradient verification for every differentiable op.
//!
//! Each op gets 100 randomized instances. For every tracked input
//! element we compare the backward-pass gradient against a central
//! difference with step 1e-3 and require relative error below 1e-3
//! (with an absolute floor for near-zero gradients).

use mmrl::seeding;
use mmrl::tensor::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const N_CHECKS: usize = 100;
const STEP: f32 = 1e-3;
const TOL: f64 = 1e-3;

/// One randomized instance: tracked leaf tensors, plus untracked
/// auxiliary data (projection weights, integer targets encoded as f32).
struct Instance {
    leaves: Vec<(Vec<f32>, Vec<usize>)>,
    aux: Vec<Vec<f32>>,
}

type Builder = fn(&mut Tape, &[NodeId], &[Vec<f32>]) -> NodeId;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| lo + (hi - lo) * rng.gen::<f32>()).collect()
}

/// Evaluate the loss for given leaf values (forward only).
fn eval(inst: &Instance, leaves: &[(Vec<f32>, Vec<usize>)], build: Builder) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> =
        leaves.iter().map(|(d, s)| tape.leaf(d.clone(), s.clone())).collect();
    let loss = build(&mut tape, &ids, &inst.aux);
    tape.item(loss) as f64
}

fn check_op(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Instance, build: Builder) {
    for i in 0..N_CHECKS {
        let mut rng = seeding::rng(0x6a7d, &format!("gradcheck/{name}/{i}"));
        let inst = gen(&mut rng);

        let mut tape = Tape::new();
        let ids: Vec<NodeId> =
            inst.leaves.iter().map(|(d, s)| tape.leaf(d.clone(), s.clone())).collect();
        let loss = build(&mut tape, &ids, &inst.aux);
        tape.backward(loss).unwrap_or_else(|e| panic!("{name}[{i}]: backward failed: {e}"));
        let analytic: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| {
                vec![0.0; tape.value(id).len()]
            }))
            .collect();

        for (li, (data, _)) in inst.leaves.iter().enumerate() {
            for ei in 0..data.len() {
                let mut plus = inst.leaves.clone();
                plus[li].0[ei] += STEP;
                let mut minus = inst.leaves.clone();
                minus[li].0[ei] -= STEP;
                let numeric =
                    (eval(&inst, &plus, build) - eval(&inst, &minus, build)) / (2.0 * STEP as f64);
                let a = analytic[li][ei] as f64;
                let denom = a.abs().max(numeric.abs()).max(1.0);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < TOL,
                    "{name}[{i}] leaf {li} elem {ei}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }
}

/// Project a tensor to a scalar with fixed random weights so every
/// output element contributes to the loss.
fn project(tape: &mut Tape, x: NodeId, w: &[f32]) -> NodeId {
    let shape = tape.shape(x).to_vec();
    let wn = tape.constant(w.to_vec(), shape);
    let p = tape.mul(x, wn).unwrap();
    tape.sum(p, None).unwrap()
}

fn two_mats(rng: &mut ChaCha8Rng) -> Instance {
    Instance {
        leaves: vec![
            (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
            (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
        ],
        aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
    }
}

fn one_mat(rng: &mut ChaCha8Rng) -> Instance {
    Instance {
        leaves: vec![(rand_vec(rng, 6, -2.0, 2.0), vec![2, 3])],
        aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
    }
}

pub fn grad_add() {
    check_op("add", two_mats, |t, ids, aux| {
        let y = t.add(ids[0], ids[1]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_add_scalar_broadcast() {
    check_op(
        "add_scalar",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 1, -2.0, 2.0), vec![1]),
            ],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.add(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_sub() {
    check_op("sub", two_mats, |t, ids, aux| {
        let y = t.sub(ids[0], ids[1]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_mul() {
    check_op("mul", two_mats, |t, ids, aux| {
        let y = t.mul(ids[0], ids[1]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_mul_scalar_broadcast() {
    check_op(
        "mul_scalar",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 1, -2.0, 2.0), vec![1]),
            ],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_add_row() {
    check_op(
        "add_row",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 3, -2.0, 2.0), vec![3]),
            ],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.add_row(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_scale() {
    check_op("scale", one_mat, |t, ids, aux| {
        let y = t.scale(ids[0], 1.7);
        project(t, y, &aux[0])
    });
}

pub fn grad_neg() {
    check_op("neg", one_mat, |t, ids, aux| {
        let y = t.neg(ids[0]);
        project(t, y, &aux[0])
    });
}

pub fn grad_exp() {
    check_op("exp", one_mat, |t, ids, aux| {
        let y = t.exp(ids[0]);
        project(t, y, &aux[0])
    });
}

pub fn grad_log() {
    check_op(
        "log",
        |rng| Instance {
            leaves: vec![(rand_vec(rng, 6, 0.5, 2.5), vec![2, 3])],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.log(ids[0]);
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_sigmoid() {
    check_op("sigmoid", one_mat, |t, ids, aux| {
        let y = t.sigmoid(ids[0]);
        project(t, y, &aux[0])
    });
}

pub fn grad_softplus() {
    check_op("softplus", one_mat, |t, ids, aux| {
        let y = t.softplus(ids[0]);
        project(t, y, &aux[0])
    });
}

pub fn grad_matmul() {
    check_op(
        "matmul",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 6, -2.0, 2.0), vec![3, 2]),
            ],
            aux: vec![rand_vec(rng, 4, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_matmul_batched() {
    check_op(
        "matmul_batched",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 12, -2.0, 2.0), vec![2, 2, 3]),
                (rand_vec(rng, 12, -2.0, 2.0), vec![2, 3, 2]),
            ],
            aux: vec![rand_vec(rng, 8, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_matmul_nt() {
    check_op(
        "matmul_nt",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 12, -2.0, 2.0), vec![4, 3]),
            ],
            aux: vec![rand_vec(rng, 8, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.matmul_nt(ids[0], ids[1]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_transpose() {
    check_op("transpose", one_mat, |t, ids, aux| {
        let y = t.transpose(ids[0]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_softmax_rows() {
    check_op("softmax_rows", one_mat, |t, ids, aux| {
        let y = t.softmax_rows(ids[0]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_softmax_axis0() {
    check_op("softmax_axis0", one_mat, |t, ids, aux| {
        let y = t.softmax(ids[0], 0).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_log_softmax_rows() {
    check_op("log_softmax_rows", one_mat, |t, ids, aux| {
        let y = t.log_softmax_rows(ids[0]).unwrap();
        project(t, y, &aux[0])
    });
}

pub fn grad_cross_entropy_rows() {
    check_op(
        "cross_entropy_rows",
        |rng| Instance {
            leaves: vec![(rand_vec(rng, 8, -2.0, 2.0), vec![2, 4])],
            aux: vec![vec![rng.gen_range(0..4) as f32, rng.gen_range(0..4) as f32]],
        },
        |t, ids, aux| {
            let targets: Vec<usize> = aux[0].iter().map(|&v| v as usize).collect();
            t.cross_entropy_rows(ids[0], &targets).unwrap()
        },
    );
}

pub fn grad_layer_norm() {
    check_op(
        "layer_norm",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 8, -2.0, 2.0), vec![2, 4]),
                (rand_vec(rng, 4, 0.5, 1.5), vec![4]),
                (rand_vec(rng, 4, -0.5, 0.5), vec![4]),
            ],
            aux: vec![rand_vec(rng, 8, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_sum_and_mean_all_axes() {
    for (name, axis, mean) in [
        ("sum_all", None, false),
        ("sum_axis0", Some(0), false),
        ("sum_axis1", Some(1), false),
        ("mean_all", None, true),
        ("mean_axis0", Some(0), true),
        ("mean_axis1", Some(1), true),
    ] {
        check_op(
            name,
            |rng| Instance {
                leaves: vec![(rand_vec(rng, 6, -2.0, 2.0), vec![2, 3])],
                aux: vec![
                    rand_vec(rng, 6, -1.0, 1.0),
                    vec![axis.map(|a: usize| a as f32 + 1.0).unwrap_or(0.0), mean as u8 as f32],
                ],
            },
            |t, ids, aux| {
                let axis = match aux[1][0] as usize {
                    0 => None,
                    a => Some(a - 1),
                };
                let y = if aux[1][1] > 0.5 {
                    t.mean(ids[0], axis).unwrap()
                } else {
                    t.sum(ids[0], axis).unwrap()
                };
                let n = t.value(y).len();
                project(t, y, &aux[0][..n])
            },
        );
    }
}

pub fn grad_masked_mean_rows() {
    check_op(
        "masked_mean_rows",
        |rng| {
            // at least one kept row
            let mut keep = [rng.gen::<bool>(), rng.gen::<bool>(), rng.gen::<bool>()];
            if !keep.iter().any(|&k| k) {
                keep[rng.gen_range(0..3)] = true;
            }
            Instance {
                leaves: vec![(rand_vec(rng, 9, -2.0, 2.0), vec![3, 3])],
                aux: vec![
                    rand_vec(rng, 3, -1.0, 1.0),
                    keep.iter().map(|&k| k as u8 as f32).collect(),
                ],
            }
        },
        |t, ids, aux| {
            let keep: Vec<bool> = aux[1].iter().map(|&v| v > 0.5).collect();
            let y = t.masked_mean_rows(ids[0], &keep).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_concat_rows() {
    check_op(
        "concat_rows",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 3, -2.0, 2.0), vec![1, 3]),
            ],
            aux: vec![rand_vec(rng, 9, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.concat_rows(&[ids[0], ids[1]]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_concat_cols() {
    check_op(
        "concat_cols",
        |rng| Instance {
            leaves: vec![
                (rand_vec(rng, 6, -2.0, 2.0), vec![2, 3]),
                (rand_vec(rng, 4, -2.0, 2.0), vec![2, 2]),
            ],
            aux: vec![rand_vec(rng, 10, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.concat_cols(&[ids[0], ids[1]]).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_slice_rows() {
    check_op(
        "slice_rows",
        |rng| Instance {
            leaves: vec![(rand_vec(rng, 9, -2.0, 2.0), vec![3, 3])],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.slice_rows(ids[0], 1, 2).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_slice_cols() {
    check_op(
        "slice_cols",
        |rng| Instance {
            leaves: vec![(rand_vec(rng, 9, -2.0, 2.0), vec![3, 3])],
            aux: vec![rand_vec(rng, 6, -1.0, 1.0)],
        },
        |t, ids, aux| {
            let y = t.slice_cols(ids[0], 0, 2).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_embed_lookup() {
    check_op(
        "embed_lookup",
        |rng| Instance {
            leaves: vec![(rand_vec(rng, 20, -2.0, 2.0), vec![5, 4])],
            aux: vec![
                rand_vec(rng, 12, -1.0, 1.0),
                // repeated index exercises the scatter-add path
                (0..3).map(|_| rng.gen_range(0..5) as f32).collect(),
            ],
        },
        |t, ids, aux| {
            let idx: Vec<usize> = aux[1].iter().map(|&v| v as usize).collect();
            let y = t.embed_lookup(ids[0], &idx).unwrap();
            project(t, y, &aux[0])
        },
    );
}

pub fn grad_l2_normalize_rows() {
    check_op("l2_normalize_rows", one_mat, |t, ids, aux| {
        let y = t.l2_normalize_rows(ids[0]).unwrap();
        project(t, y, &aux[0])
    });
}

/// Every op's check routine, for suites that run the whole battery.
pub const ALL_OPS: &[(&str, fn())] = &[
    ("add", grad_add),
    ("add_scalar_broadcast", grad_add_scalar_broadcast),
    ("sub", grad_sub),
    ("mul", grad_mul),
    ("mul_scalar_broadcast", grad_mul_scalar_broadcast),
    ("add_row", grad_add_row),
    ("scale", grad_scale),
    ("neg", grad_neg),
    ("exp", grad_exp),
    ("log", grad_log),
    ("sigmoid", grad_sigmoid),
    ("softplus", grad_softplus),
    ("matmul", grad_matmul),
    ("matmul_batched", grad_matmul_batched),
    ("matmul_nt", grad_matmul_nt),
    ("transpose", grad_transpose),
    ("softmax_rows", grad_softmax_rows),
    ("softmax_axis0", grad_softmax_axis0),
    ("log_softmax_rows", grad_log_softmax_rows),
    ("cross_entropy_rows", grad_cross_entropy_rows),
    ("layer_norm", grad_layer_norm),
    ("sum_and_mean_all_axes", grad_sum_and_mean_all_axes),
    ("masked_mean_rows", grad_masked_mean_rows),
    ("concat_rows", grad_concat_rows),
    ("concat_cols", grad_concat_cols),
    ("slice_rows", grad_slice_rows),
    ("slice_cols", grad_slice_cols),
    ("embed_lookup", grad_embed_lookup),
    ("l2_normalize_rows", grad_l2_normalize_rows),
];

/// Run the full battery; returns the number of op families checked.
pub fn run_all() -> usize {
    for (_, f) in ALL_OPS {
        f();
    }
    ALL_OPS.len()
}
