//! Central finite-difference checks for every differentiable tape op.
//!
//! Each case builds a scalar loss `sum(w ⊙ op(inputs))` with a fixed random
//! weighting so permuted or scattered outputs are distinguished, runs one
//! backward pass, then compares every input coordinate against a central
//! difference with step 1e-3 over 100 random trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsr_tensor::{NodeId, Tape, Tensor, Var};

const STEP: f32 = 1e-3;
const RTOL: f32 = 1e-3;
// Guard for coordinates whose true gradient is near zero: with f32 forward
// arithmetic the difference quotient carries ~1e-4 absolute noise, so below
// this scale the comparison is absolute rather than relative.
const FLOOR: f32 = 0.2;

fn var_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Var {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Var::new(Tensor::new(shape.to_vec(), data).unwrap())
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// loss = mean(w ⊙ out); the mean keeps the loss magnitude (and with it the
/// f32 difference-quotient noise) independent of the op's output size.
fn weighted(tape: &Tape, out: NodeId, w: &[f32]) -> NodeId {
    let shape = tape.shape(out);
    let wt = tape.constant(Tensor::new(shape, w.to_vec()).unwrap());
    let prod = tape.mul(out, wt).unwrap();
    tape.mean_all(prod)
}

fn forward_loss(build: &dyn Fn(&Tape) -> NodeId) -> f32 {
    let tape = Tape::new();
    let loss = build(&tape);
    tape.scalar(loss).unwrap()
}

fn check_grads(vars: &[Var], build: &dyn Fn(&Tape) -> NodeId, ctx: &str) {
    for v in vars {
        v.zero_grad();
    }
    let tape = Tape::new();
    let loss = build(&tape);
    tape.backward(loss).unwrap();

    for (vi, var) in vars.iter().enumerate() {
        let analytic = var.grad_vec();
        for i in 0..var.numel() {
            let orig = var.value().data()[i];
            var.value_mut().data_mut()[i] = orig + STEP;
            let up = forward_loss(build);
            var.value_mut().data_mut()[i] = orig - STEP;
            let down = forward_loss(build);
            var.value_mut().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(FLOOR);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel < RTOL,
                "{ctx}: var {vi} coord {i}: analytic {a} vs fd {fd} (rel {rel})"
            );
        }
    }
}

fn trials(seed: u64, n: usize, mut f: impl FnMut(&mut ChaCha8Rng)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        f(&mut rng);
    }
}

#[test]
fn grad_add_sub_mul_div() {
    trials(10, 100, |rng| {
        let a = var_from(rng, &[2, 3], -1.0, 1.0);
        let b = var_from(rng, &[2, 3], 0.3, 1.3); // bounded away from zero for div
        let w = weights(rng, 6);
        for op in 0..4usize {
            let (aa, bb, ww) = (a.clone(), b.clone(), w.clone());
            let build = move |tape: &Tape| {
                let x = tape.leaf(&aa);
                let y = tape.leaf(&bb);
                let out = match op {
                    0 => tape.add(x, y).unwrap(),
                    1 => tape.sub(x, y).unwrap(),
                    2 => tape.mul(x, y).unwrap(),
                    _ => tape.div(x, y).unwrap(),
                };
                weighted(tape, out, &ww)
            };
            check_grads(&[a.clone(), b.clone()], &build, "binary ew");
        }
    });
}

#[test]
fn grad_scalar_broadcast_binary() {
    trials(11, 100, |rng| {
        let a = var_from(rng, &[1], 0.4, 1.2);
        let b = var_from(rng, &[5], -1.0, 1.0);
        let w = weights(rng, 5);
        let (aa, bb, ww) = (a.clone(), b.clone(), w.clone());
        let build = move |tape: &Tape| {
            let s = tape.leaf(&aa);
            let y = tape.leaf(&bb);
            let prod = tape.mul(y, s).unwrap();
            let quot = tape.div(prod, s).unwrap();
            let sum = tape.add(quot, s).unwrap();
            weighted(tape, sum, &ww)
        };
        check_grads(&[a, b], &build, "scalar broadcast");
    });
}

#[test]
fn grad_unary_chain() {
    trials(12, 100, |rng| {
        let a = var_from(rng, &[3, 2], 0.2, 1.0);
        let w = weights(rng, 6);
        let (aa, ww) = (a.clone(), w.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let e = tape.exp(x);
            let l = tape.log(e).unwrap();
            let s = tape.sqrt(e).unwrap();
            let n = tape.neg(l);
            let sc = tape.scale(n, 0.7);
            let shifted = tape.add_scalar(sc, 0.1);
            let sum = tape.add(s, shifted).unwrap();
            weighted(tape, sum, &ww)
        };
        check_grads(&[a], &build, "unary chain");
    });
}

#[test]
fn grad_relu_away_from_kink() {
    trials(13, 100, |rng| {
        let data: Vec<f32> = (0..6)
            .map(|_| {
                let v: f32 = rng.random_range(0.01..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let a = Var::new(Tensor::new(vec![6], data).unwrap());
        let w = weights(rng, 6);
        let (aa, ww) = (a.clone(), w.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let r = tape.relu(x);
            weighted(tape, r, &ww)
        };
        check_grads(&[a], &build, "relu");
    });
}

#[test]
fn grad_matmul_sum_matches_fd() {
    trials(14, 100, |rng| {
        let a = var_from(rng, &[3, 4], -1.0, 1.0);
        let b = var_from(rng, &[4, 2], -1.0, 1.0);
        let (aa, bb) = (a.clone(), b.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let y = tape.leaf(&bb);
            let m = tape.matmul(x, y).unwrap();
            tape.sum_all(m)
        };
        check_grads(&[a, b], &build, "matmul sum");
    });
}

#[test]
fn grad_transpose_and_reshape() {
    trials(15, 100, |rng| {
        let a = var_from(rng, &[3, 4], -1.0, 1.0);
        let w = weights(rng, 12);
        let (aa, ww) = (a.clone(), w.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let t = tape.transpose(x).unwrap();
            let r = tape.reshape(t, &[2, 6]).unwrap();
            weighted(tape, r, &ww)
        };
        check_grads(&[a], &build, "transpose+reshape");
    });
}

#[test]
fn grad_softmax_families() {
    trials(16, 100, |rng| {
        let a = var_from(rng, &[3, 4], -1.0, 1.0);
        let w = weights(rng, 12);
        for which in 0..3usize {
            let (aa, ww) = (a.clone(), w.clone());
            let build = move |tape: &Tape| {
                let x = tape.leaf(&aa);
                let out = match which {
                    0 => tape.softmax_rows(x).unwrap(),
                    1 => tape.log_softmax_rows(x).unwrap(),
                    _ => tape.normalize_rows(x).unwrap(),
                };
                weighted(tape, out, &ww)
            };
            check_grads(&[a.clone()], &build, "softmax family");
        }
    });
}

#[test]
fn grad_reductions_and_biases() {
    trials(17, 100, |rng| {
        let x = var_from(rng, &[2, 3, 2, 2], -1.0, 1.0);
        let rb = var_from(rng, &[3], -0.5, 0.5);
        let cb = var_from(rng, &[3], -0.5, 0.5);
        let sb = var_from(rng, &[2, 3], -0.5, 0.5);
        let w = weights(rng, 6);
        let (xx, rbb, cbb, sbb, ww) = (x.clone(), rb.clone(), cb.clone(), sb.clone(), w.clone());
        let build = move |tape: &Tape| {
            let xv = tape.leaf(&xx);
            let with_c = tape.add_chan_bias(xv, tape.leaf(&cbb)).unwrap();
            let with_s = tape.add_spatial_bias(with_c, tape.leaf(&sbb)).unwrap();
            let pooled = tape.mean_spatial(with_s).unwrap();
            let with_r = tape.add_row_bias(pooled, tape.leaf(&rbb)).unwrap();
            let lw = weighted(tape, with_r, &ww);
            let m = tape.mean_all(xv);
            tape.add(lw, m).unwrap()
        };
        check_grads(&[x, rb, cb, sb], &build, "reductions/biases");
    });
}

#[test]
fn grad_conv_pool_upsample() {
    trials(18, 100, |rng| {
        let x = var_from(rng, &[2, 2, 4, 4], -1.0, 1.0);
        let k = var_from(rng, &[3, 2, 3, 3], -0.5, 0.5);
        let w = weights(rng, 2 * 3 * 4 * 4);
        let (xx, kk, ww) = (x.clone(), k.clone(), w.clone());
        let build = move |tape: &Tape| {
            let xv = tape.leaf(&xx);
            let kv = tape.leaf(&kk);
            let c = tape.conv3x3(xv, kv).unwrap();
            let p = tape.avg_pool2(c, 2).unwrap();
            let u = tape.upsample_nearest(p, 2).unwrap();
            weighted(tape, u, &ww)
        };
        check_grads(&[x, k], &build, "conv/pool/upsample");
    });
}

#[test]
fn grad_concat_select_scatter() {
    trials(19, 100, |rng| {
        let a = var_from(rng, &[3, 2], -1.0, 1.0);
        let b = var_from(rng, &[3, 3], -1.0, 1.0);
        let w = weights(rng, 4 * 5);
        let (aa, bb, ww) = (a.clone(), b.clone(), w.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let y = tape.leaf(&bb);
            let cat = tape.concat_cols(&[x, y]).unwrap();
            let sel = tape.select_rows(cat, &[2, 0, 1]).unwrap();
            let sc = tape.scatter_rows(sel, &[1, 3, 0], 4).unwrap();
            weighted(tape, sc, &ww)
        };
        check_grads(&[a, b], &build, "concat/select/scatter");
    });
}

#[test]
fn grad_concat_channels() {
    trials(20, 100, |rng| {
        let a = var_from(rng, &[2, 1, 2, 2], -1.0, 1.0);
        let b = var_from(rng, &[2, 2, 2, 2], -1.0, 1.0);
        let w = weights(rng, 2 * 3 * 4);
        let (aa, bb, ww) = (a.clone(), b.clone(), w.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let y = tape.leaf(&bb);
            let cat = tape.concat_channels(&[x, y]).unwrap();
            weighted(tape, cat, &ww)
        };
        check_grads(&[a, b], &build, "concat channels");
    });
}

#[test]
fn grad_diag_repeat_col() {
    trials(21, 100, |rng| {
        let a = var_from(rng, &[4, 4], -1.0, 1.0);
        let w1 = weights(rng, 4 * 3);
        let w2 = weights(rng, 16);
        let (aa, ww1, ww2) = (a.clone(), w1.clone(), w2.clone());
        let build = move |tape: &Tape| {
            let x = tape.leaf(&aa);
            let dropped = tape.drop_diag(x).unwrap();
            let l1 = weighted(tape, dropped, &ww1);
            let diag = tape.extract_diag(x).unwrap();
            let rep = tape.repeat_rows_each(diag, 2).unwrap();
            let c = tape.col(x, 1).unwrap();
            let rep_c = tape.concat_cols(&[rep, tape.repeat_rows_each(c, 2).unwrap()]).unwrap();
            let l2 = weighted(tape, rep_c, &ww2);
            tape.add(l1, l2).unwrap()
        };
        check_grads(&[a], &build, "diag/repeat/col");
    });
}

#[test]
fn grad_gather_group_broadcast() {
    trials(22, 100, |rng| {
        let table = var_from(rng, &[5, 3], -1.0, 1.0);
        let w = weights(rng, 2 * 3 * 4);
        let (tt, ww) = (table.clone(), w.clone());
        let build = move |tape: &Tape| {
            let t = tape.leaf(&tt);
            let g = tape.gather_rows(t, &[4, 0, 2, 2]).unwrap();
            let avg = tape.avg_group_rows(g, 2).unwrap();
            let b = tape.broadcast_spatial(avg, 2, 2).unwrap();
            weighted(tape, b, &ww)
        };
        check_grads(&[table], &build, "gather/group/broadcast");
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = var_from(&mut rng, &[4, 6], -1.0, 1.0);
        let b = var_from(&mut rng, &[6, 5], -1.0, 1.0);
        let tape = Tape::new();
        let x = tape.leaf(&a);
        let y = tape.leaf(&b);
        let m = tape.matmul(x, y).unwrap();
        let s = tape.softmax_rows(m).unwrap();
        tape.value(s).data().to_vec()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
}
