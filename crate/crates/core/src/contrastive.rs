//! Softmax contrastive objectives over unit-sphere embeddings.
//!
//! Three losses with distinct positive/negative constructions over a batch
//! of N records:
//!
//! * modality loss: anchor `[M_h]_j`, positives every other histology row
//!   `[M_h]_{k!=j}`, negatives all N expression rows `[M_y^]_k` (index j
//!   included), plus the mirrored term anchored in the expression rows;
//! * content loss: anchor `[C_h]_j`, positive its paired `[C_y^]_j`,
//!   negatives the 2(N-1) rows `{[C_h]_k, [C_y^]_k : k != j}`, plus the
//!   mirrored term;
//! * inter-sphere loss: anchor `[M_h]_j`, positive `[C_h]_j`, negatives
//!   `[C_h]_{k!=j}`, one direction only.
//!
//! Reduction is mean over positives per anchor, then mean over anchors, then
//! the sum of the two directional terms where a mirror exists. The
//! temperature is shared and learnable through an exponential
//! parameterization, so it stays positive.

use stsr_tensor::{NodeId, Tape, Tensor, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("contrastive loss needs at least 2 records, got {0}")]
    BatchTooSmall(usize),
    #[error("{0} set must not be empty")]
    EmptySet(&'static str),
    #[error("tensor error: {0}")]
    Tensor(#[from] stsr_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContrastiveConfig {
    pub tau_init: f32,
    pub lambda_modal: f32,
    pub lambda_content: f32,
    pub lambda_inter: f32,
    /// Sphere augmentation noise level.
    pub sigma: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau_init: 0.07,
            lambda_modal: 0.1,
            lambda_content: 0.1,
            lambda_inter: 0.1,
            sigma: 0.05,
        }
    }
}

/// Learnable temperature, stored as log(tau) so tau > 0 always holds.
pub struct TauParam {
    log_tau: Var,
}

impl TauParam {
    pub fn new(tau_init: f32) -> Self {
        assert!(tau_init > 0.0, "temperature must start positive");
        TauParam {
            log_tau: Var::new(Tensor::new(vec![1], vec![tau_init.ln()]).unwrap()),
        }
    }

    pub fn node(&self, tape: &Tape) -> NodeId {
        tape.exp(tape.leaf(&self.log_tau))
    }

    pub fn value(&self) -> f32 {
        self.log_tau.value().data()[0].exp()
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        vec![("log_tau".into(), self.log_tau.clone())]
    }
}

/// A fixed (non-learnable) temperature node.
pub fn tau_const(tape: &Tape, tau: f32) -> NodeId {
    tape.constant(Tensor::scalar(tau))
}

fn batch_dim(tape: &Tape, m: NodeId) -> Result<(usize, usize)> {
    let s = tape.shape(m);
    if s.len() != 2 {
        return Err(ContrastiveError::Tensor(stsr_tensor::TensorError::BadShape {
            op: "contrastive",
            expected: "rank 2 [n, d]".into(),
            actual: s,
        }));
    }
    Ok((s[0], s[1]))
}

/// Similarity matrix `a b^T / tau`.
fn sims(tape: &Tape, a: NodeId, b: NodeId, tau: NodeId) -> Result<NodeId> {
    let m = tape.matmul(a, tape.transpose(b)?)?;
    Ok(tape.div(m, tau)?)
}

/// Mean of `-log softmax(logits)[.., 0]` over all rows: every row holds one
/// positive logit in column 0 followed by its negatives.
fn nce_from_logits(tape: &Tape, logits: NodeId) -> Result<NodeId> {
    let ls = tape.log_softmax_rows(logits)?;
    let pos = tape.col(ls, 0)?;
    Ok(tape.neg(tape.mean_all(pos)))
}

/// One-anchor softmax contrastive loss: mean over positives of
/// `-log( exp(z.z+/tau) / (exp(z.z+/tau) + sum_k exp(z.z-_k/tau)) )`.
pub fn info_nce(
    tape: &Tape,
    z: NodeId,
    positives: NodeId,
    negatives: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    let zs = tape.shape(z);
    let z2 = if zs.len() == 1 {
        tape.reshape(z, &[1, zs[0]])?
    } else {
        z
    };
    let (p, _) = batch_dim(tape, positives)?;
    let (k, _) = batch_dim(tape, negatives)?;
    if p == 0 {
        return Err(ContrastiveError::EmptySet("positive"));
    }
    if k == 0 {
        return Err(ContrastiveError::EmptySet("negative"));
    }
    let zt = tape.transpose(z2)?;
    let sp = tape.div(tape.matmul(positives, zt)?, tau)?; // [P, 1]
    let sn = tape.div(tape.matmul(negatives, zt)?, tau)?; // [K, 1]
    let sn_row = tape.transpose(sn)?; // [1, K]
    let sn_rep = tape.repeat_rows_each(sn_row, p)?; // [P, K]
    let logits = tape.concat_cols(&[sp, sn_rep])?;
    nce_from_logits(tape, logits)
}

/// Cross-modality loss over `[N, D]` unit-row matrices; see module docs.
pub fn loss_modal(tape: &Tape, m_h: NodeId, m_y_hat: NodeId, tau: NodeId) -> Result<NodeId> {
    let (n, _) = batch_dim(tape, m_h)?;
    if n < 2 {
        return Err(ContrastiveError::BatchTooSmall(n));
    }
    let direction = |anchors: NodeId, same: NodeId, other: NodeId| -> Result<NodeId> {
        let s_same = sims(tape, anchors, same, tau)?; // [N, N]
        let s_other = sims(tape, anchors, other, tau)?; // [N, N]
        let pos = tape.reshape(tape.drop_diag(s_same)?, &[n * (n - 1), 1])?;
        let negs = tape.repeat_rows_each(s_other, n - 1)?; // [N(N-1), N]
        let logits = tape.concat_cols(&[pos, negs])?;
        nce_from_logits(tape, logits)
    };
    let d1 = direction(m_h, m_h, m_y_hat)?;
    let d2 = direction(m_y_hat, m_y_hat, m_h)?;
    Ok(tape.add(d1, d2)?)
}

/// Cross-content loss over `[N, D]` unit-row matrices; see module docs.
pub fn loss_content(tape: &Tape, c_h: NodeId, c_y_hat: NodeId, tau: NodeId) -> Result<NodeId> {
    let (n, _) = batch_dim(tape, c_h)?;
    if n < 2 {
        return Err(ContrastiveError::BatchTooSmall(n));
    }
    let direction = |anchors: NodeId, same: NodeId, other: NodeId| -> Result<NodeId> {
        let s_cross = sims(tape, anchors, other, tau)?; // [N, N]
        let s_same = sims(tape, anchors, same, tau)?; // [N, N]
        let logits = tape.concat_cols(&[
            tape.extract_diag(s_cross)?,
            tape.drop_diag(s_same)?,
            tape.drop_diag(s_cross)?,
        ])?;
        nce_from_logits(tape, logits)
    };
    let d1 = direction(c_h, c_h, c_y_hat)?;
    let d2 = direction(c_y_hat, c_y_hat, c_h)?;
    Ok(tape.add(d1, d2)?)
}

/// Inter-sphere loss tying the two histology heads; one direction only.
pub fn loss_inter_sphere(tape: &Tape, m_h: NodeId, c_h: NodeId, tau: NodeId) -> Result<NodeId> {
    let (n, _) = batch_dim(tape, m_h)?;
    if n < 2 {
        return Err(ContrastiveError::BatchTooSmall(n));
    }
    let s_mc = sims(tape, m_h, c_h, tau)?;
    let logits = tape.concat_cols(&[tape.extract_diag(s_mc)?, tape.drop_diag(s_mc)?])?;
    nce_from_logits(tape, logits)
}

/// Alignment (mean squared distance of matched rows) and uniformity (log of
/// the mean Gaussian kernel with bandwidth 2 over all unmatched pairs of the
/// pooled rows). Diagnostics only; computed outside the tape.
pub fn alignment_uniformity(z_a: &Tensor, z_b: &Tensor) -> (f64, f64) {
    assert_eq!(z_a.shape(), z_b.shape(), "matched sets must share shape");
    let d = *z_a.shape().last().unwrap();
    let n = z_a.numel() / d;
    let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();

    let mut align = 0.0f64;
    for i in 0..n {
        let (ra, rb) = (row(z_a, i), row(z_b, i));
        align += ra
            .iter()
            .zip(&rb)
            .map(|(x, y)| ((*x - *y) as f64).powi(2))
            .sum::<f64>();
    }
    align /= n as f64;

    // Pooled rows: a_0..a_{n-1}, b_0..b_{n-1}; matched pairs (a_i, b_i)
    // are excluded, as are self-pairs.
    let pooled: Vec<Vec<f32>> = (0..n)
        .map(|i| row(z_a, i))
        .chain((0..n).map(|i| row(z_b, i)))
        .collect();
    let total = 2 * n;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for u in 0..total {
        for v in (u + 1)..total {
            if v == u + n {
                continue; // matched pair
            }
            let d2: f64 = pooled[u]
                .iter()
                .zip(&pooled[v])
                .map(|(x, y)| ((*x - *y) as f64).powi(2))
                .sum();
            acc += (-2.0 * d2).exp();
            count += 1;
        }
    }
    let uniform = (acc / count as f64).ln();
    (align, uniform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use stsr_tensor::Tape;

    const LN3: f64 = 1.0986122886681098;
    const LN4: f64 = 1.3862943611198906;
    const LN5: f64 = 1.6094379124341003;

    fn mat(tape: &Tape, rows: &[Vec<f32>]) -> NodeId {
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        tape.constant(Tensor::new(vec![rows.len(), d], data).unwrap())
    }

    fn unit_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
        let mut r = rng::stream(seed, &[0xcafe]);
        (0..n)
            .map(|_| {
                let v = rng::standard_normal_vec(&mut r, d);
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    // ---- independent scalar oracles (f64, loop-based) ----------------------

    fn scalar_nce(z: &[f32], pos: &[Vec<f32>], neg: &[Vec<f32>], tau: f64) -> f64 {
        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
        };
        let neg_sum: f64 = neg.iter().map(|zn| (dot(z, zn) / tau).exp()).sum();
        let mut total = 0.0;
        for zp in pos {
            let e = (dot(z, zp) / tau).exp();
            total += -(e / (e + neg_sum)).ln();
        }
        total / pos.len() as f64
    }

    fn oracle_modal(m_h: &[Vec<f32>], m_y: &[Vec<f32>], tau: f64) -> f64 {
        let n = m_h.len();
        let one_dir = |anchors: &[Vec<f32>], same: &[Vec<f32>], other: &[Vec<f32>]| -> f64 {
            let mut per_anchor = 0.0;
            for j in 0..n {
                let pos: Vec<Vec<f32>> = (0..n).filter(|k| *k != j).map(|k| same[k].clone()).collect();
                per_anchor += scalar_nce(&anchors[j], &pos, other, tau);
            }
            per_anchor / n as f64
        };
        one_dir(m_h, m_h, m_y) + one_dir(m_y, m_y, m_h)
    }

    fn oracle_content(c_h: &[Vec<f32>], c_y: &[Vec<f32>], tau: f64) -> f64 {
        let n = c_h.len();
        let one_dir = |anchors: &[Vec<f32>], same: &[Vec<f32>], other: &[Vec<f32>]| -> f64 {
            let mut per_anchor = 0.0;
            for j in 0..n {
                let pos = vec![other[j].clone()];
                let mut neg = Vec::new();
                for k in 0..n {
                    if k != j {
                        neg.push(same[k].clone());
                        neg.push(other[k].clone());
                    }
                }
                per_anchor += scalar_nce(&anchors[j], &pos, &neg, tau);
            }
            per_anchor / n as f64
        };
        one_dir(c_h, c_h, c_y) + one_dir(c_y, c_y, c_h)
    }

    fn oracle_inter(m_h: &[Vec<f32>], c_h: &[Vec<f32>], tau: f64) -> f64 {
        let n = m_h.len();
        let mut per_anchor = 0.0;
        for j in 0..n {
            let pos = vec![c_h[j].clone()];
            let neg: Vec<Vec<f32>> = (0..n).filter(|k| *k != j).map(|k| c_h[k].clone()).collect();
            per_anchor += scalar_nce(&m_h[j], &pos, &neg, tau);
        }
        per_anchor / n as f64
    }

    // ---- analytic anchors ---------------------------------------------------

    #[test]
    fn identical_embeddings_hit_closed_forms() {
        let tape = Tape::new();
        let row = vec![1.0f32, 0.0, 0.0];
        let same = mat(&tape, &[row.clone(), row.clone(), row.clone()]);
        let tau = tau_const(&tape, 0.3);

        let lm = loss_modal(&tape, same, same, tau).unwrap();
        assert!((tape.scalar(lm).unwrap() as f64 - 2.0 * LN4).abs() < 1e-6);

        let lc = loss_content(&tape, same, same, tau).unwrap();
        assert!((tape.scalar(lc).unwrap() as f64 - 2.0 * LN5).abs() < 1e-6);

        let li = loss_inter_sphere(&tape, same, same, tau).unwrap();
        assert!((tape.scalar(li).unwrap() as f64 - LN3).abs() < 1e-6);
    }

    #[test]
    fn info_nce_equal_similarities_is_ln_1_plus_k() {
        for tau in [0.05f32, 0.3, 1.0, 4.0] {
            let tape = Tape::new();
            let z = tape.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
            let row = vec![1.0f32, 0.0, 0.0];
            let pos = mat(&tape, &[row.clone()]);
            let neg = mat(&tape, &[row.clone(), row.clone(), row.clone()]);
            let t = tau_const(&tape, tau);
            let l = info_nce(&tape, z, pos, neg, t).unwrap();
            assert!(
                (tape.scalar(l).unwrap() as f64 - LN4).abs() < 1e-6,
                "tau {tau}"
            );
        }
    }

    #[test]
    fn info_nce_saturates_when_positive_dominates() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let pos = mat(&tape, &[vec![1.0, 0.0]]);
        let neg = mat(&tape, &[vec![0.0, 1.0], vec![0.0, -1.0]]);
        let t = tau_const(&tape, 0.01);
        let l = info_nce(&tape, z, pos, neg, t).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-4);
    }

    #[test]
    fn info_nce_matches_scalar_arithmetic() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let pos = mat(&tape, &[vec![0.8, 0.6]]);
        let neg = mat(&tape, &[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let t = tau_const(&tape, 1.0);
        let got = tape.scalar(info_nce(&tape, z, pos, neg, t).unwrap()).unwrap() as f64;
        let want = scalar_nce(
            &[1.0, 0.0],
            &[vec![0.8, 0.6]],
            &[vec![0.0, 1.0], vec![-1.0, 0.0]],
            1.0,
        );
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn info_nce_rejects_empty_sets() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        let some = mat(&tape, &[vec![0.0, 1.0]]);
        assert!(matches!(
            info_nce(&tape, z, empty, some, tau_const(&tape, 1.0)),
            Err(ContrastiveError::EmptySet("positive"))
        ));
        assert!(matches!(
            info_nce(&tape, z, some, empty, tau_const(&tape, 1.0)),
            Err(ContrastiveError::EmptySet("negative"))
        ));
    }

    // ---- separation limits ---------------------------------------------------

    #[test]
    fn modal_loss_vanishes_when_modalities_separate() {
        // Histology rows tightly clustered, expression rows orthogonal to them.
        let tape = Tape::new();
        let m_h = mat(&tape, &[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.999, 0.0447, 0.0, 0.0],
            vec![0.999, -0.0447, 0.0, 0.0],
        ]);
        let m_y = mat(&tape, &[
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.999, 0.0447],
            vec![0.0, 0.0, 0.999, -0.0447],
        ]);
        let t = tau_const(&tape, 0.05);
        let l = loss_modal(&tape, m_h, m_y, t).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-3, "{}", tape.scalar(l).unwrap());
    }

    #[test]
    fn content_loss_vanishes_for_aligned_orthogonal_pairs() {
        let tape = Tape::new();
        let rows = vec![
            vec![1.0f32, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let c_h = mat(&tape, &rows);
        let c_y = mat(&tape, &rows);
        let t = tau_const(&tape, 0.05);
        let l = loss_content(&tape, c_h, c_y, t).unwrap();
        assert!(tape.scalar(l).unwrap() < 1e-3);

        let li = loss_inter_sphere(&tape, c_h, c_y, t).unwrap();
        assert!(tape.scalar(li).unwrap() < 1e-3);
    }

    // ---- brute-force enumeration oracles --------------------------------------

    #[test]
    fn losses_match_pair_enumeration_oracle() {
        for (seed, n) in [(1u64, 4usize), (2, 3), (3, 8), (4, 2)] {
            let h_rows = unit_rows(seed, n, 6);
            let y_rows = unit_rows(seed + 100, n, 6);
            let tau = 0.2f32;
            let tape = Tape::new();
            let mh = mat(&tape, &h_rows);
            let my = mat(&tape, &y_rows);
            let t = tau_const(&tape, tau);

            let got = tape.scalar(loss_modal(&tape, mh, my, t).unwrap()).unwrap() as f64;
            let want = oracle_modal(&h_rows, &y_rows, tau as f64);
            assert!((got - want).abs() < 1e-5, "modal n={n}: {got} vs {want}");

            let got = tape.scalar(loss_content(&tape, mh, my, t).unwrap()).unwrap() as f64;
            let want = oracle_content(&h_rows, &y_rows, tau as f64);
            assert!((got - want).abs() < 1e-5, "content n={n}: {got} vs {want}");

            let got = tape.scalar(loss_inter_sphere(&tape, mh, my, t).unwrap()).unwrap() as f64;
            let want = oracle_inter(&h_rows, &y_rows, tau as f64);
            assert!((got - want).abs() < 1e-5, "inter n={n}: {got} vs {want}");
        }
    }

    // ---- invariances ------------------------------------------------------------

    #[test]
    fn losses_are_batch_permutation_invariant() {
        let n = 5;
        let h_rows = unit_rows(7, n, 8);
        let y_rows = unit_rows(8, n, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let ph: Vec<Vec<f32>> = perm.iter().map(|i| h_rows[*i].clone()).collect();
        let py: Vec<Vec<f32>> = perm.iter().map(|i| y_rows[*i].clone()).collect();

        let eval = |h: &[Vec<f32>], y: &[Vec<f32>]| -> (f64, f64, f64) {
            let tape = Tape::new();
            let mh = mat(&tape, h);
            let my = mat(&tape, y);
            let t = tau_const(&tape, 0.1);
            (
                tape.scalar(loss_modal(&tape, mh, my, t).unwrap()).unwrap() as f64,
                tape.scalar(loss_content(&tape, mh, my, t).unwrap()).unwrap() as f64,
                tape.scalar(loss_inter_sphere(&tape, mh, my, t).unwrap()).unwrap() as f64,
            )
        };
        let a = eval(&h_rows, &y_rows);
        let b = eval(&ph, &py);
        assert!((a.0 - b.0).abs() < 1e-6);
        assert!((a.1 - b.1).abs() < 1e-6);
        assert!((a.2 - b.2).abs() < 1e-6);
    }

    #[test]
    fn losses_are_rotation_invariant() {
        let n = 4;
        let d = 6;
        let h_rows = unit_rows(9, n, d);
        let y_rows = unit_rows(10, n, d);

        // Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
        let mut r = rng::stream(11, &[5]);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let cand: Vec<f64> = rng::standard_normal_vec(&mut r, d)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            let mut v = cand;
            for existing in &q {
                let dot: f64 = v.iter().zip(existing).map(|(a, b)| a * b).sum();
                for (vi, ei) in v.iter_mut().zip(existing) {
                    *vi -= dot * ei;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let rotate = |rows: &[Vec<f32>]| -> Vec<Vec<f32>> {
            rows.iter()
                .map(|row| {
                    q.iter()
                        .map(|col| {
                            col.iter()
                                .zip(row)
                                .map(|(c, v)| c * (*v as f64))
                                .sum::<f64>() as f32
                        })
                        .collect()
                })
                .collect()
        };

        let eval = |h: &[Vec<f32>], y: &[Vec<f32>]| -> (f64, f64, f64) {
            let tape = Tape::new();
            let mh = mat(&tape, h);
            let my = mat(&tape, y);
            let t = tau_const(&tape, 0.15);
            (
                tape.scalar(loss_modal(&tape, mh, my, t).unwrap()).unwrap() as f64,
                tape.scalar(loss_content(&tape, mh, my, t).unwrap()).unwrap() as f64,
                tape.scalar(loss_inter_sphere(&tape, mh, my, t).unwrap()).unwrap() as f64,
            )
        };
        let a = eval(&h_rows, &y_rows);
        let b = eval(&rotate(&h_rows), &rotate(&y_rows));
        assert!((a.0 - b.0).abs() < 1e-5);
        assert!((a.1 - b.1).abs() < 1e-5);
        assert!((a.2 - b.2).abs() < 1e-5);
    }

    #[test]
    fn info_nce_is_nonnegative_on_random_inputs() {
        for seed in 0..20u64 {
            let rows = unit_rows(seed, 6, 5);
            let tape = Tape::new();
            let z = tape.constant(Tensor::new(vec![5], rows[0].clone()).unwrap());
            let pos = mat(&tape, &rows[1..3]);
            let neg = mat(&tape, &rows[3..6]);
            let t = tau_const(&tape, 0.2);
            let l = tape.scalar(info_nce(&tape, z, pos, neg, t).unwrap()).unwrap();
            assert!(l >= 0.0, "loss {l}");
        }
    }

    // ---- gradients ----------------------------------------------------------------

    #[test]
    fn loss_gradients_match_finite_differences() {
        let n = 4;
        let d = 5;
        let h_rows = unit_rows(21, n, d);
        let y_rows = unit_rows(22, n, d);
        let hv = Var::new(
            Tensor::new(vec![n, d], h_rows.iter().flatten().copied().collect()).unwrap(),
        );
        let yv = Var::new(
            Tensor::new(vec![n, d], y_rows.iter().flatten().copied().collect()).unwrap(),
        );

        for which in 0..3usize {
            let build = |tape: &Tape| -> NodeId {
                let mh = tape.leaf(&hv);
                let my = tape.leaf(&yv);
                let t = tau_const(tape, 0.25);
                match which {
                    0 => loss_modal(tape, mh, my, t).unwrap(),
                    1 => loss_content(tape, mh, my, t).unwrap(),
                    _ => loss_inter_sphere(tape, mh, my, t).unwrap(),
                }
            };
            hv.zero_grad();
            yv.zero_grad();
            let tape = Tape::new();
            let loss = build(&tape);
            tape.backward(loss).unwrap();
            for var in [&hv, &yv] {
                let analytic = var.grad_vec();
                for i in 0..var.numel() {
                    let orig = var.value().data()[i];
                    var.value_mut().data_mut()[i] = orig + 1e-3;
                    let up = {
                        let t2 = Tape::new();
                        t2.scalar(build(&t2)).unwrap()
                    };
                    var.value_mut().data_mut()[i] = orig - 1e-3;
                    let down = {
                        let t2 = Tape::new();
                        t2.scalar(build(&t2)).unwrap()
                    };
                    var.value_mut().data_mut()[i] = orig;
                    let fd = (up - down) / 2e-3;
                    let a = analytic[i];
                    // Loss values sit near 2.8, so the f32 difference
                    // quotient carries ~3e-4 absolute noise; below the guard
                    // the check is effectively absolute at 5e-4.
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(0.5);
                    assert!(rel < 1e-3, "loss {which}, coord {i}: {a} vs {fd}");
                }
            }
        }
    }

    // ---- alignment / uniformity ------------------------------------------------------

    #[test]
    fn alignment_zero_for_equal_sets() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let (align, _) = alignment_uniformity(&t, &t);
        assert_eq!(align, 0.0);
    }

    #[test]
    fn uniformity_matches_scalar_evaluation_for_antipodal_rows() {
        // Rows p and -p in both sets: four unmatched pairs, all at squared
        // distance 4, so uniform = ln(exp(-8)).
        let za = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let zb = za.clone();
        let (_, uniform) = alignment_uniformity(&za, &zb);
        assert!((uniform - (-8.0)).abs() < 1e-9, "{uniform}");
    }

    #[test]
    fn alignment_decreases_as_rows_interpolate() {
        let n = 6;
        let d = 4;
        let a_rows = unit_rows(31, n, d);
        let b_rows = unit_rows(32, n, d);
        let blend = |t: f32| -> Tensor {
            let data: Vec<f32> = a_rows
                .iter()
                .zip(&b_rows)
                .flat_map(|(ra, rb)| {
                    ra.iter()
                        .zip(rb)
                        .map(|(x, y)| x + t * (y - x))
                        .collect::<Vec<f32>>()
                })
                .collect();
            Tensor::new(vec![n, d], data).unwrap()
        };
        let za = Tensor::new(vec![n, d], a_rows.iter().flatten().copied().collect()).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..5 {
            let t = step as f32 / 4.0;
            let (align, _) = alignment_uniformity(&za, &blend(1.0 - t));
            assert!(align <= last + 1e-12, "step {step}: {align} > {last}");
            last = align;
        }
    }

    #[test]
    fn tau_param_stays_positive() {
        let tau = TauParam::new(0.07);
        assert!((tau.value() - 0.07).abs() < 1e-6);
        // Push log_tau strongly negative; the effective value stays > 0.
        tau.named_params()[0].1.value_mut().data_mut()[0] = -30.0;
        assert!(tau.value() > 0.0);
    }

    #[test]
    fn losses_reject_batch_of_one() {
        let tape = Tape::new();
        let one = mat(&tape, &[vec![1.0, 0.0]]);
        let t = tau_const(&tape, 0.1);
        assert!(matches!(
            loss_modal(&tape, one, one, t),
            Err(ContrastiveError::BatchTooSmall(1))
        ));
    }
}
