//! Self-attention and cross-attention kernels.
//!
//! Queries always come from the sequence being processed; keys and values
//! either derive from the same sequence (SA) or arrive pre-projected from
//! an external source such as a frozen reference model (CA). Both cases
//! run through one code path, so CA with self-derived keys/values is
//! bit-identical to SA.

use crate::error::{Error, Result};
use crate::rng::trunc_normal;
use crate::tensor::{Tape, Tensor, VarId};
use rand_chacha::ChaCha8Rng;

/// Projection weights for one attention sublayer. All four matrices are
/// square `d x d`; `heads` must divide `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(dim: usize, heads: usize, std: f64, clip: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mat = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let values: Vec<f64> = (0..dim * dim).map(|_| trunc_normal(rng, std, clip)).collect();
            Tensor::new(vec![dim, dim], values)
        };
        let params = AttentionParams {
            w_q: mat(rng)?,
            w_k: mat(rng)?,
            w_v: mat(rng)?,
            w_o: mat(rng)?,
            heads,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if m.shape() != [d, d] {
                return Err(Error::Config(format!(
                    "attention matrix {name} has shape {:?}, expected [{d}, {d}]",
                    m.shape()
                )));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide width {d}",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundAttention> {
        Ok(BoundAttention {
            w_q: tape.leaf(&self.w_q)?,
            w_k: tape.leaf(&self.w_k)?,
            w_v: tape.leaf(&self.w_v)?,
            w_o: tape.leaf(&self.w_o)?,
            heads: self.heads,
            dim: self.dim(),
        })
    }
}

/// Tape positions of one sublayer's projection weights.
#[derive(Clone, Debug)]
pub struct BoundAttention {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
    pub heads: usize,
    pub dim: usize,
}

/// The Q/K/V tape ids actually used by a sublayer (recorded for
/// activation regularization and similarity analysis).
#[derive(Clone, Copy, Debug)]
pub struct AttnTrace {
    pub q: VarId,
    pub k: VarId,
    pub v: VarId,
}

/// Q = X W_Q, K = X W_K, V = X W_V on the tape.
pub fn project_qkv_on(
    tape: &mut Tape,
    x: VarId,
    params: &BoundAttention,
) -> Result<(VarId, VarId, VarId)> {
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    Ok((q, k, v))
}

/// Softmax(Q Kᵀ / sqrt(d_head)) V on the tape. Each output row is a
/// convex combination of the rows of V.
pub fn scaled_dot_attention_on(tape: &mut Tape, q: VarId, k: VarId, v: VarId) -> Result<VarId> {
    let (_, dq) = tape.value(q).dims2("scaled_dot_attention")?;
    let (mk, dk) = tape.value(k).dims2("scaled_dot_attention")?;
    let (mv, _) = tape.value(v).dims2("scaled_dot_attention")?;
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    if mk != mv {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: tape.value(k).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dq as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Multi-head attention on the tape.
///
/// Keys and values come from `kv_source` when present (cross-attention)
/// and are split with the same head partition as the queries; otherwise
/// they derive from `x` (self-attention). Logits are scaled by
/// `sqrt(d / heads)`, never `sqrt(d)`, when `heads > 1`.
pub fn multi_head_attention_on(
    tape: &mut Tape,
    x: VarId,
    params: &BoundAttention,
    kv_source: Option<(VarId, VarId)>,
) -> Result<(VarId, AttnTrace)> {
    let (n, d) = tape.value(x).dims2("multi_head_attention")?;
    if d != params.dim {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: vec![n, d],
            rhs: vec![params.dim, params.dim],
        });
    }
    let q = tape.matmul(x, params.w_q)?;
    let (k, v) = match kv_source {
        Some((k, v)) => {
            for id in [k, v] {
                let shape = tape.value(id).shape().to_vec();
                if shape != [n, d] {
                    return Err(Error::ShapeMismatch {
                        op: "multi_head_attention (kv_source)",
                        lhs: shape,
                        rhs: vec![n, d],
                    });
                }
            }
            (k, v)
        }
        None => {
            let k = tape.matmul(x, params.w_k)?;
            let v = tape.matmul(x, params.w_v)?;
            (k, v)
        }
    };

    tape.attn_evals += 1;

    let mixed = if params.heads == 1 {
        scaled_dot_attention_on(tape, q, k, v)?
    } else {
        let dh = params.dim / params.heads;
        let mut parts = Vec::with_capacity(params.heads);
        for h in 0..params.heads {
            let qh = tape.narrow_cols(q, h * dh, dh)?;
            let kh = tape.narrow_cols(k, h * dh, dh)?;
            let vh = tape.narrow_cols(v, h * dh, dh)?;
            parts.push(scaled_dot_attention_on(tape, qh, kh, vh)?);
        }
        tape.concat_cols(&parts)?
    };
    let out = tape.matmul(mixed, params.w_o)?;
    Ok((out, AttnTrace { q, k, v }))
}

// Plain-tensor surfaces; these delegate to the tape builders on an
// eval-mode tape so the values are bit-identical to the trained path.

pub fn project_qkv(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    params.validate()?;
    let mut tape = Tape::eval();
    let xid = tape.leaf(x)?;
    let bound = params.bind(&mut tape)?;
    let (q, k, v) = project_qkv_on(&mut tape, xid, &bound)?;
    Ok((
        tape.value(q).detached(),
        tape.value(k).detached(),
        tape.value(v).detached(),
    ))
}

pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::eval();
    let qid = tape.leaf(q)?;
    let kid = tape.leaf(k)?;
    let vid = tape.leaf(v)?;
    let out = scaled_dot_attention_on(&mut tape, qid, kid, vid)?;
    Ok(tape.value(out).detached())
}

pub fn multi_head_attention(
    x: &Tensor,
    params: &AttentionParams,
    kv_source: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::eval();
    let xid = tape.leaf(x)?;
    let bound = params.bind(&mut tape)?;
    let kv = match kv_source {
        Some((k, v)) => Some((tape.leaf(k)?, tape.leaf(v)?)),
        None => None,
    };
    let (out, _) = multi_head_attention_on(&mut tape, xid, &bound, kv)?;
    Ok(tape.value(out).detached())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    fn identity_params(d: usize, heads: usize) -> AttentionParams {
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.values_mut()[i * d + i] = 1.0;
        }
        AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            heads,
        }
    }

    #[test]
    fn project_qkv_identity_and_zero() {
        let mut rng = stream(1, "attn");
        let x = rand_tensor(&mut rng, 3, 4);
        let params = identity_params(4, 1);
        let (q, k, v) = project_qkv(&x, &params).unwrap();
        assert_eq!(q.values(), x.values());
        assert_eq!(k.values(), x.values());
        assert_eq!(v.values(), x.values());

        let zero = Tensor::zeros(vec![3, 4]);
        let mut p2 = params;
        p2.w_q = rand_tensor(&mut rng, 4, 4);
        let (q, _, _) = project_qkv(&zero, &p2).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_qkv_matches_matmul_oracle() {
        let mut rng = stream(2, "attn-proj");
        let x = rand_tensor(&mut rng, 3, 4);
        let params = AttentionParams::init(4, 2, 0.5, 2.0, &mut rng).unwrap();
        let (q, _, _) = project_qkv(&x, &params).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += x.at2(i, t) * params.w_q.at2(t, j);
                }
                assert!((q.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attends_to_single_value() {
        let mut rng = stream(3, "attn-single");
        let q = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 1, 3);
        let v = rand_tensor(&mut rng, 1, 3);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(out.at2(i, j), v.at2(0, j));
            }
        }
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = stream(4, "attn-uniform");
        let q = rand_tensor(&mut rng, 2, 3);
        let krow: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let k = Tensor::from_rows(&[krow.clone(), krow.clone(), krow]).unwrap();
        let v = rand_tensor(&mut rng, 3, 3);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mean = (v.at2(0, j) + v.at2(1, j) + v.at2(2, j)) / 3.0;
                assert!((out.at2(i, j) - mean).abs() <= 1e-12);
            }
        }
    }

    /// Independent double-loop oracle: per query row, compute scores,
    /// softmax, and the value mixture with explicit loops.
    pub(crate) fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (n, dh) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        let dv = v.shape()[1];
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let mut scores = vec![0.0; m];
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..dh {
                    s += q.at2(i, t) * k.at2(j, t);
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..m {
                let w = exps[j] / z;
                for t in 0..dv {
                    out[i * dv + t] += w * v.at2(j, t);
                }
            }
        }
        Tensor::new(vec![n, dv], out).unwrap()
    }

    #[test]
    fn scaled_dot_matches_double_loop_oracle() {
        let mut rng = stream(5, "attn-oracle");
        for _ in 0..50 {
            let q = rand_tensor(&mut rng, 4, 8);
            let k = rand_tensor(&mut rng, 4, 8);
            let v = rand_tensor(&mut rng, 4, 8);
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            let oracle = attention_oracle(&q, &k, &v);
            assert!(out.max_abs_diff(&oracle) <= 1e-12);
        }
    }

    #[test]
    fn output_rows_are_convex_combinations_of_values() {
        let mut rng = stream(6, "attn-convex");
        for _ in 0..50 {
            let q = rand_tensor(&mut rng, 3, 4);
            let k = rand_tensor(&mut rng, 5, 4);
            let v = rand_tensor(&mut rng, 5, 4);
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            // Recompute the weights independently and check simplex
            // membership plus reconstruction.
            for i in 0..3 {
                let mut scores = vec![0.0; 5];
                for j in 0..5 {
                    for t in 0..4 {
                        scores[j] += q.at2(i, t) * k.at2(j, t);
                    }
                    scores[j] /= 2.0; // sqrt(4)
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
                assert!(weights.iter().all(|&w| w >= 0.0));
                assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for t in 0..4 {
                    let mix: f64 = (0..5).map(|j| weights[j] * v.at2(j, t)).sum();
                    assert!((out.at2(i, t) - mix).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn ca_with_self_derived_cache_is_bit_identical_to_sa() {
        let mut rng = stream(7, "attn-coincide");
        for heads in [1usize, 2, 4] {
            let x = rand_tensor(&mut rng, 5, 8);
            let params = AttentionParams::init(8, heads, 0.3, 2.0, &mut rng).unwrap();
            let sa = multi_head_attention(&x, &params, None).unwrap();
            let k = crate::tensor::matmul(&x, &params.w_k).unwrap();
            let v = crate::tensor::matmul(&x, &params.w_v).unwrap();
            let ca = multi_head_attention(&x, &params, Some((&k, &v))).unwrap();
            assert_eq!(sa.le_bytes(), ca.le_bytes());
        }
    }

    #[test]
    fn single_head_equals_scaled_dot_with_output_projection() {
        let mut rng = stream(8, "attn-h1");
        let x = rand_tensor(&mut rng, 4, 6);
        let params = AttentionParams::init(6, 1, 0.4, 2.0, &mut rng).unwrap();
        let mha = multi_head_attention(&x, &params, None).unwrap();
        let (q, k, v) = project_qkv(&x, &params).unwrap();
        let attn = scaled_dot_attention(&q, &k, &v).unwrap();
        let manual = crate::tensor::matmul(&attn, &params.w_o).unwrap();
        assert_eq!(mha.le_bytes(), manual.le_bytes());
    }

    #[test]
    fn two_heads_match_manual_head_split() {
        let mut rng = stream(9, "attn-h2");
        let x = rand_tensor(&mut rng, 3, 8);
        let params = AttentionParams::init(8, 2, 0.4, 2.0, &mut rng).unwrap();
        let mha = multi_head_attention(&x, &params, None).unwrap();

        let (q, k, v) = project_qkv(&x, &params).unwrap();
        let slice_cols = |t: &Tensor, start: usize| -> Tensor {
            let mut vals = Vec::new();
            for i in 0..3 {
                for j in start..start + 4 {
                    vals.push(t.at2(i, j));
                }
            }
            Tensor::new(vec![3, 4], vals).unwrap()
        };
        // Heads use sqrt(d/h) = sqrt(4) scaling via the oracle on 4-wide slices.
        let h0 = attention_oracle(&slice_cols(&q, 0), &slice_cols(&k, 0), &slice_cols(&v, 0));
        let h1 = attention_oracle(&slice_cols(&q, 4), &slice_cols(&k, 4), &slice_cols(&v, 4));
        let mut concat = Vec::new();
        for i in 0..3 {
            concat.extend((0..4).map(|j| h0.at2(i, j)));
            concat.extend((0..4).map(|j| h1.at2(i, j)));
        }
        let merged = Tensor::new(vec![3, 8], concat).unwrap();
        let manual = crate::tensor::matmul(&merged, &params.w_o).unwrap();
        assert!(mha.max_abs_diff(&manual) <= 1e-12);
    }

    #[test]
    fn permuting_input_rows_permutes_sa_output_rows() {
        let mut rng = stream(10, "attn-perm");
        let x = rand_tensor(&mut rng, 5, 8);
        let params = AttentionParams::init(8, 2, 0.4, 2.0, &mut rng).unwrap();
        let out = multi_head_attention(&x, &params, None).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let permuted_rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| (0..8).map(|j| x.at2(i, j)).collect())
            .collect();
        let xp = Tensor::from_rows(&permuted_rows).unwrap();
        let outp = multi_head_attention(&xp, &params, None).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((outp.at2(new_row, j) - out.at2(old_row, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn kv_source_shape_mismatch_is_rejected() {
        let mut rng = stream(11, "attn-kv-shape");
        let x = rand_tensor(&mut rng, 4, 8);
        let params = AttentionParams::init(8, 2, 0.4, 2.0, &mut rng).unwrap();
        let bad_k = rand_tensor(&mut rng, 3, 8);
        let v = rand_tensor(&mut rng, 4, 8);
        let err = multi_head_attention(&x, &params, Some((&bad_k, &v))).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
