//! Dense 64-bit tensors and the reverse-mode tape built on top of them.
//!
//! Values are stored row-major with explicit shapes. There is no
//! broadcasting beyond bias addition; every operation checks shapes and
//! rejects non-finite results.

mod kernel;
pub mod tape;

pub use tape::{Tape, TapeMode, VarId};

use crate::error::{Error, Result};

pub(crate) use kernel::mm;

/// Dense n-dimensional value array with an optional gradient slot.
///
/// `grad` is populated by [`Tape::backward`] for tensors that live on a
/// tape; `node` links a tape-owned tensor back to its tape position.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<VarId>,
}

impl Tensor {
    /// Build a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                detail: "zero-sized dimension".into(),
            });
        }
        if numel != values.len() {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                detail: format!("{} values for {} slots", values.len(), numel),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            grad: None,
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![value],
            grad: None,
            node: None,
        }
    }

    /// 2-D tensor from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::BadShape {
                op: "Tensor::from_rows",
                shape: vec![0],
                detail: "no rows".into(),
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::BadShape {
                op: "Tensor::from_rows",
                shape: vec![rows.len(), cols],
                detail: "ragged rows".into(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers and test perturbations. The caller
    /// is responsible for keeping values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn node(&self) -> Option<VarId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::BadShape {
                op,
                shape: self.shape.clone(),
                detail: "expected 2-D".into(),
            })
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[i * self.shape[1] + j]
    }

    /// Clone row `i` of a 2-D tensor as a `[1, cols]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("Tensor::row")?;
        if i >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: i,
                bound: rows,
            });
        }
        Tensor::new(vec![1, cols], self.values[i * cols..(i + 1) * cols].to_vec())
    }

    /// Copy with no tape reference and no gradient: a plain value.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
            node: None,
        }
    }

    pub(crate) fn set_node(&mut self, id: VarId) {
        self.node = Some(id);
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        self.grad = Some(grad);
    }

    /// Little-endian byte serialization of the values, in storage order.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// C = A · B for 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let values = mm(&a.values, &b.values, m, k, n);
    ensure_finite("matmul", &values)?;
    Tensor::new(vec![m, n], values)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2("softmax_rows")?;
    let values = kernel::softmax_rows_kernel(&m.values, rows, cols);
    ensure_finite("softmax_rows", &values)?;
    Tensor::new(vec![rows, cols], values)
}

/// Per-row standardization followed by the affine transform `gain, bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = x.dims2("layer_norm")?;
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let values = kernel::layer_norm_kernel(&x.values, rows, cols, &gain.values, &bias.values, eps);
    ensure_finite("layer_norm", &values)?;
    Tensor::new(vec![rows, cols], values)
}

/// Mean over the batch of `-log softmax(logits)[label]`. Returns a
/// `[1, 1]` scalar tensor.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = logits.dims2("cross_entropy_loss")?;
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "cross_entropy_loss: {} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    for &l in labels {
        if l >= cols {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: l,
                bound: cols,
            });
        }
    }
    let loss = kernel::cross_entropy_kernel(&logits.values, rows, cols, labels);
    ensure_finite("cross_entropy_loss", std::slice::from_ref(&loss))?;
    Ok(Tensor::scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![rows, cols], values).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c.values(), b.values());
    }

    #[test]
    fn matmul_hand_dot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert!((c.values()[0] - 11.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = stream(11, "matmul-oracle");
        for _ in 0..20 {
            let a = random_tensor(&mut rng, 3, 4);
            let b = random_tensor(&mut rng, 4, 2);
            let c = matmul(&a, &b).unwrap();
            // Independent accumulation order: column-major walk.
            for j in 0..2 {
                for i in 0..3 {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        acc += a.at2(i, t) * b.at2(t, j);
                    }
                    assert!((c.at2(i, j) - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should name shapes: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_single() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert!((s.values()[0] - 0.5).abs() < 1e-15);
        assert!((s.values()[1] - 0.5).abs() < 1e-15);
        let one = softmax_rows(&Tensor::from_rows(&[vec![7.0]]).unwrap()).unwrap();
        assert_eq!(one.values(), &[1.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for j in 0..3 {
            let direct = ((j as f64) + 1.0).exp() / z;
            assert!((s.values()[j] - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = stream(5, "softmax-prop");
        for _ in 0..100 {
            let m = random_tensor(&mut rng, 4, 6);
            let s = softmax_rows(&m).unwrap();
            for i in 0..4 {
                let sum: f64 = (0..6).map(|j| s.at2(i, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
            // Shift each row by a constant; max subtraction makes the
            // result bit-identical.
            let shift: f64 = rng.gen::<f64>() * 10.0 - 5.0;
            let shifted_vals: Vec<f64> = m.values().iter().map(|v| v + shift).collect();
            let shifted = Tensor::new(vec![4, 6], shifted_vals).unwrap();
            let s2 = softmax_rows(&shifted).unwrap();
            // Shifted inputs change the subtracted max by the same
            // constant, so exponent arguments are identical floats.
            assert!(s.max_abs_diff(&s2) <= 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap();
        let gain = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let bias = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-6).unwrap();
        for v in y.values() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_standardized() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let gain = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let bias = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-9);
        assert!((y.values()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = stream(9, "ln-stats");
        let x = random_tensor(&mut rng, 2, 4);
        let gain = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-9).unwrap();
        for i in 0..2 {
            let row: Vec<f64> = (0..4).map(|j| y.at2(i, j)).collect();
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_row() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let loss = cross_entropy_loss(&l, &[0]).unwrap();
        assert!((loss.values()[0] - (2.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_row() {
        let l = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let loss = cross_entropy_loss(&l, &[0]).unwrap();
        // Direct formula: ln(1 + e^(-20)) ~= 2.06e-9.
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss.values()[0] - expected).abs() <= 1e-15);
        assert!(loss.values()[0] > 0.0);
    }

    #[test]
    fn cross_entropy_batch_mean_of_equal_rows() {
        let single = Tensor::from_rows(&[vec![0.3, -0.2, 1.1]]).unwrap();
        let double =
            Tensor::from_rows(&[vec![0.3, -0.2, 1.1], vec![0.3, -0.2, 1.1]]).unwrap();
        let a = cross_entropy_loss(&single, &[2]).unwrap();
        let b = cross_entropy_loss(&double, &[2, 2]).unwrap();
        assert!((a.values()[0] - b.values()[0]).abs() <= 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(cross_entropy_loss(&l, &[2]).is_err());
    }
}
