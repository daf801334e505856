//! Dense row-major `f64` tensors.
//!
//! Shape conventions used across the crate:
//! - matrices are `[rows, cols]`, stored row-major;
//! - a sequence of hidden states is `[positions, d_model]`;
//! - logits are `[positions, vocab]`, velocities `[latent_rows, d_lat]`;
//! - a scalar is shape `[1]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row width: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += s * other`, shapes must agree.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Copies the listed rows into a new `[idx.len(), cols]` matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Row-wise concatenation of matrices with equal width.
    pub fn vstack(parts: &[&Tensor]) -> Result<Self> {
        let cols = parts.iter().find(|p| p.rows() > 0).map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rows() == 0 {
                continue;
            }
            if p.cols() != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    lhs: vec![rows, cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[m, n]);
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out.data, false);
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        let c = self.cols();
        if c > 0 {
            for row in out.data.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// `c (+)= op(a) * op(b)` where `a` is `m×k` after the optional transpose and
/// `b` is `k×n`. Storage of a transposed operand is its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked against m, k, n above and the
    // strides describe row-major storage of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sum over selected rows of `weights[i] * -log softmax(logits[i])[targets[i]]`,
/// divided by the number of selected rows. Zero when nothing is selected.
pub fn masked_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    loss_mask: &[bool],
    weights: &[f64],
) -> Result<f64> {
    check_ce_args(logits, targets, loss_mask, weights)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..logits.rows() {
        if loss_mask[i] {
            total -= weights[i] * log_softmax_at(logits.row(i), targets[i]);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub(crate) fn check_ce_args(
    logits: &Tensor,
    targets: &[usize],
    loss_mask: &[bool],
    weights: &[f64],
) -> Result<()> {
    let n = logits.rows();
    if targets.len() != n || loss_mask.len() != n || weights.len() != n {
        return Err(Error::Shape {
            op: "masked_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), loss_mask.len(), weights.len()],
        });
    }
    let vocab = logits.cols();
    for i in 0..n {
        if loss_mask[i] && targets[i] >= vocab {
            return Err(Error::Contract(format!(
                "target id {} at position {i} outside vocabulary of {vocab}",
                targets[i]
            )));
        }
        if loss_mask[i] && weights[i] < 0.0 {
            return Err(Error::Contract(format!("negative weight at position {i}")));
        }
    }
    Ok(())
}

/// Mean over selected rows of the squared L2 distance between `pred` and `target`.
pub fn masked_mse(pred: &Tensor, target: &Tensor, loss_mask: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || loss_mask.len() != pred.rows() {
        return Err(Error::Shape {
            op: "masked_mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.rows() {
        if loss_mask[i] {
            total += pred
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expected = naive_matmul(&a, &b);
        assert_eq!(expected.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_16x16() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::new(vec![16, 16], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-300) || (x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn transposed_gemm_operands() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0]]).unwrap();
        // aᵀ (3×2) · b (2×2)
        let mut c = vec![0.0; 6];
        gemm(3, 2, 2, a.data(), true, b.data(), false, &mut c, false);
        assert_eq!(c, naive_matmul(&a.transpose(), &b).into_data());
        // a (2×3) · aᵀ (3×2)
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), false, a.data(), true, &mut c, false);
        assert_eq!(c, naive_matmul(&a, &a.transpose()).into_data());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -1000.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let s = t.softmax_rows();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(s.is_finite());
        assert!((s.get(1, 0) - 1.0).abs() < 1e-15);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            assert!((s.get(2, j) - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut logits = Tensor::full(&[3, 8], -1e4);
        let targets = vec![1, 5, 7];
        for (i, &t) in targets.iter().enumerate() {
            logits.data_mut()[i * 8 + t] = 1e4;
        }
        let mask = vec![true; 3];
        let w = vec![1.0; 3];
        assert_eq!(masked_cross_entropy(&logits, &targets, &mask, &w).unwrap(), 0.0);

        let uniform = Tensor::zeros(&[3, 8]);
        let ce = masked_cross_entropy(&uniform, &targets, &mask, &w).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-14);

        assert_eq!(masked_cross_entropy(&uniform, &targets, &[false; 3], &w).unwrap(), 0.0);
        let err = masked_cross_entropy(&uniform, &[1, 8, 2], &mask, &w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn mse_examples() {
        let target = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]).unwrap();
        assert_eq!(masked_mse(&target, &target, &[true; 3]).unwrap(), 0.0);
        let shifted = target.map(|v| v + 1.0);
        assert!((masked_mse(&shifted, &target, &[true; 3]).unwrap() - 2.0).abs() < 1e-15);
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 4.5], vec![9.0, 9.0]]).unwrap();
        assert_eq!(masked_mse(&pred, &target, &[false, true, false]).unwrap(), 25.0);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f64..1e4, 1..24)) {
            let n = row.len();
            let s = Tensor::new(vec![1, n], row).unwrap().softmax_rows();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }
}
