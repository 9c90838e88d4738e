//! Dense row-major f64 tensors and the pure primitives built on them.
//!
//! Every primitive treats its input as a matrix whose columns are the last
//! dimension and whose rows are all leading dimensions flattened.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, what: &str) -> Result<Tensor> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::Computation(format!("{what} produced a non-finite value")))
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `out[m×n] += a[m×k] · b[k×n]` on raw slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `a[.., k] · b[k, n] -> [.., n]`; `b` must be 2-D.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 || a.cols() != b.shape[0] {
        return Err(Error::Dimension(format!("matmul: {:?} · {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)?.check_finite("matmul")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::Dimension(format!("transpose needs 2-D, got {:?}", a.shape)));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("add")
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("sub")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|x| x * s).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("scale")
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("relu")
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("sigmoid")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let mut out = a.data.clone();
    for row in out.chunks_mut(a.cols()) {
        softmax_in_place(row);
    }
    Tensor::new(a.shape.clone(), out)?.check_finite("softmax_rows")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise `(x - mean) / sqrt(var + 1e-5)` with population variance,
/// no affine part.
pub fn layer_norm_rows(a: &Tensor) -> Result<Tensor> {
    let (out, _) = layer_norm_with_inv_std(a);
    Tensor::new(a.shape.clone(), out)?.check_finite("layer_norm_rows")
}

pub(crate) fn layer_norm_with_inv_std(a: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = a.cols();
    let mut out = a.data.clone();
    let mut inv = Vec::with_capacity(a.rows());
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    (out, inv)
}

/// Concatenates along the last dimension; leading dimensions must agree.
pub fn concat_last_dim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() || a.shape[..a.shape.len() - 1] != b.shape[..b.shape.len() - 1] {
        return Err(Error::Dimension(format!(
            "concat_last_dim: {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[0.0, 3f64.ln()]])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        // stabilized: large logits do not overflow
        let s = softmax_rows(&t(&[&[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_and_shape_errors() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matches!(matmul(&b, &b), Err(Error::Dimension(_))));
        assert!(matches!(add(&a, &b), Err(Error::Dimension(_))));
        let c = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&c, &b).unwrap().shape(), &[2, 1, 1]);
    }

    #[test]
    fn layer_norm_rows_zero_mean_unit_var() {
        let x = t(&[&[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 5.0, 10.0]]);
        let y = layer_norm_rows(&x).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_and_sigmoid() {
        let a = t(&[&[1.0], &[2.0]]);
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = concat_last_dim(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = sigmoid(&Tensor::new(vec![3], vec![0.0, 800.0, -800.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_is_computation_error() {
        let a = Tensor::new(vec![1], vec![f64::MAX]).unwrap();
        assert!(matches!(add(&a, &a), Err(Error::Computation(_))));
    }
}
