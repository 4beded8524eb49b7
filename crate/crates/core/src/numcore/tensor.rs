use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Scalars have an empty shape. Most of the crate works with 2-D matrices
/// where a row is one sample or node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {} has {} values, expected {}", i, r.len(), cols),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric { op })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    /// Row-wise arg-max with ties resolved to the lowest column.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Checked matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape, other.shape),
            ));
        }
        Ok(matmul(self, other))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b` for matrices `[n,k]·[k,m]`. Each output row depends only on the
/// matching row of `a`, with the inner sum taken in ascending `k`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// `aᵀ · b` for `[k,n]`, `[k,m]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a.data[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// `a · bᵀ` for `[n,k]`, `[m,k]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn transpose_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1., -1., 0.5, 2.]).unwrap();
        assert_eq!(matmul_tn(&a, &b), matmul(&a.transpose(), &b));
        let c = Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(matmul_nt(&a, &c), matmul(&a, &c.transpose()));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::matrix(2, 3, vec![1., 3., 3., 0., 0., 0.]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }
}
