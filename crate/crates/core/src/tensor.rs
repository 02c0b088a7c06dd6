//! Dense row-major `f32` tensors.
//!
//! Only the handful of operations the embedding networks need are provided.
//! Every reduction runs in a fixed sequential order so results are
//! bit-reproducible across runs and platforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Index of a tensor dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis(pub usize);

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a rank-2 tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::dim(format!("row {i} has {} columns, expected {n}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_rank2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(format!("{what} must be rank 2, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.expect_rank2("transpose operand")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Matrix product `a · b`. Each output element accumulates over the
    /// inner dimension strictly left to right in `f32`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_rank2("matmul lhs")?;
        let (k2, n) = b.expect_rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `a · bᵀ`, with the same accumulation order as [`Tensor::matmul`].
    pub fn matmul_transposed(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_rank2("matmul lhs")?;
        let (n, k2) = b.expect_rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{n},{k2}]^T"
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out.push(acc);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Global extrema, or extrema reduced over `axis`.
    ///
    /// Without an axis both results are rank-0 scalars. With an axis the
    /// reduced dimension is dropped from the shape, so `[[1,-2],[4,0]]`
    /// reduced over axis 0 gives `min = [1,-2]`, `max = [4,0]`.
    pub fn reduce_extrema(&self, axis: Option<Axis>) -> Result<(Tensor, Tensor)> {
        if self.data.is_empty() {
            return Err(Error::domain("extrema of an empty tensor"));
        }
        let Some(Axis(k)) = axis else {
            let (lo, hi) = extrema(&self.data);
            return Ok((Tensor::scalar(lo), Tensor::scalar(hi)));
        };
        if k >= self.shape.len() {
            return Err(Error::dim(format!(
                "axis {k} out of range for rank {}",
                self.shape.len()
            )));
        }
        let outer: usize = self.shape[..k].iter().product();
        let n = self.shape[k];
        let inner: usize = self.shape[k + 1..].iter().product();
        let mut lo = vec![f32::INFINITY; outer * inner];
        let mut hi = vec![f32::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let slot = o * inner + i;
                    lo[slot] = lo[slot].min(v);
                    hi[slot] = hi[slot].max(v);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(k);
        Ok((Tensor::new(shape.clone(), lo)?, Tensor::new(shape, hi)?))
    }

    /// Extrema of every slice along `axis`: result `c` covers all elements
    /// whose index along `axis` is `c`.
    pub fn slice_extrema(&self, axis: Axis) -> Result<Vec<(f32, f32)>> {
        if self.data.is_empty() {
            return Err(Error::domain("extrema of an empty tensor"));
        }
        let k = axis.0;
        if k >= self.shape.len() {
            return Err(Error::dim(format!(
                "axis {k} out of range for rank {}",
                self.shape.len()
            )));
        }
        let n = self.shape[k];
        let inner: usize = self.shape[k + 1..].iter().product();
        let mut out = vec![(f32::INFINITY, f32::NEG_INFINITY); n];
        for (i, &v) in self.data.iter().enumerate() {
            let c = (i / inner) % n;
            out[c].0 = out[c].0.min(v);
            out[c].1 = out[c].1.max(v);
        }
        Ok(out)
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let (m, d) = self.expect_rank2("l2_normalize operand")?;
        let mut out = Vec::with_capacity(m * d);
        for i in 0..m {
            let row = self.row(i);
            let norm = row_norm(row);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::domain(format!("row {i} has norm {norm}")));
            }
            out.extend(row.iter().map(|&v| v / norm));
        }
        Tensor::new(vec![m, d], out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Adds `bias` (length = number of columns) to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.expect_rank2("add_row operand")?;
        if bias.len() != n {
            return Err(Error::dim(format!("bias length {} != columns {n}", bias.len())));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a rank-2 tensor, accumulated top to bottom.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, n) = self.expect_rank2("sum_rows operand")?;
        let mut out = vec![0.0f32; n];
        for row in self.data.chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Euclidean norm of a row, accumulated left to right in `f32`.
pub(crate) fn row_norm(row: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for &v in row {
        acc += v * v;
    }
    acc.sqrt()
}

fn extrema(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
