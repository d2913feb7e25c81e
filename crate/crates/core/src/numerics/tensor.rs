//! Dense row-major `f64` tensors.
//!
//! Every reduction runs in a fixed sequential order (ascending index along the
//! reduced axis) so identical inputs give bit-identical outputs, and a row of a
//! matrix product depends only on the corresponding row of the left operand.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of all entries in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// `c[i][j] = Σ_t a[i][t]·b[t][j]`, accumulated in ascending `t`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &b.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `a · bᵀ`; transposes `b` once, then accumulates like [`Tensor::matmul`].
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = b.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let bt = b.transpose()?;
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &bt.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `aᵀ · b`, accumulated over rows in ascending order.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = b.dims2("matmul_tn")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for t in 0..k {
            let ar = &self.data[t * m..(t + 1) * m];
            let br = &b.data[t * n..(t + 1) * n];
            for (i, &a) in ar.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(br) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len().max(1) {
            return Err(Error::Dimension {
                op: "softmax",
                left: self.shape.clone(),
                right: vec![axis],
            });
        }
        self.check_finite("softmax")?;
        let dims = if self.shape.is_empty() {
            vec![1]
        } else {
            self.shape.clone()
        };
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = self.data[idx(t)];
                }
                softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    out[idx(t)] = *b;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn outer(u: &Tensor, v: &Tensor) -> Result<Tensor> {
        if u.ndim() != 1 || v.ndim() != 1 {
            return Err(Error::Dimension {
                op: "outer",
                left: u.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let (m, n) = (u.numel(), v.numel());
        let mut data = Vec::with_capacity(m * n);
        for &a in &u.data {
            data.extend(v.data.iter().map(|&b| a * b));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    /// Matrix-vector product `a · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, k) = self.dims2("matvec")?;
        if k != x.len() {
            return Err(Error::Dimension {
                op: "matvec",
                left: self.shape.clone(),
                right: vec![x.len()],
            });
        }
        Ok((0..m).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Sequential dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out += a · b` for row-major `a[m×k]`, `b[k×n]`. Loop order i-t-j so each
/// output element accumulates over `t` in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}
