//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built from.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]` with numpy-style
    /// broadcasting over the leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::shape("matmul", &self.shape, &other.shape);
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (m, k) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (k2, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = &self.shape[..self.rank() - 2];
        let batch_b = &other.shape[..other.rank() - 2];
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(err)?;
        let nb: usize = batch.iter().product();
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ia = broadcast_index(bi, &batch, batch_a);
            let ib = broadcast_index(bi, &batch, batch_b);
            gemm_nn(
                &self.data[ia * m * k..(ia + 1) * m * k],
                &other.data[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Tensor::new(&shape, out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Sums a broadcast result back down to `shape` (leading dims only).
    pub(crate) fn sum_to_shape(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let inner: usize = shape[shape.len() - 2..].iter().product();
        let full_batch = &self.shape[..self.rank() - 2];
        let tgt_batch = &shape[..shape.len() - 2];
        let mut out = vec![0.0; shape.iter().product()];
        let nb: usize = full_batch.iter().product();
        for bi in 0..nb {
            let ti = broadcast_index(bi, full_batch, tgt_batch);
            let src = &self.data[bi * inner..(bi + 1) * inner];
            for (o, s) in out[ti * inner..(ti + 1) * inner].iter_mut().zip(src) {
                *o += s;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data: out,
        }
    }
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps a flat index in the broadcast batch shape to the flat index of an
/// operand's (possibly smaller) batch shape.
fn broadcast_index(flat: usize, full: &[usize], part: &[usize]) -> usize {
    let offset = full.len() - part.len();
    let mut rem = flat;
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..full.len()).rev() {
        let coord = rem % full[d];
        rem /= full[d];
        if d >= offset {
            let pd = part[d - offset];
            if pd != 1 {
                idx += coord * stride;
            }
            stride *= pd;
        }
    }
    idx
}

/// `out += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
