//! Dense row-major f64 tensors and the small set of kernels the rest of the
//! crate builds on.
//!
//! Shapes are plain `Vec<usize>`. Matrix products are batched over leading
//! axes: `[l.., m, k] x [l.., k, n] -> [l.., m, n]`, where either operand may
//! instead be a bare 2-D matrix shared across the batch. No other broadcast
//! exists here.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidParameter(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Linear offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let lay = mm_layout("matmul", &self.shape, &other.shape, false)?;
        let mut out = Tensor::zeros(lay.out_shape.clone());
        for l in 0..lay.lead {
            mm_acc(
                &self.data[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                &other.data[l * lay.b_step..l * lay.b_step + lay.k * lay.n],
                &mut out.data[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                lay.m,
                lay.k,
                lay.n,
            );
        }
        Ok(out)
    }

    /// `self . other^T` on the trailing two axes; `other` is `[l.., n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let lay = mm_layout("matmul_nt", &self.shape, &other.shape, true)?;
        let mut out = Tensor::zeros(lay.out_shape.clone());
        for l in 0..lay.lead {
            mm_nt_acc(
                &self.data[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                &other.data[l * lay.b_step..l * lay.b_step + lay.n * lay.k],
                &mut out.data[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                lay.m,
                lay.k,
                lay.n,
            );
        }
        Ok(out)
    }

    /// Softmax over the last axis, numerically safe for any finite input.
    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape.last().expect("softmax needs at least one axis");
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            softmax_row(row);
        }
        out
    }
}

pub(crate) struct MmLayout {
    pub lead: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Per-batch element strides; 0 when the operand is a shared 2-D matrix.
    pub a_step: usize,
    pub b_step: usize,
    pub out_shape: Vec<usize>,
}

/// Resolves batched matmul shapes. For `nt`, `b` is `[l.., n, k]` and the
/// product contracts over each operand's last axis.
pub(crate) fn mm_layout(op: &'static str, a: &[usize], b: &[usize], nt: bool) -> Result<MmLayout> {
    let bad = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(bad());
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if nt {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if ka != kb {
        return Err(bad());
    }
    let la = &a[..a.len() - 2];
    let lb = &b[..b.len() - 2];
    let (lead_dims, a_step, b_step) = if la == lb {
        (la, m * ka, kb * n)
    } else if lb.is_empty() {
        (la, m * ka, 0)
    } else if la.is_empty() {
        (lb, 0, kb * n)
    } else {
        return Err(bad());
    };
    let lead = lead_dims.iter().product::<usize>().max(1);
    let mut out_shape = lead_dims.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MmLayout {
        lead,
        m,
        k: ka,
        n,
        a_step,
        b_step,
        out_shape,
    })
}

/// out[m,n] += a[m,k] . b[k,n]
pub(crate) fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] . b[n,k]^T
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += dot(a_row, b_row);
        }
    }
}

/// out[k,n] += a[m,k]^T . b[m,n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (q, &aiq) in a_row.iter().enumerate() {
            let out_row = &mut out[q * n..(q + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aiq * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    dot(xs, xs).sqrt()
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Layer norm of one row: (x - mean) / sqrt(pop_var + eps) * g + b.
pub fn ln_row(x: &[f64], g: &[f64], b: &[f64], eps: f64, out: &mut [f64]) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * g[i] + b[i];
    }
}

/// Population variance (divide by N) of all entries.
pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// dst += src permuted by `perm` (dst axis i comes from src axis perm[i]).
/// dst must already hold the permuted shape's element count.
pub(crate) fn permute_acc(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64]) {
    let nd = shape.len();
    debug_assert_eq!(perm.len(), nd);
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut coord = vec![0usize; nd];
    for dv in dst.iter_mut() {
        let mut off = 0;
        for i in 0..nd {
            off += coord[i] * src_strides[perm[i]];
        }
        *dv += src[off];
        for i in (0..nd).rev() {
            coord[i] += 1;
            if coord[i] < out_shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
