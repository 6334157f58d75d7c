//! Forward kernels over plain tensors. The graph records these and supplies
//! the matching backward rules; they are also used directly at inference.

use super::{Float, Tensor};
use crate::error::{dim_err, Result};

/// Additive mask value for disallowed softmax entries.
pub fn mask_sentinel<F: Float>() -> F {
    F::neg_infinity()
}

/// Raw row-major GEMM: `op(a)[m×k] · op(b)[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    m: usize,
    n: usize,
    k: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    out: &mut [F],
) {
    debug_assert_eq!(out.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == F::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (c, &bv) in row.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == F::zero() {
                        continue;
                    }
                    let row = &mut out[i * n..(i + 1) * n];
                    for (c, &bv) in row.iter_mut().zip(brow) {
                        *c += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

fn dot<F: Float>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(F::zero(), |t, (&a, &b)| t + a * b);
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().fold(tail, |t, &v| t + v)
}

/// `a[m×k] · b[k×n]`, or `a · bᵀ` with `b[n×k]` when `trans_b` is set.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return dim_err(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if k != kb {
        return dim_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { "^T" } else { "" }
        ));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(m, n, k, a.data(), false, b.data(), trans_b, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Batched matmul over the leading dimension: `[b,m,k]·[b,k,n]` (or `[b,n,k]`
/// transposed when `trans_b`).
pub fn bmm<F: Float>(a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
    if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
        return dim_err(format!(
            "bmm expects [b,m,k] and [b,k,n], got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (kb, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if k != kb {
        return dim_err(format!(
            "bmm inner dimensions differ: {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { "^T" } else { "" }
        ));
    }
    let mut out = vec![F::zero(); bs * m * n];
    for t in 0..bs {
        gemm(
            m,
            n,
            k,
            &a.data()[t * m * k..(t + 1) * m * k],
            false,
            &b.data()[t * k * n..(t + 1) * k * n],
            trans_b,
            &mut out[t * m * n..(t + 1) * m * n],
        );
    }
    Tensor::new(vec![bs, m, n], out)
}

/// How a right operand maps onto a left operand's elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` equals the trailing dims of `a`: index `i % len`.
    Trailing(usize),
    /// `b` equals `a` with the last dim collapsed to 1: index `i / d`.
    PerRow(usize),
}

impl Broadcast {
    pub(crate) fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self::Same);
        }
        if b.len() < a.len() && a.ends_with(b) {
            return Ok(Self::Trailing(b.iter().product()));
        }
        if a.len() == b.len()
            && b.last() == Some(&1)
            && a[..a.len() - 1] == b[..b.len() - 1]
        {
            return Ok(Self::PerRow(*a.last().expect("non-empty")));
        }
        dim_err(format!("shapes {a:?} and {b:?} are not broadcast-compatible"))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match *self {
            Self::Same => i,
            Self::Trailing(len) => i % len,
            Self::PerRow(d) => i / d,
        }
    }
}

pub fn add<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x + y)
}

pub fn mul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x * y)
}

fn binary<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    let bc = Broadcast::resolve(a.shape(), b.shape())?;
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bc.index(i)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[inline]
pub fn sigmoid_scalar<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

pub fn swish<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn relu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Row-wise softmax over the last dimension with an optional additive mask
/// (0 or [`mask_sentinel`]) broadcast over trailing dims. Rows with every
/// entry masked come out as all zeros.
pub fn softmax_rows<F: Float>(x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let n = x.last_dim();
    let bc = match mask {
        Some(m) => Some(Broadcast::resolve(x.shape(), m.shape())?),
        None => None,
    };
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        if let (Some(m), Some(bc)) = (mask, &bc) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += m.data()[bc.index(r * n + j)];
            }
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            row.iter_mut().for_each(|v| *v = F::zero());
            continue;
        }
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalized values and per-row inverse std, retained for backward.
pub(crate) struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn layer_norm_impl<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return dim_err(format!(
            "layer_norm over last dim {d} needs gain/bias of shape [{d}], got {:?} / {:?}",
            gain.shape(),
            bias.shape()
        ));
    }
    let rows = x.rows();
    let df = F::of(d as f64);
    let mut out = vec![F::zero(); x.numel()];
    let mut xhat = vec![F::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { xhat, inv_std },
    ))
}

/// Layer normalization over the last dimension.
pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    layer_norm_impl(x, gain, bias, eps).map(|(t, _)| t)
}

/// Rows of a 2-D table (or of any tensor viewed as `[rows, last_dim]`).
pub fn gather_rows<F: Float>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let d = table.last_dim();
    let rows = table.rows();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(crate::Error::Index {
                what: "gather table",
                index: id,
                size: rows,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    if ids.is_empty() {
        return dim_err("gather with no indices");
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Axis permutation (copying).
pub fn permute<F: Float>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return dim_err(format!(
            "invalid permutation {axes:?} for shape {:?}",
            x.shape()
        ));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        out.push(x.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sum over the last dimension: `[..., d] -> [...]` (a `[d]` input gives `[1]`).
pub fn sum_last<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let d = x.last_dim();
    let data: Vec<F> = x.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
    let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, data).expect("consistent shape")
}
