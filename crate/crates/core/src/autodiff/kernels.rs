//! Forward and vector-Jacobian kernels for each op kind.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn require2(op: &'static str, t: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| mismatch(op, t.shape(), other.shape()))
}

fn build(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced inconsistent shape")
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    build(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(build(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    ))
}

/// `c = a · b` (or `a · bᵀ`), row-major.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, transpose_rhs: bool) -> Result<Tensor> {
    let (m, k) = require2("matmul", a, b)?;
    let (br, bc) = require2("matmul", b, a)?;
    let (kb, n, rsb, csb) = if transpose_rhs {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != kb {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; m * n];
    // SAFETY: pointers and strides describe the full extent of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(build(vec![m, n], c))
}

/// `c = aᵀ · b`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require2("matmul", a, b)?;
    let (kb, n) = require2("matmul", b, a)?;
    if k != kb {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; m * n];
    // SAFETY: as above; `a` is read column-major to realize the transpose.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(build(vec![m, n], c))
}

pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = require2("layer-norm", x, gain)?;
    let gain_ok = matches!(gain.shape(), [g] if *g == d) || gain.shape() == [1, d];
    if !gain_ok {
        return Err(mismatch("layer-norm", x.shape(), gain.shape()));
    }
    let g = gain.data();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = x.row(i);
        let (mean, inv_std) = row_stats(row, eps);
        for j in 0..d {
            out[i * d + j] = g[j] * (row[j] - mean) * inv_std;
        }
    }
    Ok(build(vec![n, d], out))
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_vjp(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = x.dims2().unwrap();
    let g = gain.data();
    let mut dx = vec![0.0; n * d];
    let mut dgain = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let row = x.row(i);
        let dyr = dy.row(i);
        let (mean, inv_std) = row_stats(row, eps);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = dyr[j] * g[j];
            dgain[j] += dyr[j] * xhat[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[i * d + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (
        build(vec![n, d], dx),
        build(gain.shape().to_vec(), dgain),
    )
}

fn softmax_row(src: &[f64], dst: &mut [f64], visible: usize) {
    let max = src[..visible]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in dst[..visible].iter_mut().zip(&src[..visible]) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in &mut dst[..visible] {
        *o /= total;
    }
    for o in &mut dst[visible..] {
        *o = 0.0;
    }
}

/// Softmax over the last axis. With `causal`, row `i` only sees columns
/// `0..=i` and the rest are exactly zero.
pub(crate) fn softmax(x: &Tensor, causal: bool) -> Result<Tensor> {
    let cols = *x.shape().last().unwrap();
    let rows = x.len() / cols;
    if causal && (x.rank() != 2 || rows != cols) {
        return Err(mismatch("softmax", x.shape(), &[rows, rows]));
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        let visible = if causal { i + 1 } else { cols };
        softmax_row(x.row(i), &mut out[i * cols..(i + 1) * cols], visible);
    }
    Ok(build(x.shape().to_vec(), out))
}

pub(crate) fn softmax_vjp(y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = *y.shape().last().unwrap();
    let rows = y.len() / cols;
    let mut dx = vec![0.0; y.len()];
    for i in 0..rows {
        let yr = y.row(i);
        let gr = dy.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..cols {
            dx[i * cols + j] = yr[j] * (gr[j] - dot);
        }
    }
    build(y.shape().to_vec(), dx)
}

pub(crate) fn embedding(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let Some((vocab, d)) = table.dims2() else {
        return Err(mismatch("embedding-lookup", table.shape(), &[indices.len()]));
    };
    if indices.is_empty() {
        return Err(Error::Graph("embedding-lookup with no indices".into()));
    }
    let mut out = Vec::with_capacity(indices.len() * d);
    for &ix in indices {
        if ix >= vocab {
            return Err(Error::Graph(format!(
                "embedding-lookup index {ix} out of range for table {:?}",
                table.shape()
            )));
        }
        out.extend_from_slice(table.row(ix));
    }
    Ok(build(vec![indices.len(), d], out))
}

pub(crate) fn embedding_vjp(table_shape: &[usize], indices: &[usize], dy: &Tensor) -> Tensor {
    let d = table_shape[1];
    let mut grad = Tensor::zeros(table_shape);
    let g = grad.data_mut();
    for (i, &ix) in indices.iter().enumerate() {
        for (acc, v) in g[ix * d..(ix + 1) * d].iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    grad
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

pub(crate) fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let Some((n, k)) = logits.dims2() else {
        return Err(mismatch("cross-entropy", logits.shape(), &[targets.len()]));
    };
    if n != targets.len() {
        return Err(mismatch("cross-entropy", logits.shape(), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Graph(format!(
            "cross-entropy target {bad} out of range for {k} classes"
        )));
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -log_softmax_at(logits.row(i), t))
        .sum();
    Ok(Tensor::scalar(total / n as f64))
}

pub(crate) fn cross_entropy_vjp(logits: &Tensor, targets: &[usize], upstream: f64) -> Tensor {
    let (n, k) = logits.dims2().unwrap();
    let mut grad = vec![0.0; n * k];
    let scale = upstream / n as f64;
    for (i, &t) in targets.iter().enumerate() {
        let dst = &mut grad[i * k..(i + 1) * k];
        softmax_row(logits.row(i), dst, k);
        dst[t] -= 1.0;
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    build(vec![n, k], grad)
}

fn check_slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<(usize, usize)> {
    let (rows, cols) = x
        .dims2()
        .ok_or_else(|| mismatch("slice", x.shape(), &[axis, start, end]))?;
    let extent = if axis == 0 { rows } else { cols };
    if axis > 1 || start >= end || end > extent {
        return Err(mismatch("slice", x.shape(), &[axis, start, end]));
    }
    Ok((rows, cols))
}

/// Half-open `[start, end)` along `axis` of a rank-2 tensor.
pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (rows, cols) = check_slice(x, axis, start, end)?;
    Ok(if axis == 0 {
        build(
            vec![end - start, cols],
            x.data()[start * cols..end * cols].to_vec(),
        )
    } else {
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        build(vec![rows, w], out)
    })
}

pub(crate) fn slice_vjp(shape: &[usize], axis: usize, start: usize, dy: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(shape);
    let cols = shape[1];
    let (dr, dc) = dy.dims2().unwrap();
    let g = grad.data_mut();
    if axis == 0 {
        g[start * cols..(start + dr) * cols].copy_from_slice(dy.data());
    } else {
        for i in 0..dr {
            g[i * cols + start..i * cols + start + dc].copy_from_slice(dy.row(i));
        }
    }
    grad
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Graph("concat of zero tensors".into()))?;
    let (rows, cols) = first
        .dims2()
        .ok_or_else(|| mismatch("concat", first.shape(), &[axis]))?;
    if axis > 1 {
        return Err(mismatch("concat", first.shape(), &[axis]));
    }
    for p in &parts[1..] {
        let ok = match p.dims2() {
            Some((r, c)) => (axis == 0 && c == cols) || (axis == 1 && r == rows),
            None => false,
        };
        if !ok {
            return Err(mismatch("concat", first.shape(), p.shape()));
        }
    }
    Ok(if axis == 0 {
        let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::with_capacity(total * cols);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        build(vec![total, cols], data)
    } else {
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        build(vec![rows, total], data)
    })
}

pub(crate) fn concat_vjp(shapes: &[&[usize]], axis: usize, dy: &Tensor) -> Vec<Tensor> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let extent = s[axis];
            let g = slice(dy, axis, offset, offset + extent).expect("concat gradient slice");
            offset += extent;
            g
        })
        .collect()
}
