//! Fused multi-head attention, `softmax(Q Kᵀ / sqrt(d)) V`.
//!
//! Each query row makes one pass over the keys, keeping a running maximum,
//! running exp-sum and a rescaled output accumulator, so no `L x L` score
//! matrix is ever built. Work is split across workers by query row.

use crate::error::{Error, Result};
use crate::kernels::pool::WorkerPool;
use crate::tensor::Tensor;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, h, l, d) = q.dims4("fused_mha")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape(
            "fused_mha",
            format!("Q {:?}, K {:?}, V {:?} must share [N, heads, L, d]", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((n, h, l, d))
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Streams one query row over its keys; returns `(max, exp_sum)` and leaves
/// the normalized output in `out`.
#[inline]
fn attend_row(qrow: &[f32], keys: &[f32], values: &[f32], d: usize, scale: f32, out: &mut [f32]) -> (f32, f32) {
    let mut m = f32::NEG_INFINITY;
    let mut l = 0.0f32;
    out.fill(0.0);
    for (krow, vrow) in keys.chunks_exact(d).zip(values.chunks_exact(d)) {
        let s = dot(qrow, krow) * scale;
        if s > m {
            let corr = (m - s).exp();
            l *= corr;
            for o in out.iter_mut() {
                *o *= corr;
            }
            m = s;
        }
        let p = (s - m).exp();
        l += p;
        for (o, &vv) in out.iter_mut().zip(vrow) {
            *o += p * vv;
        }
    }
    let inv = 1.0 / l;
    for o in out.iter_mut() {
        *o *= inv;
    }
    (m, l)
}

pub fn fused_mha(q: &Tensor, k: &Tensor, v: &Tensor, pool: &WorkerPool) -> Result<Tensor> {
    let (_, _, l, d) = check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; q.numel()];
    pool.for_each_chunk_mut(&mut out, d, |rows, chunk| {
        for (r, row) in rows.enumerate() {
            let head = row / l;
            let keys = &kd[head * l * d..(head + 1) * l * d];
            let values = &vd[head * l * d..(head + 1) * l * d];
            attend_row(&qd[row * d..(row + 1) * d], keys, values, d, scale, &mut chunk[r * d..(r + 1) * d]);
        }
    });
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

/// Debug variant of [`fused_mha`] that also reports, for every query row, the
/// sum of the implicit attention weights `exp(s_j - max) / exp_sum`.
pub fn fused_mha_instrumented(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (n, h, l, d) = check_qkv(q, k, v)?;
    let scale = 1.0 / (d as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; q.numel()];
    let mut row_sums = Vec::with_capacity(n * h * l);
    for row in 0..n * h * l {
        let head = row / l;
        let keys = &kd[head * l * d..(head + 1) * l * d];
        let values = &vd[head * l * d..(head + 1) * l * d];
        let qrow = &qd[row * d..(row + 1) * d];
        let (m, z) = attend_row(qrow, keys, values, d, scale, &mut out[row * d..(row + 1) * d]);
        let total: f32 = keys.chunks_exact(d).map(|krow| (dot(qrow, krow) * scale - m).exp() / z).sum();
        row_sums.push(total);
    }
    Ok((Tensor::from_parts(q.shape().to_vec(), out), row_sums))
}

/// Attention probabilities for one head, `[L, L]`, materialized. Used by the
/// backward pass, which needs them anyway.
pub(crate) fn attention_probs(q: &[f32], k: &[f32], l: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut p = vec![0.0f32; l * l];
    for i in 0..l {
        let qrow = &q[i * d..(i + 1) * d];
        let prow = &mut p[i * l..(i + 1) * l];
        let mut m = f32::NEG_INFINITY;
        for (j, s) in prow.iter_mut().enumerate() {
            *s = dot(qrow, &k[j * d..(j + 1) * d]) * scale;
            m = m.max(*s);
        }
        let mut z = 0.0f32;
        for s in prow.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        for s in prow.iter_mut() {
            *s /= z;
        }
    }
    p
}
