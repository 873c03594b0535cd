//! Forward and backward rules for the fixed op set.
//!
//! Everything here is a pure function of its inputs. The tape records which
//! of these ran; inference executors call the forwards directly, so training
//! and inference share one arithmetic path.

use crate::error::{Error, Result};
use crate::kernels::attention::{attention_probs, fused_mha};
use crate::kernels::conv::{col2im, conv2d_f32, conv_shapes, im2col};
use crate::kernels::gemm::{sgemm, transpose};
use crate::kernels::groupnorm::{groupnorm_channel_parallel_with_stats, GroupNormSpec, GroupStats};
use crate::kernels::pool::WorkerPool;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---- linear ---------------------------------------------------------------

/// `x[N,D] · w[D,E] + b[E]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, d) = x.dims2("linear")?;
    let (wd, e) = w.dims2("linear")?;
    if d != wd {
        return Err(Error::shape(
            "linear",
            format!("input is {n}x{d} but weight is {wd}x{e} (inner dimensions differ)"),
        ));
    }
    if let Some(b) = b {
        if b.numel() != e {
            return Err(Error::shape("linear", format!("bias has {} entries for {e} outputs", b.numel())));
        }
    }
    let mut out = vec![0.0f32; n * e];
    sgemm(n, e, d, x.data(), w.data(), &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_exact_mut(e) {
            for (y, bv) in row.iter_mut().zip(b.data()) {
                *y += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, e], out))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let e = w.shape()[1];
    let wt = transpose(d, e, w.data());
    let mut dx = vec![0.0f32; n * d];
    sgemm(n, d, e, dy.data(), &wt, &mut dx, false);
    let xt = transpose(n, d, x.data());
    let mut dw = vec![0.0f32; d * e];
    sgemm(d, e, n, &xt, dy.data(), &mut dw, false);
    let mut db = vec![0.0f32; e];
    for row in dy.data().chunks_exact(e) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    (Tensor::from_parts(vec![n, d], dx), Tensor::from_parts(vec![d, e], dw), Tensor::from_parts(vec![e], db))
}

// ---- conv2d ---------------------------------------------------------------

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_f32(x, w, b, stride, padding)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, o, g) = conv_shapes(x.shape(), w.shape(), None, stride, padding)?;
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let wt = transpose(o, k, w.data());
    let mut dx = vec![0.0f32; x.numel()];
    // Accumulated transposed, as dWᵀ += cols · dYᵀ, so only the small dY is transposed.
    let mut dw_t = vec![0.0f32; k * o];
    let mut db = vec![0.0f32; o];
    let mut cols = vec![0.0f32; k * p];
    let mut dcols = vec![0.0f32; k * p];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let dys = &dy.data()[s * o * p..(s + 1) * o * p];
        im2col(xs, &g, &mut cols);
        sgemm(k, o, p, &cols, &transpose(o, p, dys), &mut dw_t, true);
        // dcols = Wᵀ · dY, folded back onto the input grid.
        sgemm(k, p, o, &wt, dys, &mut dcols, false);
        col2im(&dcols, &g, &mut dx[s * in_len..(s + 1) * in_len]);
        for (gb, row) in db.iter_mut().zip(dys.chunks_exact(p)) {
            *gb += row.iter().sum::<f32>();
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), transpose(k, o, &dw_t)),
        Tensor::from_parts(vec![o], db),
    ))
}

// ---- elementwise ----------------------------------------------------------

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul_scalar(x: &Tensor, s: f32) -> Tensor {
    x.map(|v| v * s)
}

/// `x[N,C,H,W] + b[N,C]`, broadcasting over the spatial dims.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("add_channel_bias")?;
    if b.shape() != [n, c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("bias {:?} does not match [N, C] = [{n}, {c}]", b.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (plane, &bv) in out.chunks_exact_mut(hw).zip(b.data()) {
        for v in plane {
            *v += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradient of [`add_channel_bias`] w.r.t. the bias: spatial sums of `dy`.
pub fn channel_sums(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let data = dy.data().chunks_exact(h * w).map(|p| p.iter().sum()).collect();
    Tensor::from_parts(vec![n, c], data)
}

// ---- softmax --------------------------------------------------------------

fn axis_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.shape(), axis, "softmax")?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| src[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..len {
                let e = (src[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[idx(j)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Backward from the softmax output `y`: `dx = y * (dy - sum(dy * y))`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(y.shape(), axis, "softmax")?;
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![0.0f32; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f32 = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
            for j in 0..len {
                out[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

// ---- reductions -----------------------------------------------------------

/// Mean squared error, accumulated in `f64`.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape("mse_loss", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    Ok((sum / a.numel() as f64) as f32)
}

/// `d mse / d a` scaled by the upstream scalar gradient `g`.
pub fn mse_backward(a: &Tensor, b: &Tensor, g: f32) -> Tensor {
    let k = 2.0 * g / a.numel() as f32;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| k * (x - y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn sum(x: &Tensor) -> f32 {
    x.data().iter().map(|&v| v as f64).sum::<f64>() as f32
}

// ---- layout ---------------------------------------------------------------

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let compatible =
            p.rank() == rank && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{:?} and {:?} differ off axis {axis}", first.shape(), p.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits `dy` back into pieces with the given sizes along `axis`.
pub fn split(dy: &Tensor, axis: usize, sizes: &[usize]) -> Vec<Tensor> {
    let outer: usize = dy.shape()[..axis].iter().product();
    let inner: usize = dy.shape()[axis + 1..].iter().product();
    let total = dy.shape()[axis];
    let mut offset = 0;
    sizes
        .iter()
        .map(|&len| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&dy.data()[start..start + len * inner]);
            }
            offset += len;
            let mut shape = dy.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        })
        .collect()
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * h2 * w2];
    for (plane, dst) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2], out))
}

pub fn upsample_nearest2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0f32; n * c * h * w];
    for (src, plane) in dy.data().chunks_exact(h2 * w2).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                plane[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---- group norm -----------------------------------------------------------

pub fn group_norm(x: &Tensor, spec: &GroupNormSpec, pool: &WorkerPool) -> Result<(Tensor, GroupStats)> {
    groupnorm_channel_parallel_with_stats(x, spec, pool)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &[f32],
    groups: usize,
    stats: &GroupStats,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let cpg = c / groups;
    let m = (cpg * hw) as f64;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for g in 0..groups {
            let gi = s * groups + g;
            let (mean, rstd) = (stats.mean[gi] as f64, stats.rstd[gi] as f64);
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ch in g * cpg..(g + 1) * cpg {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xhat = (x.data()[i] as f64 - mean) * rstd;
                    let d = dy.data()[i] as f64;
                    let dxhat = d * gamma[ch] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                }
            }
            for ch in g * cpg..(g + 1) * cpg {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xhat = (x.data()[i] as f64 - mean) * rstd;
                    let dxhat = dy.data()[i] as f64 * gamma[ch] as f64;
                    dx[i] = (rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::from_parts(vec![c], dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

// ---- attention ------------------------------------------------------------

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, pool: &WorkerPool) -> Result<Tensor> {
    fused_mha(q, k, v, pool)
}

/// Returns `(dq, dk, dv)` for `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, h, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = vec![0.0f32; q.numel()];
    let mut dk = vec![0.0f32; k.numel()];
    let mut dv = vec![0.0f32; v.numel()];
    let block = l * d;
    for head in 0..n * h {
        let r = head * block..(head + 1) * block;
        let (qh, kh, vh, doh) =
            (&q.data()[r.clone()], &k.data()[r.clone()], &v.data()[r.clone()], &dout.data()[r.clone()]);
        let p = attention_probs(qh, kh, l, d);
        // dV = Pᵀ dO
        let pt = transpose(l, l, &p);
        sgemm(l, d, l, &pt, doh, &mut dv[r.clone()], false);
        // dP = dO Vᵀ
        let vt = transpose(l, d, vh);
        let mut dp = vec![0.0f32; l * l];
        sgemm(l, l, d, doh, &vt, &mut dp, false);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/sqrt(d) scale.
        for i in 0..l {
            let row = i * l..(i + 1) * l;
            let dot: f32 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
            for j in row {
                dp[j] = p[j] * (dp[j] - dot) * scale;
            }
        }
        sgemm(l, d, l, &dp, kh, &mut dq[r.clone()], false);
        let dst = transpose(l, l, &dp);
        sgemm(l, d, l, &dst, qh, &mut dk[r], false);
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}

// ---- embeddings -----------------------------------------------------------

/// Sinusoidal timestep embedding `[sin(t·ω_i), cos(t·ω_i)]` with
/// `ω_i = 10000^(-i / (dim/2 - 1))`, i.e. geometric from 1 down to 1/10000.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("timestep embedding dim must be even and >= 2, got {dim}")));
    }
    if timesteps.is_empty() {
        return Err(Error::InvalidArgument("timestep embedding needs at least one timestep".into()));
    }
    let half = dim / 2;
    let freqs: Vec<f64> =
        (0..half).map(|i| if half == 1 { 1.0 } else { 10000f64.powf(-(i as f64) / (half - 1) as f64) }).collect();
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        out.extend(freqs.iter().map(|w| (t * w).sin() as f32));
        out.extend(freqs.iter().map(|w| (t * w).cos() as f32));
    }
    Ok(Tensor::from_parts(vec![timesteps.len(), dim], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_example() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[2.0, 3.0]);
        let bad = Tensor::zeros(vec![3, 2]).unwrap();
        assert!(linear(&x, &bad, None).is_err());
    }

    #[test]
    fn silu_and_softmax_basics() {
        assert_eq!(silu(&Tensor::scalar(0.0)).data(), &[0.0]);
        let s = softmax(&Tensor::full(vec![2, 4], 3.0).unwrap(), 1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(softmax(&s, 2).is_err());
    }

    #[test]
    fn mse_of_equal_is_zero_and_shapes_checked() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!(mse_loss(&a, &Tensor::zeros(vec![2]).unwrap()).is_err());
        assert!(add(&a, &Tensor::zeros(vec![1, 3]).unwrap()).is_err());
    }

    #[test]
    fn permute_and_inverse() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 2], (5..13).map(|v| v as f32).collect()).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        let parts = split(&c, 1, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn timestep_embedding_at_zero() {
        let e = timestep_embedding(&[0], 32).unwrap();
        assert!(e.data()[..16].iter().all(|&v| v == 0.0));
        assert!(e.data()[16..].iter().all(|&v| v == 1.0));
        let norm2: f32 = e.data().iter().map(|v| v * v).sum();
        assert_eq!(norm2, 16.0);
        assert!(timestep_embedding(&[0], 7).is_err());
    }
}
