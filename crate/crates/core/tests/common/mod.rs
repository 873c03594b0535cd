//! Double-precision reference implementations used as test oracles.
//!
//! Every function here is a direct loop over the mathematical definition,
//! written independently of the library kernels.

#![allow(dead_code)]

pub mod gradcheck;

use qdiff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Uniform values in `[-1, 1)` that are exactly representable in f32.
    pub fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        Self::new(shape, data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear(x: &T64, w: &T64, b: Option<&T64>) -> T64 {
    let (n, d) = (x.shape[0], x.shape[1]);
    let e = w.shape[1];
    let mut out = T64::zeros(vec![n, e]);
    for i in 0..n {
        for j in 0..e {
            let mut acc = b.map_or(0.0, |b| b.data[j]);
            for k in 0..d {
                acc += x.data[i * d + k] * w.data[k * e + j];
            }
            out.data[i * e + j] = acc;
        }
    }
    out
}

/// Direct six-loop convolution; weight is `[O, C, KH, KW]`.
pub fn conv2d(x: &T64, w: &T64, b: Option<&T64>, stride: usize, padding: usize) -> T64 {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = T64::zeros(vec![n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn silu(x: &T64) -> T64 {
    T64::new(x.shape.clone(), x.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect())
}

pub fn add(a: &T64, b: &T64) -> T64 {
    T64::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn mul_scalar(x: &T64, s: f64) -> T64 {
    T64::new(x.shape.clone(), x.data.iter().map(|v| v * s).collect())
}

/// Adds the per-sample bias `b[N, C]` to every pixel of `x[N, C, H, W]`.
pub fn add_channel_bias(x: &T64, b: &T64) -> T64 {
    let inner: usize = x.shape[2..].iter().product();
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v += b.data[i / inner];
    }
    out
}

pub fn mse(a: &T64, b: &T64) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn softmax(x: &T64, axis: usize) -> T64 {
    let len = x.shape[axis];
    let st = strides(&x.shape)[axis];
    let mut out = x.clone();
    for start in 0..x.data.len() {
        if (start / st) % len != 0 {
            continue;
        }
        let idx: Vec<usize> = (0..len).map(|j| start + j * st).collect();
        let max = idx.iter().map(|&i| x.data[i]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = idx.iter().map(|&i| (x.data[i] - max).exp()).sum();
        for &i in &idx {
            out.data[i] = (x.data[i] - max).exp() / total;
        }
    }
    out
}

pub fn concat(parts: &[&T64], axis: usize) -> T64 {
    let outer: usize = parts[0].shape[..axis].iter().product();
    let inner: usize = parts[0].shape[axis + 1..].iter().product();
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::new();
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    T64::new(shape, data)
}

pub fn upsample2x(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = T64::zeros(vec![n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(p * 2 * h + y) * 2 * w + xx] = x.data[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn permute(x: &T64, perm: &[usize]) -> T64 {
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_st = strides(&x.shape);
    let dst_st = strides(&shape);
    let mut out = T64::zeros(shape.clone());
    for (i, v) in out.data.iter_mut().enumerate() {
        let mut src = 0;
        for (d, &p) in perm.iter().enumerate() {
            src += (i / dst_st[d]) % shape[d] * src_st[p];
        }
        *v = x.data[src];
    }
    out
}

/// GroupNorm with biased group variance and `eps` inside the square root.
pub fn group_norm(x: &T64, gamma: &T64, beta: &T64, groups: usize, eps: f64) -> T64 {
    let (n, c) = (x.shape[0], x.shape[1]);
    let hw: usize = x.shape[2..].iter().product();
    let cpg = c / groups;
    let mut out = x.clone();
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cpg) * hw;
            let vals = &x.data[start..start + cpg * hw];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            for (j, v) in vals.iter().enumerate() {
                let ch = g * cpg + j / hw;
                out.data[start + j] = (v - mean) / (var + eps).sqrt() * gamma.data[ch] + beta.data[ch];
            }
        }
    }
    out
}

/// `softmax(Q Kᵀ / sqrt(d)) V` per `[N, H]` slice of `[N, H, L, d]` operands.
pub fn attention(q: &T64, k: &T64, v: &T64) -> T64 {
    let (l, d) = (q.shape[2], q.shape[3]);
    let heads = q.shape[0] * q.shape[1];
    let mut out = T64::zeros(q.shape.clone());
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..heads {
        let base = h * l * d;
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|e| q.data[base + i * d + e] * k.data[base + j * d + e]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = w.iter().sum();
            for e in 0..d {
                out.data[base + i * d + e] = (0..l).map(|j| w[j] / total * v.data[base + j * d + e]).sum();
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` w.r.t. every element of
/// `inputs[which]`, with step `1e-3 * max(1, |θ|)`.
pub fn fd_gradient(inputs: &[T64], which: usize, f: &dyn Fn(&[T64]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].data.len())
        .map(|i| {
            let theta = inputs[which].data[i];
            let h = 1e-3 * theta.abs().max(1.0);
            work[which].data[i] = theta + h;
            let plus = f(&work);
            work[which].data[i] = theta - h;
            let minus = f(&work);
            work[which].data[i] = theta;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)` where the floor is
/// `1e-2 * max|b|`, so entries that are tiny next to the rest of the
/// gradient are compared absolutely.
pub fn max_rel_error(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &b)| {
            let a = a as f64;
            (a - b).abs() / a.abs().max(b.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Nearest bf16 by comparing the two neighbouring truncations in f64; ties
/// go to the candidate with an even last stored mantissa bit.
pub fn bf16_oracle(x: f32) -> f32 {
    let bits = x.to_bits();
    let down = f32::from_bits(bits & 0xFFFF_0000);
    let up = f32::from_bits((bits & 0xFFFF_0000).wrapping_add(0x1_0000));
    let (dd, du) = ((x as f64 - down as f64).abs(), (up as f64 - x as f64).abs());
    if dd < du {
        down
    } else if du < dd {
        up
    } else if (down.to_bits() >> 16) & 1 == 0 {
        down
    } else {
        up
    }
}
