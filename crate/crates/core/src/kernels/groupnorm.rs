//! GroupNorm over NCHW tensors, two parallel decompositions.
//!
//! The baseline hands whole groups of one sample to workers, so at most `G`
//! workers are busy. The channel-parallel kernel splits the work by channel:
//! per-channel moments in parallel, a serial reduction to group statistics in
//! ascending channel order, then per-channel normalization in parallel.

use crate::error::{Error, Result};
use crate::kernels::pool::WorkerPool;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormSpec {
    channels: usize,
    groups: usize,
    eps: f32,
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl GroupNormSpec {
    pub fn new(channels: usize, groups: usize, eps: f32, gamma: Vec<f32>, beta: Vec<f32>) -> Result<Self> {
        if groups == 0 || channels == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!("GroupNorm: {groups} groups must divide {channels} channels")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("GroupNorm: eps must be > 0, got {eps}")));
        }
        if gamma.len() != channels || beta.len() != channels {
            return Err(Error::shape(
                "group_norm",
                format!("affine params have {} / {} entries for {channels} channels", gamma.len(), beta.len()),
            ));
        }
        Ok(Self { channels, groups, eps, gamma, beta })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn plain(channels: usize, groups: usize, eps: f32) -> Result<Self> {
        Self::new(channels, groups, eps, vec![1.0; channels], vec![0.0; channels])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn eps(&self) -> f32 {
        self.eps
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    fn channels_per_group(&self) -> usize {
        self.channels / self.groups
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4("group_norm")?;
        if c != self.channels {
            return Err(Error::shape("group_norm", format!("input has {c} channels, spec expects {}", self.channels)));
        }
        Ok((n, c, h * w))
    }
}

/// Additive per-channel moments.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelMoments {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
}

impl ChannelMoments {
    pub fn of(values: &[f32]) -> Self {
        let (sum, sum_sq) = sum_and_sum_sq(values);
        Self { sum, sum_sq, count: values.len() }
    }

    pub fn combine(self, other: Self) -> Self {
        Self { sum: self.sum + other.sum, sum_sq: self.sum_sq + other.sum_sq, count: self.count + other.count }
    }
}

/// Per-(sample, group) statistics, laid out `[n * groups + g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

const LANES: usize = 8;

// Eight independent f64 accumulators, folded in a fixed order.
fn sum_and_sum_sq(values: &[f32]) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut q = [0.0f64; LANES];
    let chunks = values.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let v = c[l] as f64;
            s[l] += v;
            q[l] += v * v;
        }
    }
    for (l, &v) in tail.iter().enumerate() {
        let v = v as f64;
        s[l] += v;
        q[l] += v * v;
    }
    (s.iter().sum(), q.iter().sum())
}

fn sum_sq_dev(values: &[f32], mean: f64) -> f64 {
    let mut q = [0.0f64; LANES];
    let chunks = values.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let d = c[l] as f64 - mean;
            q[l] += d * d;
        }
    }
    for (l, &v) in tail.iter().enumerate() {
        let d = v as f64 - mean;
        q[l] += d * d;
    }
    q.iter().sum()
}

#[inline]
fn normalize_channel(src: &[f32], dst: &mut [f32], mean: f32, rstd: f32, gamma: f32, beta: f32) {
    let a = rstd * gamma;
    let b = beta - mean * a;
    for (y, &x) in dst.iter_mut().zip(src) {
        *y = x * a + b;
    }
}

/// Group-parallel GroupNorm: samples in sequence, the groups of each sample
/// spread across workers.
pub fn groupnorm_baseline(x: &Tensor, spec: &GroupNormSpec, pool: &WorkerPool) -> Result<Tensor> {
    let (n, c, hw) = spec.check_input(x)?;
    let cpg = spec.channels_per_group();
    let group_len = cpg * hw;
    let mut out = vec![0.0f32; x.numel()];
    let src = x.data();
    for s in 0..n {
        let xs = &src[s * c * hw..(s + 1) * c * hw];
        let ys = &mut out[s * c * hw..(s + 1) * c * hw];
        pool.for_each_chunk_mut(ys, group_len, |groups, chunk| {
            for (k, g) in groups.enumerate() {
                let xg = &xs[g * group_len..(g + 1) * group_len];
                let (sum, _) = sum_and_sum_sq(xg);
                let mean = sum / group_len as f64;
                let var = sum_sq_dev(xg, mean) / group_len as f64;
                let rstd = (1.0 / (var + spec.eps as f64).sqrt()) as f32;
                let yg = &mut chunk[k * group_len..(k + 1) * group_len];
                for j in 0..cpg {
                    let ch = g * cpg + j;
                    normalize_channel(
                        &xg[j * hw..(j + 1) * hw],
                        &mut yg[j * hw..(j + 1) * hw],
                        mean as f32,
                        rstd,
                        spec.gamma[ch],
                        spec.beta[ch],
                    );
                }
            }
        });
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Channel-parallel GroupNorm.
pub fn groupnorm_channel_parallel(x: &Tensor, spec: &GroupNormSpec, pool: &WorkerPool) -> Result<Tensor> {
    groupnorm_channel_parallel_with_stats(x, spec, pool).map(|(y, _)| y)
}

/// Per-channel moments for every `(sample, channel)` pair, computed in parallel.
pub fn channel_moments(x: &Tensor, pool: &WorkerPool) -> Result<Vec<ChannelMoments>> {
    let (n, c, h, w) = x.dims4("channel_moments")?;
    let hw = h * w;
    let src = x.data();
    let mut moments = vec![ChannelMoments::default(); n * c];
    pool.for_each_chunk_mut(&mut moments, 1, |chans, chunk| {
        for (slot, nc) in chunk.iter_mut().zip(chans) {
            *slot = ChannelMoments::of(&src[nc * hw..(nc + 1) * hw]);
        }
    });
    Ok(moments)
}

/// Group statistics from channel moments, summed in ascending channel order.
pub fn group_stats(moments: &[ChannelMoments], n: usize, spec: &GroupNormSpec) -> GroupStats {
    let c = spec.channels;
    let g = spec.groups;
    let cpg = spec.channels_per_group();
    let mut mean = Vec::with_capacity(n * g);
    let mut rstd = Vec::with_capacity(n * g);
    for s in 0..n {
        for gi in 0..g {
            let first = s * c + gi * cpg;
            let total = moments[first..first + cpg].iter().fold(ChannelMoments::default(), |acc, m| acc.combine(*m));
            let count = total.count as f64;
            let mu = total.sum / count;
            let var = (total.sum_sq / count - mu * mu).max(0.0);
            mean.push(mu as f32);
            rstd.push((1.0 / (var + spec.eps as f64).sqrt()) as f32);
        }
    }
    GroupStats { mean, rstd }
}

/// Channel-parallel GroupNorm that also returns the group statistics it used.
pub fn groupnorm_channel_parallel_with_stats(
    x: &Tensor,
    spec: &GroupNormSpec,
    pool: &WorkerPool,
) -> Result<(Tensor, GroupStats)> {
    let (n, c, hw) = spec.check_input(x)?;
    let cpg = spec.channels_per_group();
    let moments = channel_moments(x, pool)?;
    let stats = group_stats(&moments, n, spec);
    let src = x.data();
    let mut out = vec![0.0f32; x.numel()];
    pool.for_each_chunk_mut(&mut out, hw, |chans, chunk| {
        for (k, nc) in chans.enumerate() {
            let (s, ch) = (nc / c, nc % c);
            let gi = s * spec.groups + ch / cpg;
            normalize_channel(
                &src[nc * hw..(nc + 1) * hw],
                &mut chunk[k * hw..(k + 1) * hw],
                stats.mean[gi],
                stats.rstd[gi],
                spec.gamma[ch],
                spec.beta[ch],
            );
        }
    });
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}
