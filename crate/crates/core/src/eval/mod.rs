//! Sample quality (Fréchet distance over random-projection features), the
//! toy dataset, and latency measurement.

mod dataset;
mod features;
mod frechet;
pub mod report;

pub use dataset::{DatasetConfig, Pattern, ToyDataset};
pub use features::{FeatureProjection, FEATURE_DIM, FEATURE_SEED};
pub use frechet::{frechet_distance, FrechetStats, NEG_EIG_TOL, NEG_RESULT_TOL};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, Denoiser, NoiseSchedule, PrecisionPolicy, SampleOptions};
use crate::error::{Error, Result};
use crate::numerics::PrecisionFormat;
use crate::tensor::Tensor;

/// One configuration of the evaluation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub label: String,
    pub policy: PrecisionPolicy,
}

impl EvalConfig {
    pub fn new(label: impl Into<String>, policy: PrecisionPolicy) -> Self {
        Self { label: label.into(), policy }
    }

    /// E.g. `"6 bf16 + 44 int8"`.
    pub fn precision_mix(&self) -> String {
        let p = &self.policy;
        let high = p.high_steps();
        match (high, p.n - high) {
            (h, 0) => format!("{h} {}", p.high),
            (0, l) => format!("{l} {}", p.low),
            (h, l) => format!("{h} {} + {l} {}", p.high, p.low),
        }
    }
}

/// The five configurations compared throughout: FP32, BF16 and INT8 for every
/// step, then BF16 on the first and last 3 or 5 steps with INT8 between.
pub fn default_matrix(n: usize) -> Result<Vec<EvalConfig>> {
    use PrecisionFormat::*;
    let mut out = vec![
        EvalConfig::new("FP32", PrecisionPolicy::uniform(n, Fp32)?),
        EvalConfig::new("BF16", PrecisionPolicy::uniform(n, Bf16)?),
        EvalConfig::new("INT8", PrecisionPolicy::uniform(n, Int8)?),
    ];
    for k in [3, 5] {
        let policy = PrecisionPolicy::boundary(n, k)?;
        out.push(EvalConfig::new(format!("BF16 ({} Steps)/INT8", policy.high_steps()), policy));
    }
    Ok(out)
}

/// Reference statistics of a set of images.
pub fn image_stats(images: &Tensor, projection: &FeatureProjection) -> Result<FrechetStats> {
    FrechetStats::from_features(&projection.features(images)?)
}

/// Samples `n_images` with `policy` and returns their Fréchet distance to
/// `reference`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_config(
    denoiser: &dyn Denoiser,
    policy: &PrecisionPolicy,
    schedule: &NoiseSchedule,
    reference: &FrechetStats,
    projection: &FeatureProjection,
    image: [usize; 3],
    n_images: usize,
    seed: u64,
) -> Result<f64> {
    let out = sample(denoiser, policy, schedule, image, n_images, seed, &SampleOptions::default())?;
    let stats = image_stats(&out.images, projection)?;
    frechet_distance(&stats, reference)
}

/// Wall-clock summary of repeated runs, in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    pub repeats: usize,
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Timing {
    pub fn from_samples(mut ns: Vec<f64>) -> Result<Self> {
        if ns.is_empty() {
            return Err(Error::InvalidArgument("no timing samples".into()));
        }
        ns.sort_by(f64::total_cmp);
        Ok(Self {
            median_ns: quantile(&ns, 0.5),
            p10_ns: quantile(&ns, 0.1),
            p90_ns: quantile(&ns, 0.9),
            repeats: ns.len(),
        })
    }
}

/// Runs `f` `warmup` times untimed, then `repeats` times timed.
pub fn time_repeats(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(Timing, Vec<f64>)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ns = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        ns.push(start.elapsed().as_nanos() as f64);
    }
    Ok((Timing::from_samples(ns.clone())?, ns))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
    /// Images per timed sample call.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 3, repeats: 20, batch: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub precision_mix: String,
    pub steps: usize,
    pub k: usize,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    pub frechet: Option<f64>,
    /// Raw per-repeat wall times.
    #[serde(skip)]
    pub samples_ns: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Wall time per full `n`-step sample for every configuration. Configurations
/// are measured round-robin, one repeat each per round, so slow drift in
/// machine state spreads evenly over them.
pub fn bench_latency(
    denoiser: &dyn Denoiser,
    matrix: &[EvalConfig],
    schedule: &NoiseSchedule,
    image: [usize; 3],
    config: &BenchConfig,
) -> Result<BenchReport> {
    if config.repeats < 1 {
        return Err(Error::InvalidArgument("bench needs at least one repeat".into()));
    }
    let options = SampleOptions { batch: config.batch, zero_variance: false };
    let run = |c: &EvalConfig| -> Result<()> {
        sample(denoiser, &c.policy, schedule, image, config.batch, config.seed, &options).map(|_| ())
    };
    for c in matrix {
        for _ in 0..config.warmup {
            run(c)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(config.repeats); matrix.len()];
    for _ in 0..config.repeats {
        for (c, s) in matrix.iter().zip(samples.iter_mut()) {
            let start = Instant::now();
            run(c)?;
            s.push(start.elapsed().as_nanos() as f64);
        }
    }
    let rows = matrix
        .iter()
        .zip(samples)
        .map(|(c, s)| {
            let t = Timing::from_samples(s.clone())?;
            Ok(BenchRow {
                label: c.label.clone(),
                precision_mix: c.precision_mix(),
                steps: c.policy.n,
                k: c.policy.k,
                median_ns: t.median_ns,
                p10_ns: t.p10_ns,
                p90_ns: t.p90_ns,
                frechet: None,
                samples_ns: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_has_five_table_columns() {
        let m = default_matrix(50).unwrap();
        let labels: Vec<&str> = m.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["FP32", "BF16", "INT8", "BF16 (6 Steps)/INT8", "BF16 (10 Steps)/INT8"]);
        assert_eq!(m[3].precision_mix(), "6 bf16 + 44 int8");
    }

    #[test]
    fn quantiles() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&v, 0.1), 1.0);
        let t = Timing::from_samples(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.median_ns, 2.0);
    }
}
