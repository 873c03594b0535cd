//! DDPM forward process, strided ancestral sampling, and the per-step
//! precision policy.
//!
//! Sampling step `i = 0` is the first (noisiest) denoising step and
//! `i = n - 1` the last. A policy with boundary width `k` runs the first `k`
//! and the last `k` steps in its high format and everything between in its
//! low format.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PrecisionFormat;
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::tensor::{Tape, Tensor};
use crate::unet::{InferenceModel, QuantMode, UnetConfig, UnetModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear-β noise schedule, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { train_steps: t, beta_start: b0, beta_end: b1 } = *config;
        if t < 2 {
            return Err(Error::Config(format!("schedule.train_steps must be >= 2, got {t}")));
        }
        if !(0.0 < b0 && b0 < b1 && b1 < 1.0) {
            return Err(Error::Config(format!("schedule betas must satisfy 0 < start < end < 1, got {b0}..{b1}")));
        }
        let betas: Vec<f64> = (0..t).map(|i| b0 + (b1 - b0) * i as f64 / (t - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} out of range [0, {})", self.train_steps())));
        }
        Ok(())
    }

    /// `n` timesteps spread uniformly over the training grid, ascending:
    /// `t_j = floor(j * T / n)`.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.train_steps();
        if n == 0 || n > t {
            return Err(Error::InvalidArgument(format!("sampling steps must be in [1, {t}], got {n}")));
        }
        Ok((0..n).map(|j| j * t / n).collect())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, one timestep per sample.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let n = x0.shape()[0];
    if t.len() != n {
        return Err(Error::shape("forward_diffuse", format!("{} timesteps for batch of {n}", t.len())));
    }
    let per = x0.numel() / n;
    let mut out = vec![0.0f32; x0.numel()];
    for (s, &ts) in t.iter().enumerate() {
        schedule.check_t(ts)?;
        let ab = schedule.alpha_bars[ts];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in s * per..(s + 1) * per {
            out[i] = (a * x0.data()[i] as f64 + b * eps.data()[i] as f64) as f32;
        }
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Whether step `i` of an `n`-step loop falls in a width-`k` boundary.
pub fn is_boundary_step(n: usize, k: usize, i: usize) -> bool {
    i < k || i + k >= n
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub n: usize,
    pub k: usize,
    pub high: PrecisionFormat,
    pub low: PrecisionFormat,
}

impl PrecisionPolicy {
    pub fn new(n: usize, k: usize, high: PrecisionFormat, low: PrecisionFormat) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("policy needs at least one step".into()));
        }
        if k > n.div_ceil(2) {
            return Err(Error::InvalidArgument(format!(
                "boundary k={k} exceeds ceil(n/2)={} for n={n}",
                n.div_ceil(2)
            )));
        }
        let degenerate = k == 0 || 2 * k >= n;
        if high == low && !degenerate {
            return Err(Error::InvalidArgument(format!("high and low formats are both {high}")));
        }
        Ok(Self { n, k, high, low })
    }

    /// Every step in `format`.
    pub fn uniform(n: usize, format: PrecisionFormat) -> Result<Self> {
        Self::new(n, 0, format, format)
    }

    /// High at the first and last `k` steps, low in between.
    pub fn boundary(n: usize, k: usize) -> Result<Self> {
        Self::new(n, k, PrecisionFormat::Bf16, PrecisionFormat::Int8)
    }

    pub fn precision_for_step(&self, i: usize) -> Result<PrecisionFormat> {
        if i >= self.n {
            return Err(Error::InvalidArgument(format!("step {i} out of range [0, {})", self.n)));
        }
        Ok(if is_boundary_step(self.n, self.k, i) { self.high } else { self.low })
    }

    pub fn formats(&self) -> Vec<PrecisionFormat> {
        (0..self.n).map(|i| if is_boundary_step(self.n, self.k, i) { self.high } else { self.low }).collect()
    }

    pub fn high_steps(&self) -> usize {
        (0..self.n).filter(|&i| is_boundary_step(self.n, self.k, i)).count()
    }
}

/// Anything that can estimate the noise in `x_t`.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], format: PrecisionFormat) -> Result<Tensor>;
}

impl Denoiser for InferenceModel {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], format: PrecisionFormat) -> Result<Tensor> {
        self.predict(x_t, t, format)
    }
}

/// The full-precision network (used for FP32 and BF16 steps) and optionally
/// its quantized student (used for INT8 steps).
pub struct ModelSet {
    pub full: InferenceModel,
    pub quantized: Option<InferenceModel>,
}

impl Denoiser for ModelSet {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], format: PrecisionFormat) -> Result<Tensor> {
        match format {
            PrecisionFormat::Int8 => match &self.quantized {
                Some(q) => q.predict(x_t, t, format),
                None => Err(Error::MissingQuantParams { layer: "<no quantized model loaded>".into() }),
            },
            _ => self.full.predict(x_t, t, format),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Images per call of the denoiser.
    pub batch: usize,
    /// Drop the stochastic term of every step.
    pub zero_variance: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { batch: 100, zero_variance: false }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// `[count, C, H, W]`.
    pub images: Tensor,
    /// Format used at each loop step.
    pub formats: Vec<PrecisionFormat>,
    /// Training-grid timestep visited at each loop step.
    pub timesteps: Vec<usize>,
}

/// Noise stream for image `index` of a run with `seed`; independent of how
/// images are batched.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
}

/// Strided DDPM ancestral sampling of `count` images of shape `image`
/// (`[C, H, W]`) over `policy.n` steps.
pub fn sample(
    denoiser: &dyn Denoiser,
    policy: &PrecisionPolicy,
    schedule: &NoiseSchedule,
    image: [usize; 3],
    count: usize,
    seed: u64,
    options: &SampleOptions,
) -> Result<SampleOutput> {
    if count == 0 || options.batch == 0 {
        return Err(Error::InvalidArgument("sample count and batch must be >= 1".into()));
    }
    let n = policy.n;
    let grid = schedule.sampling_timesteps(n)?;
    let formats = policy.formats();
    let per: usize = image.iter().product();
    let mut images = Vec::with_capacity(count * per);

    for start in (0..count).step_by(options.batch) {
        let b = options.batch.min(count - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + b).map(|i| image_rng(seed, i)).collect();
        let mut x = vec![0.0f32; b * per];
        for (rng, xs) in rngs.iter_mut().zip(x.chunks_exact_mut(per)) {
            gaussian(rng, xs);
        }
        let shape = vec![b, image[0], image[1], image[2]];
        let mut noise = vec![0.0f32; per];
        for i in 0..n {
            let t = grid[n - 1 - i];
            let ab_t = schedule.alpha_bars[t];
            let ab_prev = if i + 1 < n { schedule.alpha_bars[grid[n - 2 - i]] } else { 1.0 };
            let alpha = ab_t / ab_prev;
            let beta = 1.0 - alpha;
            let eps_coef = beta / (1.0 - ab_t).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            let sigma =
                if i + 1 < n && !options.zero_variance { (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt() } else { 0.0 };

            let xt = Tensor::new(shape.clone(), x)?;
            let eps = denoiser.predict_noise(&xt, &vec![t; b], formats[i])?;
            if eps.shape() != xt.shape() {
                return Err(Error::shape(
                    "sample",
                    format!("denoiser returned {:?} for {:?}", eps.shape(), xt.shape()),
                ));
            }
            x = xt.into_data();
            for (s, (xs, es)) in x.chunks_exact_mut(per).zip(eps.data().chunks_exact(per)).enumerate() {
                if sigma > 0.0 {
                    gaussian(&mut rngs[s], &mut noise);
                }
                for j in 0..per {
                    let mean = (xs[j] as f64 - eps_coef * es[j] as f64) * inv_sqrt_alpha;
                    xs[j] = (mean + sigma * noise[j] as f64) as f32;
                }
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite sample at step {i} (t={t})")));
            }
        }
        images.extend_from_slice(&x);
    }
    Ok(SampleOutput {
        images: Tensor::new(vec![count, image[0], image[1], image[2]], images)?,
        formats,
        timesteps: (0..n).map(|i| grid[n - 1 - i]).collect(),
    })
}

/// A noised training batch: `x_t`, its timesteps and the noise that was added.
pub struct NoisedBatch {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// Draws `batch` images uniformly with replacement from `data` (`[N, C, H, W]`),
/// then `t ~ U[0, T)` and `eps ~ N(0, I)` for each.
pub fn noised_batch<R: Rng>(schedule: &NoiseSchedule, data: &Tensor, batch: usize, rng: &mut R) -> Result<NoisedBatch> {
    let n = data.shape()[0];
    if n == 0 || batch == 0 {
        return Err(Error::InvalidArgument("training needs a non-empty dataset and batch".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let picks: Vec<usize> = (0..batch).map(|_| *idx.choose(rng).expect("non-empty")).collect();
    let per = data.numel() / n;
    let mut x0 = Vec::with_capacity(batch * per);
    for &p in &picks {
        x0.extend_from_slice(&data.data()[p * per..(p + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = batch;
    let x0 = Tensor::new(shape.clone(), x0)?;
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..schedule.train_steps())).collect();
    let eps_data = (0..x0.numel()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let eps = Tensor::new(shape, eps_data)?;
    let x_t = forward_diffuse(schedule, &x0, &t, &eps)?;
    Ok(NoisedBatch { x0, x_t, t, eps })
}

pub(crate) fn check_loss(value: f32, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{what} is {value}; aborting")));
    }
    Ok(())
}

/// One epsilon-prediction training step: `loss = mse(eps_hat, eps)`, followed
/// by one optimizer update. Returns the loss.
pub fn train_step<R: Rng>(
    model: &mut UnetModel,
    data: &Tensor,
    batch: usize,
    schedule: &NoiseSchedule,
    optimizer: &mut Adam,
    rng: &mut R,
    mode: QuantMode,
) -> Result<f32> {
    let nb = noised_batch(schedule, data, batch, rng)?;
    train_on_batch(model, &nb, optimizer, mode)
}

pub fn train_on_batch(model: &mut UnetModel, nb: &NoisedBatch, optimizer: &mut Adam, mode: QuantMode) -> Result<f32> {
    let mut tape = Tape::default();
    let x = tape.constant(nb.x_t.clone());
    let out = model.forward_tape(&mut tape, x, &nb.t, mode)?;
    let target = tape.constant(nb.eps.clone());
    let loss = tape.mse_loss(out, target)?;
    let value = tape.value(loss).item()?;
    check_loss(value, "training loss")?;
    let grads = tape.backward(loss)?;
    optimizer.step(model.params_mut(), &grads);
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Initialization seed of the network weights.
    pub init_seed: u64,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            seed: 1,
            init_seed: 0,
            optimizer: AdamConfig::default(),
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

/// Trains a freshly initialized FP32 model. `on_step` receives the 1-based
/// step, the loss and the learning rate used.
pub fn train_model(
    unet: &UnetConfig,
    config: &TrainConfig,
    data: &Tensor,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f32, f32) -> Result<()>,
) -> Result<UnetModel> {
    if config.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be >= 1".into()));
    }
    let mut model = UnetModel::new(unet.clone(), config.init_seed)?;
    let mut optimizer = Adam::new(config.optimizer, model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for step in 0..config.steps {
        let lr = config.optimizer.lr * config.lr_schedule.factor(step, config.steps);
        optimizer.set_lr(lr);
        let loss =
            train_step(&mut model, data, config.batch_size, schedule, &mut optimizer, &mut rng, QuantMode::Disabled)?;
        on_step(step + 1, loss, lr)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn boundary_sets() {
        let p = PrecisionPolicy::boundary(50, 3).unwrap();
        let high: Vec<usize> = (0..50).filter(|&i| p.precision_for_step(i).unwrap() == PrecisionFormat::Bf16).collect();
        assert_eq!(high, vec![0, 1, 2, 47, 48, 49]);
        assert_eq!(PrecisionPolicy::boundary(50, 5).unwrap().high_steps(), 10);
        assert!(p.precision_for_step(50).is_err());
        assert!(PrecisionPolicy::boundary(50, 26).is_err());
        assert_eq!(PrecisionPolicy::boundary(50, 25).unwrap().high_steps(), 50);
        assert_eq!(PrecisionPolicy::boundary(50, 0).unwrap().high_steps(), 0);
    }

    #[test]
    fn timesteps_are_strided() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let g = s.sampling_timesteps(50).unwrap();
        assert_eq!(g[0], 0);
        assert_eq!(g[1], 20);
        assert_eq!(g[49], 980);
        assert!(s.sampling_timesteps(1001).is_err());
    }

    #[test]
    fn forward_diffuse_rejects_bad_t() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x = Tensor::zeros(vec![1, 1, 2, 2]).unwrap();
        assert!(forward_diffuse(&s, &x, &[1000], &x).is_err());
    }
}
