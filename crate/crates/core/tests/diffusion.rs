mod common;

use std::sync::Mutex;

use common::{rng, T64};
use proptest::prelude::*;
use qdiff::diffusion::{
    forward_diffuse, is_boundary_step, sample, train_model, Denoiser, ModelSet, NoiseSchedule, PrecisionPolicy,
    SampleOptions, ScheduleConfig, TrainConfig,
};
use qdiff::eval::{DatasetConfig, ToyDataset};
use qdiff::kernels::WorkerPool;
use qdiff::numerics::PrecisionFormat::{self, *};
use qdiff::optim::{Adam, AdamConfig, LrSchedule};
use qdiff::tensor::{ops, Tensor};
use qdiff::unet::{InferenceModel, QuantMode, UnetConfig, UnetModel};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(&ScheduleConfig::default()).unwrap()
}

/// Linear betas from 1e-4 to 0.02 over 1000 steps and their running product.
fn alpha_bar_oracle(t: usize) -> f64 {
    (0..=t).map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * s as f64 / 999.0)).product()
}

#[test]
fn schedule_matches_product_oracle() {
    let s = schedule();
    for t in [0, 1, 17, 500, 998, 999] {
        assert!((s.alpha_bars()[t] - alpha_bar_oracle(t)).abs() < 1e-12, "t = {t}");
    }
    assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn forward_diffusion_examples() {
    let s = schedule();
    let mut r = rng(1);
    let x0 = T64::random(vec![3, 1, 4, 4], &mut r);
    let eps = T64::random(vec![3, 1, 4, 4], &mut r);
    let t = [0usize, 250, 999];

    let zero = Tensor::zeros(vec![3, 1, 4, 4]).unwrap();
    let clean = forward_diffuse(&s, &x0.to_tensor(), &t, &zero).unwrap();
    for (i, v) in clean.data().iter().enumerate() {
        assert!((*v as f64 - alpha_bar_oracle(t[i / 16]).sqrt() * x0.data[i]).abs() < 1e-6);
    }

    let noisy = forward_diffuse(&s, &x0.to_tensor(), &t, &eps.to_tensor()).unwrap();
    let eps_norm = eps.data[..16].iter().map(|v| v * v).sum::<f64>().sqrt();
    let drift: f64 = noisy.data()[..16].iter().zip(&x0.data).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
    assert!(drift <= 1e-2 * eps_norm + 1e-2 * 4.0, "t=0 drift {drift}");
    for (i, v) in noisy.data().iter().enumerate() {
        let ab = alpha_bar_oracle(t[i / 16]);
        let expected = ab.sqrt() * x0.data[i] + (1.0 - ab).sqrt() * eps.data[i];
        assert!((*v as f64 - expected).abs() < 1e-6);
    }
}

#[test]
fn boundary_policy_examples() {
    let p = PrecisionPolicy::boundary(50, 3).unwrap();
    let high: Vec<usize> = (0..50).filter(|&i| p.precision_for_step(i).unwrap() == Bf16).collect();
    assert_eq!(high, [0, 1, 2, 47, 48, 49]);
    let p = PrecisionPolicy::boundary(50, 5).unwrap();
    assert_eq!((p.high_steps(), 50 - p.high_steps()), (10, 40));
    assert!(PrecisionPolicy::boundary(50, 0).unwrap().formats().iter().all(|&f| f == Int8));
    assert!(PrecisionPolicy::boundary(50, 25).unwrap().formats().iter().all(|&f| f == Bf16));
    assert!(PrecisionPolicy::boundary(50, 26).is_err());
    assert!(PrecisionPolicy::new(50, 3, Bf16, Bf16).is_err());
}

proptest! {
    #[test]
    fn high_step_count_is_min_of_2k_and_n(n in 1usize..200, frac in 0.0f64..=1.0) {
        let k = (frac * n as f64).round() as usize;
        let count = (0..n).filter(|&i| is_boundary_step(n, k, i)).count();
        prop_assert_eq!(count, (2 * k).min(n));
        if k <= n.div_ceil(2) {
            let p = PrecisionPolicy::boundary(n, k).unwrap();
            prop_assert_eq!(p.high_steps(), (2 * k).min(n));
            prop_assert_eq!(p.formats().iter().filter(|&&f| f == Bf16).count(), (2 * k).min(n));
        }
    }
}

/// Predicts zero noise and remembers the first input it saw.
#[derive(Default)]
struct ZeroPredictor {
    first_input: Mutex<Option<Tensor>>,
}

impl Denoiser for ZeroPredictor {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize], _format: PrecisionFormat) -> qdiff::Result<Tensor> {
        self.first_input.lock().unwrap().get_or_insert_with(|| x_t.clone());
        Tensor::zeros(x_t.shape().to_vec())
    }
}

#[test]
fn zero_predictor_follows_closed_form_product() {
    let s = schedule();
    let n = 20;
    let z = ZeroPredictor::default();
    let options = SampleOptions { batch: 4, zero_variance: true };
    let out = sample(&z, &PrecisionPolicy::uniform(n, Fp32).unwrap(), &s, [1, 4, 4], 3, 9, &options).unwrap();
    let x_t = z.first_input.lock().unwrap().clone().unwrap();
    // Visited timesteps descend; alpha of each step is abar_t / abar_prev.
    let grid: Vec<usize> = (0..n).map(|j| j * 1000 / n).collect();
    let mut factor = 1.0f64;
    for i in 0..n {
        let t = grid[n - 1 - i];
        let prev = if i + 1 < n { alpha_bar_oracle(grid[n - 2 - i]) } else { 1.0 };
        factor /= (alpha_bar_oracle(t) / prev).sqrt();
    }
    for (y, x) in out.images.data().iter().zip(x_t.data()) {
        let expected = *x as f64 * factor;
        assert!((*y as f64 - expected).abs() <= 1e-5 * expected.abs().max(1.0), "{y} vs {expected}");
    }
}

fn small_model(seed: u64) -> InferenceModel {
    let config = UnetConfig { image_size: 8, base_channels: 8, temb_dim: 16, ..UnetConfig::default() };
    InferenceModel::new(UnetModel::new(config, seed).unwrap(), WorkerPool::single()).unwrap()
}

#[test]
fn single_step_sampling_is_finite() {
    let m = small_model(0);
    let out = sample(
        &m,
        &PrecisionPolicy::uniform(1, Fp32).unwrap(),
        &schedule(),
        [1, 8, 8],
        2,
        0,
        &SampleOptions::default(),
    );
    assert!(out.unwrap().images.all_finite());
}

#[test]
fn half_boundary_policy_equals_all_high_loop() {
    let set = ModelSet { full: small_model(1), quantized: None };
    let s = schedule();
    let opts = SampleOptions::default();
    let mixed = sample(&set, &PrecisionPolicy::boundary(10, 5).unwrap(), &s, [1, 8, 8], 3, 4, &opts).unwrap();
    let high = sample(&set, &PrecisionPolicy::uniform(10, Bf16).unwrap(), &s, [1, 8, 8], 3, 4, &opts).unwrap();
    assert_eq!(mixed.images, high.images);
    assert_eq!(mixed.formats, high.formats);
}

#[test]
fn sampling_is_reproducible_and_batch_independent() {
    let m = small_model(2);
    let s = schedule();
    let p = PrecisionPolicy::uniform(8, Bf16).unwrap();
    let a = sample(&m, &p, &s, [1, 8, 8], 5, 11, &SampleOptions { batch: 5, zero_variance: false }).unwrap();
    let b = sample(&m, &p, &s, [1, 8, 8], 5, 11, &SampleOptions { batch: 5, zero_variance: false }).unwrap();
    let c = sample(&m, &p, &s, [1, 8, 8], 5, 11, &SampleOptions { batch: 2, zero_variance: false }).unwrap();
    assert_eq!(a.images, b.images);
    // Batching changes GEMM shapes, so compare within rounding.
    for (x, y) in a.images.data().iter().zip(c.images.data()) {
        assert!((x - y).abs() < 1e-3, "{x} vs {y}");
    }
    let d = sample(&m, &p, &s, [1, 8, 8], 5, 12, &SampleOptions::default()).unwrap();
    assert_ne!(a.images, d.images);
}

#[test]
fn int8_steps_need_a_quantized_model() {
    let set = ModelSet { full: small_model(3), quantized: None };
    let err = sample(
        &set,
        &PrecisionPolicy::boundary(10, 2).unwrap(),
        &schedule(),
        [1, 8, 8],
        1,
        0,
        &SampleOptions::default(),
    );
    assert!(matches!(err, Err(qdiff::Error::MissingQuantParams { .. })));
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let eps = T64::random(vec![4, 1, 8, 8], &mut rng(5)).to_tensor();
    assert_eq!(ops::mse_loss(&eps, &eps).unwrap(), 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let config = UnetConfig { image_size: 8, base_channels: 8, temb_dim: 16, ..UnetConfig::default() };
    let mut model = UnetModel::new(config, 0).unwrap();
    let before = model.params().clone();
    let data = ToyDataset::generate(&DatasetConfig { count: 16, image_size: 8, ..DatasetConfig::default() }).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, model.params()).unwrap();
    let mut r = rng(6);
    for _ in 0..3 {
        qdiff::diffusion::train_step(&mut model, data.images(), 4, &schedule(), &mut opt, &mut r, QuantMode::Disabled)
            .unwrap();
    }
    assert_eq!(model.params(), &before);
}

#[test]
fn training_loss_falls_over_first_200_steps() {
    let data = ToyDataset::generate(&DatasetConfig::default()).unwrap();
    let train = TrainConfig { steps: 200, lr_schedule: LrSchedule::Constant, ..TrainConfig::default() };
    let mut losses = Vec::new();
    train_model(&UnetConfig::default(), &train, data.images(), &schedule(), |_, loss, _| {
        losses.push(loss as f64);
        Ok(())
    })
    .unwrap();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (early, late) = (median(&losses[..50]), median(&losses[150..]));
    assert!(late < 0.5 * early, "median loss {early} -> {late}");
}
