mod common;

use common::{rng, T64};
use proptest::prelude::*;
use qdiff::kernels::{
    buffer_plan, fused_mha, fused_mha_instrumented, groupnorm_baseline, groupnorm_channel_parallel, int8_gemm,
    naive_elements, GroupNormSpec, TensorLifetime, WorkerPool,
};
use qdiff::numerics::{calibrate, dequantize, quantize_int8, Granularity, QuantParams};
use qdiff::tensor::{QTensor, Tensor};
use qdiff::unet::{UnetConfig, UnetModel};
use rand::Rng;

fn pool(t: usize) -> WorkerPool {
    WorkerPool::new(t).unwrap()
}

#[test]
fn groupnorm_hand_examples() {
    let p = WorkerPool::single();
    let spec = GroupNormSpec::plain(2, 1, 1e-12).unwrap();
    let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
    for y in [groupnorm_baseline(&x, &spec, &p).unwrap(), groupnorm_channel_parallel(&x, &spec, &p).unwrap()] {
        for (a, b) in y.data().iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-6, "{:?}", y.data());
        }
    }
    let c = Tensor::full(vec![2, 4, 3, 3], 2.5).unwrap();
    let spec = GroupNormSpec::plain(4, 2, 1e-5).unwrap();
    assert!(groupnorm_channel_parallel(&c, &spec, &p).unwrap().data().iter().all(|&v| v == 0.0));
    let spec = GroupNormSpec::new(4, 2, 1e-5, vec![0.0; 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let x = T64::random(vec![1, 4, 2, 2], &mut rng(1)).to_tensor();
    let y = groupnorm_channel_parallel(&x, &spec, &p).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0, 3.0][i / 4]);
    }
}

#[test]
fn groupnorm_matches_double_precision_oracle() {
    let mut r = rng(2);
    for _ in 0..30 {
        let groups = [1, 2, 4][r.random_range(0..3)];
        let c = groups * [1, 2, 4, 8][r.random_range(0..4)];
        let (n, h, w) = (r.random_range(1..3), r.random_range(1..9), r.random_range(1..9));
        let x = T64::random(vec![n, c, h, w], &mut r);
        let gamma = T64::random(vec![c], &mut r);
        let beta = T64::random(vec![c], &mut r);
        let spec =
            GroupNormSpec::new(c, groups, 1e-5, gamma.to_tensor().into_data(), beta.to_tensor().into_data()).unwrap();
        let oracle = common::group_norm(&x, &gamma, &beta, groups, 1e-5f32 as f64);
        for y in [
            groupnorm_baseline(&x.to_tensor(), &spec, &pool(3)).unwrap(),
            groupnorm_channel_parallel(&x.to_tensor(), &spec, &pool(3)).unwrap(),
        ] {
            for (a, b) in y.data().iter().zip(&oracle.data) {
                assert!((*a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn attention_examples() {
    let p = WorkerPool::single();
    let mut r = rng(3);
    let v = T64::random(vec![1, 2, 5, 3], &mut r).to_tensor();
    let k = T64::random(vec![1, 2, 5, 3], &mut r).to_tensor();
    let q = Tensor::zeros(vec![1, 2, 5, 3]).unwrap();
    let y = fused_mha(&q, &k, &v, &p).unwrap();
    for head in 0..2 {
        for e in 0..3 {
            let mean: f32 = (0..5).map(|j| v.data()[(head * 5 + j) * 3 + e]).sum::<f32>() / 5.0;
            for i in 0..5 {
                assert!((y.data()[(head * 5 + i) * 3 + e] - mean).abs() < 1e-6);
            }
        }
    }
    let one = |s: u64| T64::random(vec![2, 3, 1, 4], &mut rng(s)).to_tensor();
    let v1 = one(4);
    assert_eq!(fused_mha(&one(5), &one(6), &v1, &p).unwrap(), v1);
}

#[test]
fn attention_matches_composed_oracle_and_rows_normalize() {
    let mut r = rng(7);
    for (l, d) in [(16, 8), (64, 16), (7, 5)] {
        let q = T64::random(vec![2, 2, l, d], &mut r);
        let k = T64::random(vec![2, 2, l, d], &mut r);
        let v = T64::random(vec![2, 2, l, d], &mut r);
        let oracle = common::attention(&q, &k, &v);
        let y = fused_mha(&q.to_tensor(), &k.to_tensor(), &v.to_tensor(), &pool(4)).unwrap();
        for (a, b) in y.data().iter().zip(&oracle.data) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
        let (y2, sums) = fused_mha_instrumented(&q.to_tensor(), &k.to_tensor(), &v.to_tensor()).unwrap();
        assert_eq!(y2, y);
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5), "{sums:?}");
    }
}

fn quantize(x: &Tensor, axis: Option<usize>) -> (QTensor, QuantParams) {
    let g = axis.map_or(Granularity::PerTensor, |axis| Granularity::PerChannel { axis });
    let p = calibrate(x, g).unwrap();
    (quantize_int8(x, &p).unwrap(), p)
}

#[test]
fn int8_gemm_examples() {
    let qa = QTensor::new(vec![1, 1], vec![100]).unwrap();
    let qb = QTensor::new(vec![1, 1], vec![50]).unwrap();
    let y = int8_gemm(&qa, &qb, &QuantParams::per_tensor(0.01).unwrap(), &QuantParams::per_tensor(0.02).unwrap());
    assert!((y.unwrap().data()[0] - 1.0).abs() < 1e-6);

    let zeros = QTensor::new(vec![3, 4], vec![0; 12]).unwrap();
    let b = QTensor::new(vec![4, 2], vec![5, -7, 127, -127, 1, 2, 3, 4]).unwrap();
    let one = QuantParams::per_tensor(1.0).unwrap();
    assert!(int8_gemm(&zeros, &b, &one, &one).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn int8_gemm_matches_dequantized_oracle() {
    let mut r = rng(8);
    for (axis_a, axis_b) in [(None, None), (Some(0), Some(1)), (None, Some(1))] {
        let a = T64::random(vec![16, 16], &mut r).to_tensor();
        let b = T64::random(vec![16, 16], &mut r).to_tensor();
        let (qa, pa) = quantize(&a, axis_a);
        let (qb, pb) = quantize(&b, axis_b);
        let da = T64::from_tensor(&dequantize(&qa, &pa).unwrap());
        let db = T64::from_tensor(&dequantize(&qb, &pb).unwrap());
        let oracle = common::linear(&da, &db, None);
        let y = int8_gemm(&qa, &qb, &pa, &pb).unwrap();
        for (x, o) in y.data().iter().zip(&oracle.data) {
            assert!((*x as f64 - o).abs() <= 1e-4, "{x} vs {o}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn int8_gemm_with_unit_scales_is_integer_matmul(
        m in 1usize..9, n in 1usize..9, k in 1usize..40, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let a: Vec<i8> = (0..m * k).map(|_| r.random_range(-127..=127)).collect();
        let b: Vec<i8> = (0..k * n).map(|_| r.random_range(-127..=127)).collect();
        let one = QuantParams::per_tensor(1.0).unwrap();
        let y = int8_gemm(&QTensor::new(vec![m, k], a.clone()).unwrap(), &QTensor::new(vec![k, n], b.clone()).unwrap(), &one, &one).unwrap();
        for i in 0..m {
            for j in 0..n {
                let exact: i32 = (0..k).map(|p| a[i * k + p] as i32 * b[p * n + j] as i32).sum();
                prop_assert_eq!(y.data()[i * n + j], exact as f32);
            }
        }
    }

    #[test]
    fn buffer_plan_never_shares_live_tensors(
        spans in prop::collection::vec((1usize..100, 0usize..30, 0usize..6), 1..40),
    ) {
        let tensors: Vec<TensorLifetime> = spans
            .iter()
            .enumerate()
            .map(|(i, &(numel, first, len))| TensorLifetime { name: format!("t{i}"), numel, first, last: first + len })
            .collect();
        check_plan(&tensors);
    }
}

/// Exhaustive liveness check: no two overlapping tensors share an arena,
/// every arena fits its tensors, and the arena count equals the peak number
/// of simultaneously live tensors.
fn check_plan(tensors: &[TensorLifetime]) {
    let plan = buffer_plan(tensors);
    assert_eq!(plan.assignment.len(), tensors.len());
    for i in 0..tensors.len() {
        let a = plan.assignment[i];
        assert!(plan.arena_sizes[a] >= tensors[i].numel);
        for j in i + 1..tensors.len() {
            if tensors[i].overlaps(&tensors[j]) {
                assert_ne!(a, plan.assignment[j], "{} and {} are live together", tensors[i].name, tensors[j].name);
            }
        }
    }
    let last = tensors.iter().map(|t| t.last).max().unwrap_or(0);
    let peak = (0..=last).map(|s| tensors.iter().filter(|t| t.first <= s && s <= t.last).count()).max().unwrap_or(0);
    assert_eq!(plan.arena_count(), peak);
    assert!(plan.planned_elements() <= naive_elements(tensors));
}

#[test]
fn toy_unet_trace_reuses_buffers() {
    let model = UnetModel::new(UnetConfig::default(), 0).unwrap();
    let trace = model.activation_trace(2).unwrap();
    assert!(trace.len() > 20);
    check_plan(&trace);
    let plan = buffer_plan(&trace);
    assert!(plan.arena_count() < trace.len());
    assert!(plan.planned_elements() < naive_elements(&trace));
}
