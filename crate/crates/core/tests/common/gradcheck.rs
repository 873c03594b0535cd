//! Analytic tape gradients against double-precision central finite
//! differences, op by op and for the full student network.

use super::{fd_gradient, max_rel_error, rng, T64};
use qdiff::tensor::{Tape, Tensor, Var};
use qdiff::unet::{QuantMode, UnetConfig, UnetModel};
use rand::Rng;

const OP_TOL: f64 = 1e-3;
const SEEDS: u64 = 10;

type Build = dyn Fn(&mut Tape, &[Var]) -> qdiff::Result<Var>;
type Reference = dyn Fn(&[T64]) -> T64;

/// Checks `loss = mse(op(inputs), target)` for a random target.
fn check_op(name: &str, seed: u64, inputs: Vec<T64>, build: &Build, reference: &Reference) {
    let mut r = rng(1000 + seed);
    let out_ref = reference(&inputs);
    let target = T64::random(out_ref.shape.clone(), &mut r);
    let f = |xs: &[T64]| super::mse(&reference(xs), &target);

    let mut tape = Tape::default();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.to_tensor())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let forward = tape.value(out).clone();
    assert_eq!(forward.shape(), &out_ref.shape[..], "{name}: output shape");
    let fwd_err = max_rel_error(forward.data(), &out_ref.data);
    assert!(fwd_err <= 1e-5, "{name} seed {seed}: forward differs from reference by {fwd_err:e}");

    let tgt = tape.constant(target.to_tensor());
    let loss = tape.mse_loss(out, tgt).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| panic!("{name}: input {i} got no gradient"));
        assert_eq!(analytic.shape(), &inputs[i].shape[..]);
        let fd = fd_gradient(&inputs, i, &f);
        let err = max_rel_error(analytic.data(), &fd);
        assert!(err <= OP_TOL, "{name} seed {seed} input {i}: relative error {err:e}");
    }
}

fn rand_inputs(seed: u64, shapes: &[&[usize]]) -> Vec<T64> {
    let mut r = rng(seed);
    shapes.iter().map(|s| T64::random(s.to_vec(), &mut r)).collect()
}

pub fn linear_gradients() {
    for seed in 0..SEEDS {
        check_op(
            "linear",
            seed,
            rand_inputs(seed, &[&[3, 5], &[5, 4], &[4]]),
            &|t, v| t.linear(v[0], v[1], Some(v[2])),
            &|x| super::linear(&x[0], &x[1], Some(&x[2])),
        );
    }
}

pub fn conv2d_gradients() {
    for seed in 0..SEEDS {
        for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            check_op(
                "conv2d",
                seed,
                rand_inputs(seed, &[&[2, 3, 5, 5], &[4, 3, k, k], &[4]]),
                &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding),
                &move |x| super::conv2d(&x[0], &x[1], Some(&x[2]), stride, padding),
            );
        }
    }
}

pub fn silu_gradients() {
    for seed in 0..SEEDS {
        let mut x = rand_inputs(seed, &[&[2, 3, 4]]);
        x[0] = super::mul_scalar(&x[0], 4.0);
        check_op("silu", seed, x, &|t, v| t.silu(v[0]), &|x| super::silu(&x[0]));
    }
}

pub fn softmax_gradients() {
    for seed in 0..SEEDS {
        for axis in 0..3 {
            check_op(
                "softmax",
                seed,
                rand_inputs(seed, &[&[2, 5, 3]]),
                &move |t, v| t.softmax(v[0], axis),
                &move |x| super::softmax(&x[0], axis),
            );
        }
    }
}

pub fn elementwise_gradients() {
    for seed in 0..SEEDS {
        check_op("add", seed, rand_inputs(seed, &[&[2, 3, 4], &[2, 3, 4]]), &|t, v| t.add(v[0], v[1]), &|x| {
            super::add(&x[0], &x[1])
        });
        check_op("mul_scalar", seed, rand_inputs(seed, &[&[2, 3, 4]]), &|t, v| t.mul_scalar(v[0], -0.7), &|x| {
            super::mul_scalar(&x[0], -0.7f32 as f64)
        });
        check_op(
            "add_channel_bias",
            seed,
            rand_inputs(seed, &[&[2, 3, 2, 2], &[2, 3]]),
            &|t, v| t.add_channel_bias(v[0], v[1]),
            &|x| super::add_channel_bias(&x[0], &x[1]),
        );
    }
}

pub fn reduction_gradients() {
    for seed in 0..SEEDS {
        check_op("mse_loss", seed, rand_inputs(seed, &[&[3, 4], &[3, 4]]), &|t, v| t.mse_loss(v[0], v[1]), &|x| {
            T64::new(vec![1], vec![super::mse(&x[0], &x[1])])
        });
        check_op("sum", seed, rand_inputs(seed, &[&[3, 4]]), &|t, v| t.sum(v[0]), &|x| {
            T64::new(vec![1], vec![x[0].data.iter().sum()])
        });
    }
}

pub fn layout_gradients() {
    for seed in 0..SEEDS {
        check_op(
            "concat",
            seed,
            rand_inputs(seed, &[&[2, 2, 3], &[2, 3, 3]]),
            &|t, v| t.concat(&[v[0], v[1]], 1),
            &|x| super::concat(&[&x[0], &x[1]], 1),
        );
        check_op(
            "upsample_nearest2x",
            seed,
            rand_inputs(seed, &[&[1, 2, 3, 3]]),
            &|t, v| t.upsample_nearest2x(v[0]),
            &|x| super::upsample2x(&x[0]),
        );
        check_op("permute", seed, rand_inputs(seed, &[&[2, 3, 4, 5]]), &|t, v| t.permute(v[0], &[0, 2, 3, 1]), &|x| {
            super::permute(&x[0], &[0, 2, 3, 1])
        });
        check_op("reshape", seed, rand_inputs(seed, &[&[2, 6]]), &|t, v| t.reshape(v[0], &[3, 4]), &|x| {
            T64::new(vec![3, 4], x[0].data.clone())
        });
    }
}

pub fn group_norm_gradients() {
    for seed in 0..SEEDS {
        for groups in [1, 2, 4] {
            check_op(
                "group_norm",
                seed,
                rand_inputs(seed, &[&[2, 4, 3, 3], &[4], &[4]]),
                &move |t, v| t.group_norm(v[0], v[1], v[2], groups, 1e-5),
                &move |x| super::group_norm(&x[0], &x[1], &x[2], groups, 1e-5f32 as f64),
            );
        }
    }
}

pub fn attention_gradients() {
    for seed in 0..SEEDS {
        let mut x = rand_inputs(seed, &[&[1, 2, 4, 3], &[1, 2, 4, 3], &[1, 2, 4, 3]]);
        x[0] = super::mul_scalar(&x[0], 2.0);
        check_op("attention", seed, x, &|t, v| t.attention(v[0], v[1], v[2]), &|x| {
            super::attention(&x[0], &x[1], &x[2])
        });
    }
}

pub fn composite_graph_gradients() {
    // conv -> groupnorm -> silu -> conv, plus a residual connection.
    for seed in 0..SEEDS {
        check_op(
            "composite",
            seed,
            rand_inputs(seed, &[&[1, 2, 4, 4], &[4, 2, 3, 3], &[4], &[4], &[2, 4, 3, 3]]),
            &|t, v| {
                let h = t.conv2d(v[0], v[1], None, 1, 1)?;
                let h = t.group_norm(h, v[2], v[3], 2, 1e-5)?;
                let h = t.silu(h)?;
                let h = t.conv2d(h, v[4], None, 1, 1)?;
                t.add(h, v[0])
            },
            &|x| {
                let h = super::conv2d(&x[0], &x[1], None, 1, 1);
                let h = super::group_norm(&h, &x[2], &x[3], 2, 1e-5f32 as f64);
                let h = super::silu(&h);
                let h = super::conv2d(&h, &x[4], None, 1, 1);
                super::add(&h, &x[0])
            },
        );
    }
}

// ---- full network -----------------------------------------------------------

const NET_TOL: f64 = 1e-2;

struct NetCase {
    student: UnetModel,
    x: Tensor,
    t: Vec<usize>,
    eps: T64,
    teacher_out: T64,
    kd_weight: f64,
}

impl NetCase {
    fn new(seed: u64) -> Self {
        let config = UnetConfig { image_size: 4, base_channels: 8, temb_dim: 8, ..UnetConfig::default() };
        let mut teacher = UnetModel::new(config, seed).unwrap();
        let mut r = rng(seed);
        // Move the student away from the teacher so the distillation term
        // has a non-zero gradient.
        let mut student = teacher.to_student();
        for i in 0..student.params().len() {
            let p = student.params_mut().get_mut(qdiff::tensor::ParamId(i));
            for v in p.data_mut() {
                *v += 0.05 * r.random_range(-1.0f32..1.0);
            }
        }
        let x = T64::random(vec![2, 1, 4, 4], &mut r).to_tensor();
        let t = vec![3, 700];
        let eps = T64::random(vec![2, 1, 4, 4], &mut r);
        let mut tape = Tape::default();
        let xv = tape.constant(x.clone());
        let o = teacher.forward_tape(&mut tape, xv, &t, QuantMode::Disabled).unwrap();
        let teacher_out = T64::from_tensor(tape.value(o));
        Self { student, x, t, eps, teacher_out, kd_weight: 1.0 }
    }

    /// Task plus distillation loss, accumulated in f64 from the network output.
    fn loss(&mut self, x: &Tensor) -> f64 {
        let mut tape = Tape::default();
        let xv = tape.constant(x.clone());
        let o = self.student.forward_tape(&mut tape, xv, &self.t, QuantMode::Disabled).unwrap();
        let o = T64::from_tensor(tape.value(o));
        super::mse(&o, &self.eps) + self.kd_weight * super::mse(&o, &self.teacher_out)
    }

    fn analytic(&mut self) -> (Vec<Tensor>, Tensor) {
        let mut tape = Tape::default();
        let xv = tape.input(self.x.clone());
        let o = self.student.forward_tape(&mut tape, xv, &self.t, QuantMode::Disabled).unwrap();
        let eps = tape.constant(self.eps.to_tensor());
        let teacher = tape.constant(self.teacher_out.to_tensor());
        let task = tape.mse_loss(o, eps).unwrap();
        let kd = tape.mse_loss(o, teacher).unwrap();
        let kd = tape.mul_scalar(kd, self.kd_weight as f32).unwrap();
        let total = tape.add(task, kd).unwrap();
        let grads = tape.backward(total).unwrap();
        let params = (0..self.student.params().len())
            .map(|i| grads.param(qdiff::tensor::ParamId(i)).expect("every parameter is used").clone())
            .collect();
        (params, grads.get(xv).unwrap().clone())
    }
}

/// Directional derivative check: compares `g · v` with the central
/// difference of the loss along `v` and returns the relative error.
///
/// The forward pass runs in f32, so each loss value carries a relative
/// rounding error near 1e-7 that the quotient amplifies by `1 / (2h)`. The
/// denominator is floored at `1e-5 · L / h`, well above that noise, so that
/// directions with a vanishing derivative (for instance the attention key
/// bias, which softmax ignores) are compared absolutely.
fn directional_error(g: &[f32], v: &[f32], mut loss_at: impl FnMut(f32) -> f64) -> f64 {
    let h = 1e-2f32;
    let analytic: f64 = g.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let (plus, minus) = (loss_at(h), loss_at(-h));
    let fd = (plus - minus) / (2.0 * h as f64);
    let resolution = 1e-5 * plus.abs().max(minus.abs()) / h as f64;
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(resolution)
}

/// Unit-norm directions: along the sign pattern of `g`, and a random one.
fn directions(g: &[f32], r: &mut rand_chacha::ChaCha8Rng) -> [Vec<f32>; 2] {
    let unit = |v: Vec<f32>| {
        let norm = (v.len() as f32).sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<f32>>()
    };
    let along = g.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let random = (0..g.len()).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    [unit(along), unit(random)]
}

pub fn full_student_network_with_distillation_loss() {
    for seed in 0..2 {
        let mut case = NetCase::new(seed);
        let (param_grads, x_grad) = case.analytic();
        let mut r = rng(500 + seed);
        let mut worst = (0.0f64, String::new());
        for (i, g) in param_grads.iter().enumerate() {
            let name = case.student.params().name(qdiff::tensor::ParamId(i)).to_string();
            let base = case.student.params().get(qdiff::tensor::ParamId(i)).clone();
            for v in directions(g.data(), &mut r) {
                let x = case.x.clone();
                let err = directional_error(g.data(), &v, |h| {
                    let p = case.student.params_mut().get_mut(qdiff::tensor::ParamId(i));
                    for ((dst, &b), &d) in p.data_mut().iter_mut().zip(base.data()).zip(&v) {
                        *dst = b + h * d;
                    }
                    let l = case.loss(&x);
                    case.student
                        .params_mut()
                        .get_mut(qdiff::tensor::ParamId(i))
                        .data_mut()
                        .copy_from_slice(base.data());
                    l
                });
                if err > worst.0 {
                    worst = (err, name.clone());
                }
            }
        }
        for v in directions(x_grad.data(), &mut r) {
            let x0 = case.x.clone();
            let err = directional_error(x_grad.data(), &v, |h| {
                let data = x0.data().iter().zip(&v).map(|(&a, &d)| a + h * d).collect();
                case.loss(&Tensor::new(x0.shape().to_vec(), data).unwrap())
            });
            if err > worst.0 {
                worst = (err, "input".into());
            }
        }
        assert!(worst.0 <= NET_TOL, "seed {seed}: worst relative error {:e} at {}", worst.0, worst.1);
    }
}

pub fn backward_is_bit_deterministic() {
    let mut a = NetCase::new(3);
    let mut b = NetCase::new(3);
    let (ga, xa) = a.analytic();
    let (gb, xb) = b.analytic();
    assert_eq!(xa, xb);
    assert_eq!(ga, gb);
}

/// Every op-level check in sequence.
pub fn all_ops() {
    linear_gradients();
    conv2d_gradients();
    silu_gradients();
    softmax_gradients();
    elementwise_gradients();
    reduction_gradients();
    layout_gradients();
    group_norm_gradients();
    attention_gradients();
    composite_graph_gradients();
}
