//! CPU kernels: GroupNorm (two decompositions), fused attention, f32/INT8
//! GEMM, convolution lowering, and the activation-buffer plan.

pub mod attention;
pub mod buffer_plan;
pub mod conv;
pub mod gemm;
pub mod groupnorm;
pub mod pool;

pub use attention::{fused_mha, fused_mha_instrumented};
pub use buffer_plan::{buffer_plan, naive_elements, BufferPlan, TensorLifetime};
pub use groupnorm::{groupnorm_baseline, groupnorm_channel_parallel, ChannelMoments, GroupNormSpec, GroupStats};
pub use pool::WorkerPool;

use crate::error::{Error, Result};
use crate::numerics::{Granularity, QuantParams};
use crate::tensor::{QTensor, Tensor};

/// Scales for one GEMM operand: a single value or one per row/column.
fn operand_scales(params: &QuantParams, channel_axis: usize, len: usize, which: &str) -> Result<Vec<f32>> {
    match params.granularity() {
        Granularity::PerTensor => Ok(vec![params.scales()[0]; len]),
        Granularity::PerChannel { axis } if axis == channel_axis && params.scales().len() == len => {
            Ok(params.scales().to_vec())
        }
        Granularity::PerChannel { axis } => Err(Error::shape(
            "int8_gemm",
            format!(
                "{which} per-channel params must be along axis {channel_axis} with {len} scales, got axis {axis} with {}",
                params.scales().len()
            ),
        )),
    }
}

/// INT8 matrix multiply `[M,K] x [K,N] -> [M,N]` with `i32` accumulation.
///
/// Each output is `acc[i][j] * (scale_a[i] * scale_b[j])`; `pa` may be
/// per-row (axis 0) and `pb` per-column (axis 1).
pub fn int8_gemm(qa: &QTensor, qb: &QTensor, pa: &QuantParams, pb: &QuantParams) -> Result<Tensor> {
    let (m, k) = match *qa.shape() {
        [m, k] => (m, k),
        _ => return Err(Error::shape("int8_gemm", format!("A must be rank-2, got {:?}", qa.shape()))),
    };
    let (kb, n) = match *qb.shape() {
        [kb, n] => (kb, n),
        _ => return Err(Error::shape("int8_gemm", format!("B must be rank-2, got {:?}", qb.shape()))),
    };
    if k != kb {
        return Err(Error::shape("int8_gemm", format!("inner dims differ: A is {m}x{k}, B is {kb}x{n}")));
    }
    let sa = operand_scales(pa, 0, m, "A")?;
    let sb = operand_scales(pb, 1, n, "B")?;
    let mut acc = vec![0i32; m * n];
    gemm::igemm(m, n, k, qa.data(), qb.data(), &mut acc);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = acc[i * n + j] as f32 * (sa[i] * sb[j]);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_hand_case() {
        let qa = QTensor::new(vec![1, 1], vec![100]).unwrap();
        let qb = QTensor::new(vec![1, 1], vec![50]).unwrap();
        let pa = QuantParams::per_tensor(0.01).unwrap();
        let pb = QuantParams::per_tensor(0.02).unwrap();
        let out = int8_gemm(&qa, &qb, &pa, &pb).unwrap();
        assert!((out.data()[0] - 1.0).abs() <= f32::EPSILON);
    }

    #[test]
    fn zero_operand_gives_zero() {
        let qa = QTensor::new(vec![2, 3], vec![0; 6]).unwrap();
        let qb = QTensor::new(vec![3, 2], vec![5, -7, 9, 1, 2, 3]).unwrap();
        let p = QuantParams::per_tensor(0.5).unwrap();
        let out = int8_gemm(&qa, &qb, &p, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_k_mismatch_and_wrong_axis() {
        let qa = QTensor::new(vec![2, 3], vec![0; 6]).unwrap();
        let qb = QTensor::new(vec![2, 2], vec![0; 4]).unwrap();
        let p = QuantParams::per_tensor(1.0).unwrap();
        assert!(int8_gemm(&qa, &qb, &p, &p).is_err());
        let qb = QTensor::new(vec![3, 2], vec![0; 6]).unwrap();
        let wrong = QuantParams::per_channel(0, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(int8_gemm(&qa, &qb, &p, &wrong).is_err());
    }
}
