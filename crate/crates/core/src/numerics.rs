//! Precision formats and quantization math.
//!
//! INT8 is symmetric (`zero_point == 0`) over `[-127, 127]`; rounding is
//! ties-to-even everywhere. BF16 is emulated by rounding `f32` storage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{QTensor, Tensor};

pub const QMAX: i32 = 127;
pub const SCALE_FLOOR: f32 = 1e-12;
pub const OBSERVER_MOMENTUM: f32 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionFormat {
    Fp32,
    Bf16,
    Int8,
}

impl PrecisionFormat {
    pub const ALL: [PrecisionFormat; 3] = [Self::Fp32, Self::Bf16, Self::Int8];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fp32 => "fp32",
            Self::Bf16 => "bf16",
            Self::Int8 => "int8",
        }
    }
}

impl fmt::Display for PrecisionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrecisionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Self::Fp32),
            "bf16" => Ok(Self::Bf16),
            "int8" => Ok(Self::Int8),
            other => {
                Err(Error::InvalidArgument(format!("unknown precision format `{other}` (expected fp32, bf16 or int8)")))
            }
        }
    }
}

/// Rounds to the nearest bfloat16 value (8-bit exponent, 7 stored mantissa
/// bits), ties to even. NaN and infinities pass through unchanged.
#[inline]
pub fn bf16_round_f32(x: f32) -> f32 {
    if !x.is_finite() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    f32::from_bits(rounded)
}

pub fn bf16_round(x: &Tensor) -> Tensor {
    x.map(bf16_round_f32)
}

pub fn bf16_round_in_place(values: &mut [f32]) {
    for v in values {
        *v = bf16_round_f32(*v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Symmetric INT8 quantization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scales: Vec<f32>,
    zero_point: i32,
    granularity: Granularity,
}

impl QuantParams {
    pub fn per_tensor(scale: f32) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self { scales: vec![scale], zero_point: 0, granularity: Granularity::PerTensor })
    }

    pub fn per_channel(axis: usize, scales: Vec<f32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("per-channel params need at least one scale".into()));
        }
        for &s in &scales {
            check_scale(s)?;
        }
        Ok(Self { scales, zero_point: 0, granularity: Granularity::PerChannel { axis } })
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// The single scale of per-tensor params.
    pub fn scale(&self) -> Option<f32> {
        match self.granularity {
            Granularity::PerTensor => Some(self.scales[0]),
            Granularity::PerChannel { .. } => None,
        }
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Checks the params against `shape` and returns `(channels, inner)` where
    /// element `i` belongs to channel `(i / inner) % channels`.
    fn layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match self.granularity {
            Granularity::PerTensor => Ok((1, 1)),
            Granularity::PerChannel { axis } => {
                let dim = *shape
                    .get(axis)
                    .ok_or_else(|| Error::shape("quant", format!("axis {axis} out of range for {shape:?}")))?;
                if dim != self.scales.len() {
                    return Err(Error::shape(
                        "quant",
                        format!("{} per-channel scales for axis {axis} of size {dim}", self.scales.len()),
                    ));
                }
                Ok((dim, shape[axis + 1..].iter().product()))
            }
        }
    }

    /// Calls `f(range, scale)` for consecutive runs of elements sharing a scale.
    pub(crate) fn for_each_run(
        &self,
        shape: &[usize],
        len: usize,
        mut f: impl FnMut(std::ops::Range<usize>, f32),
    ) -> Result<()> {
        let (channels, inner) = self.layout(shape)?;
        if channels == 1 {
            f(0..len, self.scales[0]);
        } else {
            for (run, start) in (0..len).step_by(inner.max(1)).enumerate() {
                f(start..(start + inner).min(len), self.scales[run % channels]);
            }
        }
        Ok(())
    }
}

fn check_scale(scale: f32) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("quantization scale must be positive and finite, got {scale}")));
    }
    Ok(())
}

fn scale_from_max(max_abs: f32) -> f32 {
    (max_abs / QMAX as f32).max(SCALE_FLOOR)
}

/// Symmetric calibration: `scale = max|x| / 127`, per tensor or per slice
/// along `axis`, floored at `1e-12`.
pub fn calibrate(x: &Tensor, granularity: Granularity) -> Result<QuantParams> {
    match granularity {
        Granularity::PerTensor => QuantParams::per_tensor(scale_from_max(x.max_abs())),
        Granularity::PerChannel { axis } => {
            let shape = x.shape();
            let dim = *shape
                .get(axis)
                .ok_or_else(|| Error::shape("calibrate", format!("axis {axis} out of range for {shape:?}")))?;
            let inner: usize = shape[axis + 1..].iter().product();
            let mut maxes = vec![0.0f32; dim];
            for (i, &v) in x.data().iter().enumerate() {
                let c = (i / inner) % dim;
                maxes[c] = maxes[c].max(v.abs());
            }
            QuantParams::per_channel(axis, maxes.into_iter().map(scale_from_max).collect())
        }
    }
}

/// Adding and subtracting `1.5 * 2^23` rounds any `|v| < 2^22` to an integer
/// with the FPU's ties-to-even mode, and unlike `round_ties_even` it
/// vectorizes without SSE4.1 being enabled at compile time.
const ROUND_MAGIC: f32 = 12_582_912.0;

#[inline]
fn quantize_value(x: f32, scale: f32) -> i8 {
    let v = (x / scale).clamp(-(QMAX as f32), QMAX as f32);
    ((v + ROUND_MAGIC) - ROUND_MAGIC) as i8
}

pub fn quantize_int8(x: &Tensor, params: &QuantParams) -> Result<QTensor> {
    let src = x.data();
    let mut out = vec![0i8; src.len()];
    params.for_each_run(x.shape(), src.len(), |r, s| {
        for (o, &v) in out[r.clone()].iter_mut().zip(&src[r]) {
            *o = quantize_value(v, s);
        }
    })?;
    QTensor::new(x.shape().to_vec(), out)
}

pub fn dequantize(q: &QTensor, params: &QuantParams) -> Result<Tensor> {
    let src = q.data();
    let mut out = vec![0.0f32; src.len()];
    params.for_each_run(q.shape(), src.len(), |r, s| {
        for (o, &v) in out[r.clone()].iter_mut().zip(&src[r]) {
            *o = v as f32 * s;
        }
    })?;
    Tensor::new(q.shape().to_vec(), out)
}

/// Forward half of fake quantization: `dequantize(quantize_int8(x))`, fused.
pub fn fake_quant(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    params.for_each_run(x.shape(), src.len(), |r, s| {
        for (o, &v) in out[r.clone()].iter_mut().zip(&src[r]) {
            *o = quantize_value(v, s) as f32 * s;
        }
    })?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Clipped straight-through mask: 1 where `|x| <= 127 * scale`, else 0.
pub fn ste_mask(x: &Tensor, params: &QuantParams) -> Result<Vec<f32>> {
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    params.for_each_run(x.shape(), src.len(), |r, s| {
        let limit = QMAX as f32 * s;
        for (o, &v) in out[r.clone()].iter_mut().zip(&src[r]) {
            *o = if v.abs() <= limit { 1.0 } else { 0.0 };
        }
    })?;
    Ok(out)
}

/// Moving max-abs activation observer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxObserver {
    running_max: Option<f32>,
}

impl MinMaxObserver {
    pub fn new() -> Self {
        Self::default()
    }

    /// First observation seeds the range; later ones blend with momentum 0.99.
    pub fn update(&mut self, x: &Tensor) {
        let m = x.max_abs();
        self.running_max = Some(match self.running_max {
            None => m,
            Some(r) => OBSERVER_MOMENTUM * r + (1.0 - OBSERVER_MOMENTUM) * m,
        });
    }

    pub fn running_max(&self) -> Option<f32> {
        self.running_max
    }

    /// Per-tensor params derived from the current range, if any was observed.
    pub fn params(&self) -> Option<QuantParams> {
        self.running_max.map(|r| QuantParams::per_tensor(scale_from_max(r)).expect("floored scale is valid"))
    }
}
