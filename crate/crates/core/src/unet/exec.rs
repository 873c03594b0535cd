//! Executors for the network body: autodiff tape, per-format inference, and
//! an activation-lifetime trace.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{
    quantizable_layers, Conv2dLayer, Executor, GroupNormLayer, LayerQuant, LinearLayer, ParamStore, QLayerRef,
    UnetModel, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::kernels::buffer_plan::TensorLifetime;
use crate::kernels::conv::{conv2d_f32, conv2d_int8};
use crate::kernels::groupnorm::{groupnorm_channel_parallel, GroupNormSpec};
use crate::kernels::pool::WorkerPool;
use crate::kernels::{fused_mha, int8_gemm};
use crate::numerics::{
    bf16_round, bf16_round_in_place, calibrate, quantize_int8, Granularity, PrecisionFormat, QuantParams,
};
use crate::tensor::{ops, ParamId, QTensor, Tape, Tensor, Var};

/// How quantized layers behave on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Quantizers are bypassed; the student computes exactly like the teacher.
    Disabled,
    /// Observers see layer inputs but nothing is quantized (PTQ calibration).
    Calibrate,
    /// Observers update, then inputs and weights are fake-quantized (QAT).
    Observe,
    /// Fake quantization with the frozen parameters; no observer updates.
    Frozen,
}

// Weight scales are per output channel: axis 0 of a conv weight
// `[O, C, kh, kw]`, axis 1 of a linear weight `[D, E]`.
const CONV_WEIGHT_AXIS: usize = 0;
const LINEAR_WEIGHT_AXIS: usize = 1;

fn missing(layer: &str) -> Error {
    Error::MissingQuantParams { layer: layer.to_string() }
}

pub(super) fn freeze(arch: &super::Arch, params: &ParamStore, quant: &mut [LayerQuant]) -> Result<()> {
    for layer in quantizable_layers(arch) {
        let (slot, weight, axis) = match layer {
            QLayerRef::Conv(c) => (c.slot, c.weight, CONV_WEIGHT_AXIS),
            QLayerRef::Linear(l) => (l.slot, l.weight, LINEAR_WEIGHT_AXIS),
        };
        let lq = &mut quant[slot];
        if !lq.quantized {
            continue;
        }
        lq.activation = Some(lq.observer.params().ok_or_else(|| missing(&lq.name))?);
        lq.weight = Some(calibrate(params.get(weight), Granularity::PerChannel { axis })?);
    }
    Ok(())
}

// ---- tape -----------------------------------------------------------------

pub(super) struct TapeExec<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    quant: &'a mut [LayerQuant],
    mode: QuantMode,
    vars: HashMap<ParamId, Var>,
}

impl<'a> TapeExec<'a> {
    pub(super) fn new(
        tape: &'a mut Tape,
        params: &'a ParamStore,
        quant: &'a mut [LayerQuant],
        mode: QuantMode,
    ) -> Self {
        Self { tape, params, quant, mode, vars: HashMap::new() }
    }

    fn p(&mut self, id: ParamId) -> Var {
        let (tape, params) = (&mut *self.tape, self.params);
        *self.vars.entry(id).or_insert_with(|| tape.param(params.get(id).clone(), id))
    }

    fn quantize_operands(&mut self, slot: usize, x: Var, w: Var, axis: usize) -> Result<(Var, Var)> {
        let lq = &mut self.quant[slot];
        if !lq.quantized {
            return Ok((x, w));
        }
        let (ap, wp) = match self.mode {
            QuantMode::Disabled => return Ok((x, w)),
            QuantMode::Calibrate => {
                lq.observer.update(self.tape.value(x));
                return Ok((x, w));
            }
            QuantMode::Observe => {
                lq.observer.update(self.tape.value(x));
                let ap = lq.observer.params().expect("observer was just updated");
                (ap, calibrate(self.tape.value(w), Granularity::PerChannel { axis })?)
            }
            QuantMode::Frozen => (
                lq.activation.clone().ok_or_else(|| missing(&lq.name))?,
                lq.weight.clone().ok_or_else(|| missing(&lq.name))?,
            ),
        };
        Ok((self.tape.fake_quant(x, &ap)?, self.tape.fake_quant(w, &wp)?))
    }
}

impl Executor for TapeExec<'_> {
    type V = Var;

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.tape.value(*v).shape().to_vec()
    }

    fn conv(&mut self, layer: &Conv2dLayer, x: &Var) -> Result<Var> {
        let (w, b) = (self.p(layer.weight), self.p(layer.bias));
        let (x, w) = self.quantize_operands(layer.slot, *x, w, CONV_WEIGHT_AXIS)?;
        self.tape.conv2d(x, w, Some(b), layer.stride, layer.padding)
    }

    fn linear(&mut self, layer: &LinearLayer, x: &Var) -> Result<Var> {
        let (w, b) = (self.p(layer.weight), self.p(layer.bias));
        let (x, w) = self.quantize_operands(layer.slot, *x, w, LINEAR_WEIGHT_AXIS)?;
        self.tape.linear(x, w, Some(b))
    }

    fn group_norm(&mut self, layer: &GroupNormLayer, x: &Var) -> Result<Var> {
        let (g, b) = (self.p(layer.gamma), self.p(layer.beta));
        self.tape.group_norm(*x, g, b, layer.groups, NORM_EPS)
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        self.tape.silu(*x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn add_channel_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        self.tape.add_channel_bias(*x, *b)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat(&[*a, *b], 1)
    }

    fn upsample(&mut self, x: &Var) -> Result<Var> {
        self.tape.upsample_nearest2x(*x)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        self.tape.reshape(*x, shape)
    }

    fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        self.tape.permute(*x, perm)
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var) -> Result<Var> {
        self.tape.attention(*q, *k, *v)
    }
}

// ---- inference ------------------------------------------------------------

struct Int8Layer {
    weight: QTensor,
    weight_params: QuantParams,
    activation: QuantParams,
}

/// A model prepared for inference in every precision format: BF16-rounded
/// parameter copies and pre-quantized INT8 weights are built once up front.
pub struct InferenceModel {
    model: UnetModel,
    pool: WorkerPool,
    bf16: Vec<Tensor>,
    /// Per-slot INT8 weights, or the first layer lacking frozen params.
    int8: std::result::Result<Vec<Option<Int8Layer>>, String>,
}

impl InferenceModel {
    pub fn new(model: UnetModel, pool: WorkerPool) -> Result<Self> {
        let bf16 = model.params.iter().map(|(_, _, t)| bf16_round(t)).collect();
        let int8 = Self::prepare_int8(&model)?;
        Ok(Self { model, pool, bf16, int8 })
    }

    fn prepare_int8(model: &UnetModel) -> Result<std::result::Result<Vec<Option<Int8Layer>>, String>> {
        let layers = quantizable_layers(&model.arch);
        if !model.quant.iter().any(|q| q.quantized) {
            return Ok(Err(model.quant.first().map(|q| q.name.clone()).unwrap_or_default()));
        }
        let mut out: Vec<Option<Int8Layer>> = (0..model.quant.len()).map(|_| None).collect();
        for layer in layers {
            let (slot, weight) = match layer {
                QLayerRef::Conv(c) => (c.slot, c.weight),
                QLayerRef::Linear(l) => (l.slot, l.weight),
            };
            let lq = &model.quant[slot];
            if !lq.quantized {
                continue;
            }
            let (Some(act), Some(wp)) = (&lq.activation, &lq.weight) else {
                return Ok(Err(lq.name.clone()));
            };
            out[slot] = Some(Int8Layer {
                weight: quantize_int8(model.params.get(weight), wp)?,
                weight_params: wp.clone(),
                activation: act.clone(),
            });
        }
        Ok(Ok(out))
    }

    pub fn model(&self) -> &UnetModel {
        &self.model
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    /// Whether an INT8 forward is possible.
    pub fn supports_int8(&self) -> bool {
        self.int8.is_ok()
    }

    /// Noise estimate for `x[N, C, H, W]` at timesteps `t[N]` in `format`.
    pub fn predict(&self, x: &Tensor, t: &[usize], format: PrecisionFormat) -> Result<Tensor> {
        self.model.check_input(x.shape(), t)?;
        let int8 = match format {
            PrecisionFormat::Int8 => Some(self.int8.as_ref().map_err(|layer| missing(layer))?.as_slice()),
            _ => None,
        };
        let temb = ops::timestep_embedding(t, self.model.config.temb_dim)?;
        let mut e = InferExec { m: self, format, int8 };
        let out = super::run(&self.model.arch, &mut e, Rc::new(x.clone()), Rc::new(temb))?;
        Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }
}

struct InferExec<'a> {
    m: &'a InferenceModel,
    format: PrecisionFormat,
    int8: Option<&'a [Option<Int8Layer>]>,
}

impl InferExec<'_> {
    fn param(&self, id: ParamId) -> &Tensor {
        match self.format {
            PrecisionFormat::Bf16 => &self.m.bf16[id.0],
            _ => self.m.model.params.get(id),
        }
    }

    fn int8_layer(&self, slot: usize) -> Option<&Int8Layer> {
        self.int8.and_then(|l| l[slot].as_ref())
    }

    fn finish(&self, mut y: Tensor) -> Rc<Tensor> {
        if self.format == PrecisionFormat::Bf16 {
            bf16_round_in_place(y.data_mut());
        }
        Rc::new(y)
    }

    fn layer_input(&self, x: &Tensor) -> Option<Tensor> {
        (self.format == PrecisionFormat::Bf16).then(|| bf16_round(x))
    }
}

impl Executor for InferExec<'_> {
    type V = Rc<Tensor>;

    fn shape(&self, v: &Rc<Tensor>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn conv(&mut self, layer: &Conv2dLayer, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        let bias = self.param(layer.bias);
        if let Some(q) = self.int8_layer(layer.slot) {
            let scale = q.activation.scale().expect("activation params are per-tensor");
            let xq = quantize_int8(x, &q.activation)?;
            let y = conv2d_int8(
                &xq,
                scale,
                &q.weight,
                q.weight_params.scales(),
                Some(bias.data()),
                layer.stride,
                layer.padding,
            )?;
            return Ok(Rc::new(y));
        }
        let rounded = self.layer_input(x);
        let y = conv2d_f32(
            rounded.as_ref().unwrap_or(x),
            self.param(layer.weight),
            Some(bias),
            layer.stride,
            layer.padding,
        )?;
        Ok(self.finish(y))
    }

    fn linear(&mut self, layer: &LinearLayer, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        let bias = self.param(layer.bias);
        if let Some(q) = self.int8_layer(layer.slot) {
            let xq = quantize_int8(x, &q.activation)?;
            let mut y = int8_gemm(&xq, &q.weight, &q.activation, &q.weight_params)?;
            let e = bias.numel();
            for row in y.data_mut().chunks_exact_mut(e) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            return Ok(Rc::new(y));
        }
        let rounded = self.layer_input(x);
        let y = ops::linear(rounded.as_ref().unwrap_or(x), self.param(layer.weight), Some(bias))?;
        Ok(self.finish(y))
    }

    fn group_norm(&mut self, layer: &GroupNormLayer, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        let (g, b) = (self.m.model.params.get(layer.gamma), self.m.model.params.get(layer.beta));
        let spec = GroupNormSpec::new(g.numel(), layer.groups, NORM_EPS, g.data().to_vec(), b.data().to_vec())?;
        Ok(Rc::new(groupnorm_channel_parallel(x, &spec, &self.m.pool)?))
    }

    fn silu(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::silu(x)))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::add(a, b)?))
    }

    fn add_channel_bias(&mut self, x: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::add_channel_bias(x, b)?))
    }

    fn concat_channels(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::concat(&[a, b], 1)?))
    }

    fn upsample(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::upsample_nearest2x(x)?))
    }

    fn reshape(&mut self, x: &Rc<Tensor>, shape: &[usize]) -> Result<Rc<Tensor>> {
        Ok(Rc::new(x.reshape(shape.to_vec())?))
    }

    fn permute(&mut self, x: &Rc<Tensor>, perm: &[usize]) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::permute(x, perm)?))
    }

    fn attention(&mut self, q: &Rc<Tensor>, k: &Rc<Tensor>, v: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(fused_mha(q, k, v, &self.m.pool)?))
    }
}

// ---- trace ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub(super) struct TraceVal {
    id: usize,
    shape: Vec<usize>,
}

/// Records when each activation is produced and last read. Shapes are
/// propagated symbolically; nothing is computed.
pub(super) struct TraceExec<'a> {
    params: &'a ParamStore,
    lifetimes: Vec<TensorLifetime>,
    step: usize,
}

impl<'a> TraceExec<'a> {
    pub(super) fn new(params: &'a ParamStore) -> Self {
        Self { params, lifetimes: Vec::new(), step: 0 }
    }

    pub(super) fn input(&mut self, name: &str, shape: Vec<usize>) -> TraceVal {
        self.lifetimes.push(TensorLifetime {
            name: name.to_string(),
            numel: shape.iter().product(),
            first: 0,
            last: 0,
        });
        TraceVal { id: self.lifetimes.len() - 1, shape }
    }

    fn op(&mut self, name: impl Into<String>, inputs: &[&TraceVal], shape: Vec<usize>) -> TraceVal {
        self.step += 1;
        for v in inputs {
            let l = &mut self.lifetimes[v.id];
            l.last = l.last.max(self.step);
        }
        self.lifetimes.push(TensorLifetime {
            name: name.into(),
            numel: shape.iter().product(),
            first: self.step,
            last: self.step,
        });
        TraceVal { id: self.lifetimes.len() - 1, shape }
    }

    /// The output stays live one step past the end, for the caller to read.
    pub(super) fn finish(mut self, out: TraceVal) -> Vec<TensorLifetime> {
        self.lifetimes[out.id].last = self.step + 1;
        self.lifetimes
    }
}

impl Executor for TraceExec<'_> {
    type V = TraceVal;

    fn shape(&self, v: &TraceVal) -> Vec<usize> {
        v.shape.clone()
    }

    fn conv(&mut self, layer: &Conv2dLayer, x: &TraceVal) -> Result<TraceVal> {
        let w = self.params.get(layer.weight).shape();
        let out = |len: usize, k: usize| (len + 2 * layer.padding - k) / layer.stride + 1;
        let shape = vec![x.shape[0], w[0], out(x.shape[2], w[2]), out(x.shape[3], w[3])];
        Ok(self.op(layer.name.clone(), &[x], shape))
    }

    fn linear(&mut self, layer: &LinearLayer, x: &TraceVal) -> Result<TraceVal> {
        let e = self.params.get(layer.weight).shape()[1];
        Ok(self.op(layer.name.clone(), &[x], vec![x.shape[0], e]))
    }

    fn group_norm(&mut self, layer: &GroupNormLayer, x: &TraceVal) -> Result<TraceVal> {
        Ok(self.op(layer.name.clone(), &[x], x.shape.clone()))
    }

    fn silu(&mut self, x: &TraceVal) -> Result<TraceVal> {
        Ok(self.op("silu", &[x], x.shape.clone()))
    }

    fn add(&mut self, a: &TraceVal, b: &TraceVal) -> Result<TraceVal> {
        Ok(self.op("add", &[a, b], a.shape.clone()))
    }

    fn add_channel_bias(&mut self, x: &TraceVal, b: &TraceVal) -> Result<TraceVal> {
        Ok(self.op("add_channel_bias", &[x, b], x.shape.clone()))
    }

    fn concat_channels(&mut self, a: &TraceVal, b: &TraceVal) -> Result<TraceVal> {
        let mut shape = a.shape.clone();
        shape[1] += b.shape[1];
        Ok(self.op("concat", &[a, b], shape))
    }

    fn upsample(&mut self, x: &TraceVal) -> Result<TraceVal> {
        let s = &x.shape;
        Ok(self.op("upsample", &[x], vec![s[0], s[1], 2 * s[2], 2 * s[3]]))
    }

    fn reshape(&mut self, x: &TraceVal, shape: &[usize]) -> Result<TraceVal> {
        Ok(self.op("reshape", &[x], shape.to_vec()))
    }

    fn permute(&mut self, x: &TraceVal, perm: &[usize]) -> Result<TraceVal> {
        let shape = perm.iter().map(|&p| x.shape[p]).collect();
        Ok(self.op("permute", &[x], shape))
    }

    fn attention(&mut self, q: &TraceVal, k: &TraceVal, v: &TraceVal) -> Result<TraceVal> {
        Ok(self.op("attention", &[q, k, v], q.shape.clone()))
    }
}
