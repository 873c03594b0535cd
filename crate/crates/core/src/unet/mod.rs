//! Toy denoising Unet.
//!
//! Layout for the default two-level config on 16x16 inputs:
//!
//! ```text
//! t -> sinusoidal -> time1 -> silu -> time2 -> silu = emb
//! x -> conv_in -> res(16) -> [skip0] -> down(stride 2)
//!   -> res(32) -> [skip1] -> attention(2 heads, 8x8) -> mid res(32)
//!   -> cat skip1 -> res(32) -> upsample
//!   -> cat skip0 -> res(16) -> norm -> silu -> conv_out -> eps_hat
//! ```
//!
//! The network body is written once against [`Executor`]; training, each
//! inference format and the activation trace are separate executors.

mod checkpoint;
mod exec;

pub use checkpoint::{load_checkpoint, param_hash, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::{InferenceModel, QuantMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::buffer_plan::TensorLifetime;
use crate::kernels::groupnorm::DEFAULT_EPS;
use crate::numerics::{MinMaxObserver, QuantParams};
use crate::tensor::{ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub attention: bool,
    pub heads: usize,
    pub temb_dim: usize,
    pub image_size: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            channel_mults: vec![1, 2],
            groups: 4,
            attention: true,
            heads: 2,
            temb_dim: 32,
            image_size: 16,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.groups == 0 || self.heads == 0 {
            return bad("unet channel, group and head counts must be >= 1".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad(format!("unet.channel_mults must be non-empty and positive, got {:?}", self.channel_mults));
        }
        for &m in &self.channel_mults {
            let ch = self.base_channels * m;
            if ch % self.groups != 0 {
                return bad(format!(
                    "unet level width {ch} (base {} x mult {m}) is not divisible by groups {}",
                    self.base_channels, self.groups
                ));
            }
        }
        if self.base_channels % self.groups != 0 {
            return bad(format!("unet.base_channels {} not divisible by groups {}", self.base_channels, self.groups));
        }
        let deepest = self.base_channels * self.channel_mults[self.channel_mults.len() - 1];
        if self.attention && deepest % self.heads != 0 {
            return bad(format!("attention width {deepest} not divisible by heads {}", self.heads));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return bad(format!("unet.temb_dim must be even and >= 2, got {}", self.temb_dim));
        }
        let factor = 1usize << (self.channel_mults.len() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return bad(format!(
                "unet.image_size {} must be divisible by {factor} for {} levels",
                self.image_size,
                self.channel_mults.len()
            ));
        }
        Ok(())
    }
}

/// Named parameter tensors, addressed by [`ParamId`] (the insertion index).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2dLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    /// Index into the model's per-layer quantization table.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv2dLayer,
    emb: LinearLayer,
    norm2: GroupNormLayer,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNormLayer,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    proj: LinearLayer,
    heads: usize,
}

#[derive(Clone, Debug)]
struct DownLevel {
    res: ResBlock,
    down: Option<Conv2dLayer>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    upsample: bool,
}

#[derive(Clone, Debug)]
struct Arch {
    time1: LinearLayer,
    time2: LinearLayer,
    conv_in: Conv2dLayer,
    down: Vec<DownLevel>,
    attn: Option<AttnBlock>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNormLayer,
    conv_out: Conv2dLayer,
}

/// Creates parameters in a fixed order, either randomly initialized or zeroed
/// (for loading).
struct Builder {
    params: ParamStore,
    quant: Vec<LayerQuant>,
    rng: Option<ChaCha8Rng>,
}

impl Builder {
    fn tensor(&mut self, shape: Vec<usize>, std: f32) -> Result<Tensor> {
        match &mut self.rng {
            Some(rng) if std > 0.0 => Tensor::randn(shape, std, rng),
            _ => Tensor::zeros(shape),
        }
    }

    fn slot(&mut self, name: &str) -> usize {
        self.quant.push(LayerQuant::new(name));
        self.quant.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f32) -> Result<Conv2dLayer> {
        let std = gain / ((cin * k * k) as f32).sqrt();
        let w = self.tensor(vec![cout, cin, k, k], std)?;
        let b = Tensor::zeros(vec![cout])?;
        Ok(Conv2dLayer {
            name: name.to_string(),
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), b),
            stride,
            padding: k / 2,
            slot: self.slot(name),
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<LinearLayer> {
        let w = self.tensor(vec![din, dout], 1.0 / (din as f32).sqrt())?;
        let b = Tensor::zeros(vec![dout])?;
        Ok(LinearLayer {
            name: name.to_string(),
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), b),
            slot: self.slot(name),
        })
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNormLayer> {
        Ok(GroupNormLayer {
            name: name.to_string(),
            gamma: self.params.push(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)?),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros(vec![channels])?),
            groups,
        })
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize, groups: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin, groups)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1.0)?,
            emb: self.linear(&format!("{name}.emb"), emb, cout)?,
            norm2: self.norm(&format!("{name}.norm2"), cout, groups)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1.0)?,
            skip: if cin != cout { Some(self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 1.0)?) } else { None },
        })
    }
}

fn build(config: &UnetConfig, rng: Option<ChaCha8Rng>) -> Result<(Arch, ParamStore, Vec<LayerQuant>)> {
    config.validate()?;
    let mut b = Builder { params: ParamStore::default(), quant: Vec::new(), rng };
    let g = config.groups;
    let hidden = 2 * config.temb_dim;
    let time1 = b.linear("time1", config.temb_dim, hidden)?;
    let time2 = b.linear("time2", hidden, hidden)?;
    let widths: Vec<usize> = config.channel_mults.iter().map(|m| m * config.base_channels).collect();
    let conv_in = b.conv("conv_in", config.in_channels, config.base_channels, 3, 1, 1.0)?;
    let mut down = Vec::new();
    let mut cur = config.base_channels;
    for (l, &w) in widths.iter().enumerate() {
        let res = b.res(&format!("down{l}.res"), cur, w, hidden, g)?;
        cur = w;
        let dn = if l + 1 < widths.len() { Some(b.conv(&format!("down{l}.down"), w, w, 3, 2, 1.0)?) } else { None };
        down.push(DownLevel { res, down: dn });
    }
    let attn = if config.attention {
        Some(AttnBlock {
            norm: b.norm("attn.norm", cur, g)?,
            q: b.linear("attn.q", cur, cur)?,
            k: b.linear("attn.k", cur, cur)?,
            v: b.linear("attn.v", cur, cur)?,
            proj: b.linear("attn.proj", cur, cur)?,
            heads: config.heads,
        })
    } else {
        None
    };
    let mid = b.res("mid.res", cur, cur, hidden, g)?;
    let mut up = Vec::new();
    for (l, &w) in widths.iter().enumerate().rev() {
        let res = b.res(&format!("up{l}.res"), cur + w, w, hidden, g)?;
        cur = w;
        up.push(UpLevel { res, upsample: l > 0 });
    }
    let norm_out = b.norm("norm_out", cur, g)?;
    let conv_out = b.conv("conv_out", cur, config.in_channels, 3, 1, 0.1)?;
    let arch = Arch { time1, time2, conv_in, down, attn, mid, up, norm_out, conv_out };
    Ok((arch, b.params, b.quant))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Quantization state of one conv or linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub name: String,
    /// Whether this layer runs through quantizers at all.
    pub quantized: bool,
    pub observer: MinMaxObserver,
    /// Frozen per-tensor input-activation params.
    pub activation: Option<QuantParams>,
    /// Frozen per-output-channel weight params.
    pub weight: Option<QuantParams>,
}

impl LayerQuant {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            quantized: false,
            observer: MinMaxObserver::new(),
            activation: None,
            weight: None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.activation.is_some() && self.weight.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct UnetModel {
    config: UnetConfig,
    role: Role,
    arch: Arch,
    params: ParamStore,
    quant: Vec<LayerQuant>,
}

impl UnetModel {
    /// Randomly initialized full-precision model.
    pub fn new(config: UnetConfig, seed: u64) -> Result<Self> {
        let (arch, params, quant) = build(&config, Some(ChaCha8Rng::seed_from_u64(seed)))?;
        Ok(Self { config, role: Role::Teacher, arch, params, quant })
    }

    /// Zero-filled skeleton with the parameter layout of `config`.
    pub(crate) fn skeleton(config: UnetConfig, role: Role) -> Result<Self> {
        let (arch, params, quant) = build(&config, None)?;
        Ok(Self { config, role, arch, params, quant })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn quant(&self) -> &[LayerQuant] {
        &self.quant
    }

    pub fn quant_mut(&mut self) -> &mut [LayerQuant] {
        &mut self.quant
    }

    /// Deep copy with every quantizer removed.
    pub fn to_teacher(&self) -> Self {
        let mut m = self.clone();
        m.role = Role::Teacher;
        m.quant = m.quant.iter().map(|q| LayerQuant::new(&q.name)).collect();
        m
    }

    /// Same weights with fake quantization on every conv and linear layer and
    /// fresh observers.
    pub fn to_student(&self) -> Self {
        let mut m = self.to_teacher();
        m.role = Role::Student;
        for q in &mut m.quant {
            q.quantized = true;
        }
        m
    }

    pub fn is_calibrated(&self) -> bool {
        self.quant.iter().any(|q| q.quantized) && self.quant.iter().filter(|q| q.quantized).all(LayerQuant::is_frozen)
    }

    /// Freezes activation ranges from the observers and weight scales from
    /// the current weights.
    pub fn freeze_quant_params(&mut self) -> Result<()> {
        exec::freeze(&self.arch, &self.params, &mut self.quant)
    }

    pub(crate) fn check_input(&self, x: &[usize], t: &[usize]) -> Result<usize> {
        let c = &self.config;
        let expect = [x.first().copied().unwrap_or(0), c.in_channels, c.image_size, c.image_size];
        if x != expect || x[0] == 0 {
            return Err(Error::shape(
                "unet_forward",
                format!("input {x:?} must be [N, {}, {}, {}]", c.in_channels, c.image_size, c.image_size),
            ));
        }
        if t.len() != x[0] {
            return Err(Error::shape("unet_forward", format!("{} timesteps for batch of {}", t.len(), x[0])));
        }
        Ok(x[0])
    }

    /// Records a forward pass on `tape`. `x` must be `[N, C, H, W]` and `t`
    /// one timestep per sample.
    pub fn forward_tape(&mut self, tape: &mut Tape, x: Var, t: &[usize], mode: QuantMode) -> Result<Var> {
        self.check_input(tape.value(x).shape(), t)?;
        let temb = crate::tensor::ops::timestep_embedding(t, self.config.temb_dim)?;
        let temb = tape.constant(temb);
        let mut e = exec::TapeExec::new(tape, &self.params, &mut self.quant, mode);
        run(&self.arch, &mut e, x, temb)
    }

    /// Activation lifetimes of one forward pass, in execution order.
    pub fn activation_trace(&self, batch: usize) -> Result<Vec<TensorLifetime>> {
        let c = &self.config;
        let mut e = exec::TraceExec::new(&self.params);
        let x = e.input("x", vec![batch, c.in_channels, c.image_size, c.image_size]);
        let temb = e.input("temb", vec![batch, c.temb_dim]);
        let out = run(&self.arch, &mut e, x, temb)?;
        Ok(e.finish(out))
    }
}

/// One way of evaluating the network body.
pub(crate) trait Executor {
    type V: Clone;
    fn shape(&self, v: &Self::V) -> Vec<usize>;
    fn conv(&mut self, layer: &Conv2dLayer, x: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, layer: &LinearLayer, x: &Self::V) -> Result<Self::V>;
    fn group_norm(&mut self, layer: &GroupNormLayer, x: &Self::V) -> Result<Self::V>;
    fn silu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_channel_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V>;
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Result<Self::V>;
}

pub(crate) const NORM_EPS: f32 = DEFAULT_EPS;

fn res_block<E: Executor>(e: &mut E, b: &ResBlock, x: &E::V, emb: &E::V) -> Result<E::V> {
    let h = e.group_norm(&b.norm1, x)?;
    let h = e.silu(&h)?;
    let h = e.conv(&b.conv1, &h)?;
    let t = e.linear(&b.emb, emb)?;
    let h = e.add_channel_bias(&h, &t)?;
    let h = e.group_norm(&b.norm2, &h)?;
    let h = e.silu(&h)?;
    let h = e.conv(&b.conv2, &h)?;
    let skip = match &b.skip {
        Some(s) => e.conv(s, x)?,
        None => x.clone(),
    };
    e.add(&h, &skip)
}

fn attn_block<E: Executor>(e: &mut E, a: &AttnBlock, x: &E::V) -> Result<E::V> {
    let s = e.shape(x);
    let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let (l, d) = (hh * ww, c / a.heads);
    let y = e.group_norm(&a.norm, x)?;
    let y = e.reshape(&y, &[n, c, l])?;
    let y = e.permute(&y, &[0, 2, 1])?;
    let y = e.reshape(&y, &[n * l, c])?;
    let heads = |layer: &LinearLayer, e: &mut E| -> Result<E::V> {
        let t = e.linear(layer, &y)?;
        let t = e.reshape(&t, &[n, l, a.heads, d])?;
        e.permute(&t, &[0, 2, 1, 3])
    };
    let q = heads(&a.q, e)?;
    let k = heads(&a.k, e)?;
    let v = heads(&a.v, e)?;
    let o = e.attention(&q, &k, &v)?;
    let o = e.permute(&o, &[0, 2, 1, 3])?;
    let o = e.reshape(&o, &[n * l, c])?;
    let o = e.linear(&a.proj, &o)?;
    let o = e.reshape(&o, &[n, l, c])?;
    let o = e.permute(&o, &[0, 2, 1])?;
    let o = e.reshape(&o, &[n, c, hh, ww])?;
    e.add(x, &o)
}

fn run<E: Executor>(arch: &Arch, e: &mut E, x: E::V, temb: E::V) -> Result<E::V> {
    let h = e.linear(&arch.time1, &temb)?;
    let h = e.silu(&h)?;
    let h = e.linear(&arch.time2, &h)?;
    let emb = e.silu(&h)?;

    let mut h = e.conv(&arch.conv_in, &x)?;
    let mut skips = Vec::with_capacity(arch.down.len());
    for level in &arch.down {
        h = res_block(e, &level.res, &h, &emb)?;
        skips.push(h.clone());
        if let Some(d) = &level.down {
            h = e.conv(d, &h)?;
        }
    }
    if let Some(a) = &arch.attn {
        h = attn_block(e, a, &h)?;
    }
    h = res_block(e, &arch.mid, &h, &emb)?;
    for (level, skip) in arch.up.iter().zip(skips.iter().rev()) {
        h = e.concat_channels(&h, skip)?;
        h = res_block(e, &level.res, &h, &emb)?;
        if level.upsample {
            h = e.upsample(&h)?;
        }
    }
    let h = e.group_norm(&arch.norm_out, &h)?;
    let h = e.silu(&h)?;
    e.conv(&arch.conv_out, &h)
}

/// Every conv and linear layer of the network, in parameter order.
fn quantizable_layers(arch: &Arch) -> Vec<QLayerRef<'_>> {
    let mut out = vec![QLayerRef::Linear(&arch.time1), QLayerRef::Linear(&arch.time2), QLayerRef::Conv(&arch.conv_in)];
    fn push_res<'a>(b: &'a ResBlock, out: &mut Vec<QLayerRef<'a>>) {
        out.push(QLayerRef::Conv(&b.conv1));
        out.push(QLayerRef::Linear(&b.emb));
        out.push(QLayerRef::Conv(&b.conv2));
        if let Some(s) = &b.skip {
            out.push(QLayerRef::Conv(s));
        }
    }
    for level in &arch.down {
        push_res(&level.res, &mut out);
        if let Some(d) = &level.down {
            out.push(QLayerRef::Conv(d));
        }
    }
    if let Some(a) = &arch.attn {
        for l in [&a.q, &a.k, &a.v, &a.proj] {
            out.push(QLayerRef::Linear(l));
        }
    }
    push_res(&arch.mid, &mut out);
    for level in &arch.up {
        push_res(&level.res, &mut out);
    }
    out.push(QLayerRef::Conv(&arch.conv_out));
    out
}

#[derive(Clone, Copy)]
enum QLayerRef<'a> {
    Conv(&'a Conv2dLayer),
    Linear(&'a LinearLayer),
}
