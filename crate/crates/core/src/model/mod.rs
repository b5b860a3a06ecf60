//! The multi-step spiking U-Net: `layers` encoder blocks, two residual
//! blocks, and `layers` decoder blocks with nearest-neighbour upsampling,
//! additive skips, and an integrator depth head per decoder layer.
//!
//! Encoder layer `ℓ` has `base · 2^ℓ` channels at `1/2^(ℓ+1)` resolution.
//! Decoder layer `ℓ` upsamples ×2 and maps to the channel width of the
//! encoder output it is summed with; the last decoder layer works at full
//! resolution and is summed with its own upsampled input. Inputs are
//! zero-padded to a multiple of `2^layers` and the depth map is cropped
//! back.

pub mod checkpoint;

use rand::Rng;

use crate::attention::{tcsa, AttentionParams, AttentionSet, Reduction};
use crate::error::{Error, Result};
use crate::events::{Geometry, StackedTensor};
use crate::neuron::{integrate, spike_layer, IfParams, NeuronMode};
use crate::tensor::{ops, ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

/// Fan-in scaled uniform initialisation, bound `sqrt(1/fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("positive shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    /// Continuous conv output propagates; no attention.
    Ce,
    /// Spikes propagate; no attention.
    De,
    /// Attention before the strided conv; continuous output propagates.
    CeAtt,
    /// Attention before the strided conv; spikes propagate.
    DeAtt1,
    /// Attention after the strided conv; spikes propagate.
    DeAtt2,
}

impl EncoderVariant {
    pub fn has_attention(self) -> bool {
        !matches!(self, EncoderVariant::Ce | EncoderVariant::De)
    }

    pub fn emits_spikes(self) -> bool {
        !matches!(self, EncoderVariant::Ce | EncoderVariant::CeAtt)
    }

    fn code(self) -> f64 {
        match self {
            EncoderVariant::Ce => 0.0,
            EncoderVariant::De => 1.0,
            EncoderVariant::CeAtt => 2.0,
            EncoderVariant::DeAtt1 => 3.0,
            EncoderVariant::DeAtt2 => 4.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        Some(match c as i64 {
            0 => EncoderVariant::Ce,
            1 => EncoderVariant::De,
            2 => EncoderVariant::CeAtt,
            3 => EncoderVariant::DeAtt1,
            4 => EncoderVariant::DeAtt2,
            _ => return None,
        })
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(EncoderVariant::Ce),
            "de" => Ok(EncoderVariant::De),
            "ce-att" => Ok(EncoderVariant::CeAtt),
            "de-att1" => Ok(EncoderVariant::DeAtt1),
            "de-att2" => Ok(EncoderVariant::DeAtt2),
            _ => Err(Error::Validation(format!(
                "unknown encoder variant {s:?} (CE, DE, CE-Att, DE-Att1, DE-Att2)"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderVariant::Ce => "CE",
            EncoderVariant::De => "DE",
            EncoderVariant::CeAtt => "CE-Att",
            EncoderVariant::DeAtt1 => "DE-Att1",
            EncoderVariant::DeAtt2 => "DE-Att2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub layers: usize,
    pub encoder_variant: EncoderVariant,
    pub attention: AttentionSet,
    pub reduction: Reduction,
    pub neuron: IfParams,
    pub geometry: Geometry,
    pub conv_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            time_steps: 5,
            in_channels: 4,
            base_channels: 8,
            layers: 4,
            encoder_variant: EncoderVariant::CeAtt,
            attention: AttentionSet::CSA,
            reduction: Reduction::default(),
            neuron: IfParams::default(),
            geometry: Geometry::new(64, 64),
            conv_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.time_steps == 0 {
            return bad("time_steps must be >= 1".into());
        }
        if self.in_channels != 2 && self.in_channels != 4 {
            return bad(format!("in_channels must be 2 or 4, got {}", self.in_channels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.layers == 0 || self.layers > 8 {
            return bad(format!("layers must be in 1..=8, got {}", self.layers));
        }
        if self.geometry.height == 0 || self.geometry.width == 0 {
            return bad("geometry must be non-empty".into());
        }
        if self.neuron.mode == NeuronMode::Integrator {
            return bad("network neurons cannot run in integrator mode".into());
        }
        self.neuron.validate()
    }

    /// Geometry rounded up to a multiple of `2^layers`.
    pub fn padded_geometry(&self) -> Geometry {
        let m = 1usize << self.layers;
        Geometry::new(
            self.geometry.height.div_ceil(m) * m,
            self.geometry.width.div_ceil(m) * m,
        )
    }

    pub fn encoder_channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }

    fn encoder_input_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.encoder_channels(layer - 1)
        }
    }

    pub fn decoder_channels(&self, layer: usize) -> usize {
        let level = (self.layers as isize - 2 - layer as isize).max(0) as usize;
        self.base_channels << level
    }

    fn decoder_input_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.encoder_channels(self.layers - 1)
        } else {
            self.decoder_channels(layer - 1)
        }
    }

    /// Numeric encoding stored alongside checkpoints.
    pub fn to_meta(&self) -> Vec<(String, f64)> {
        let a = self.attention;
        vec![
            ("meta.time_steps".into(), self.time_steps as f64),
            ("meta.in_channels".into(), self.in_channels as f64),
            ("meta.base_channels".into(), self.base_channels as f64),
            ("meta.layers".into(), self.layers as f64),
            ("meta.encoder_variant".into(), self.encoder_variant.code()),
            (
                "meta.attention".into(),
                f64::from(u8::from(a.temporal) | u8::from(a.channel) << 1 | u8::from(a.spatial) << 2),
            ),
            ("meta.reduction_temporal".into(), self.reduction.temporal as f64),
            ("meta.reduction_channel".into(), self.reduction.channel as f64),
            ("meta.v_threshold".into(), self.neuron.v_threshold),
            ("meta.v_reset".into(), self.neuron.v_reset),
            ("meta.surrogate_alpha".into(), self.neuron.surrogate_alpha),
            (
                "meta.neuron_mode".into(),
                if self.neuron.mode == NeuronMode::Smooth { 1.0 } else { 0.0 },
            ),
            ("meta.height".into(), self.geometry.height as f64),
            ("meta.width".into(), self.geometry.width as f64),
            ("meta.conv_bias".into(), f64::from(u8::from(self.conv_bias))),
        ]
    }

    pub fn from_meta(get: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let req = |k: &str| get(k).ok_or_else(|| Error::Validation(format!("checkpoint lacks {k}")));
        let us = |k: &str| req(k).map(|v| v as usize);
        let bits = us("meta.attention")?;
        let cfg = ModelConfig {
            time_steps: us("meta.time_steps")?,
            in_channels: us("meta.in_channels")?,
            base_channels: us("meta.base_channels")?,
            layers: us("meta.layers")?,
            encoder_variant: EncoderVariant::from_code(req("meta.encoder_variant")?)
                .ok_or_else(|| Error::Validation("bad encoder variant code".into()))?,
            attention: AttentionSet {
                temporal: bits & 1 != 0,
                channel: bits & 2 != 0,
                spatial: bits & 4 != 0,
            },
            reduction: Reduction {
                temporal: us("meta.reduction_temporal")?,
                channel: us("meta.reduction_channel")?,
            },
            neuron: IfParams {
                v_threshold: req("meta.v_threshold")?,
                v_reset: req("meta.v_reset")?,
                surrogate_alpha: req("meta.surrogate_alpha")?,
                mode: if req("meta.neuron_mode")? == 1.0 {
                    NeuronMode::Smooth
                } else {
                    NeuronMode::Spiking
                },
            },
            geometry: Geometry::new(us("meta.height")?, us("meta.width")?),
            conv_bias: req("meta.conv_bias")? != 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// instrumentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Encoder,
    Residual,
    Decoder,
}

/// Spike bookkeeping for one IF layer over one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpikes {
    pub name: String,
    pub block: Block,
    /// Σ S over all neurons and steps (a count in spiking mode).
    pub spikes: f64,
    /// neurons × T.
    pub neuron_steps: u64,
    /// Synaptic connections driven by one spike of this layer.
    pub fan_out: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeStats {
    pub layers: Vec<LayerSpikes>,
}

impl SpikeStats {
    pub fn block_totals(&self, block: Block) -> (f64, u64) {
        self.layers
            .iter()
            .filter(|l| l.block == block)
            .fold((0.0, 0), |(s, n), l| (s + l.spikes, n + l.neuron_steps))
    }

    pub fn rate(&self, block: Block) -> f64 {
        let (s, n) = self.block_totals(block);
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn total_rate(&self) -> f64 {
        let (s, n) = self
            .layers
            .iter()
            .fold((0.0, 0u64), |(s, n), l| (s + l.spikes, n + l.neuron_steps));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Accumulate operations triggered by spikes (spikes × fan-out).
    pub fn ac_ops(&self) -> f64 {
        self.layers.iter().map(|l| l.spikes * l.fan_out).sum()
    }

    /// Adds another pass's counts layer by layer.
    pub fn merge(&mut self, other: &SpikeStats) {
        if self.layers.is_empty() {
            self.layers = other.layers.clone();
            return;
        }
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.spikes += b.spikes;
            a.neuron_steps += b.neuron_steps;
        }
    }
}

/// Spike tensor of one IF layer as recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct SpikeRecord {
    pub name: String,
    pub block: Block,
    pub spikes: Var,
    pub fan_out: f64,
}

/// Counts spikes from recorded spike tensors.
pub fn count_spikes(tape: &Tape, records: &[SpikeRecord]) -> SpikeStats {
    SpikeStats {
        layers: records
            .iter()
            .map(|r| {
                let v = tape.value(r.spikes);
                LayerSpikes {
                    name: r.name.clone(),
                    block: r.block,
                    spikes: v.sum(),
                    neuron_steps: v.len() as u64,
                    fan_out: r.fan_out,
                }
            })
            .collect(),
    }
}

/// Mutable per-pass context shared by the blocks.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a ParamVars,
    pub neuron: IfParams,
    /// Initial membranes, consumed in layer order; `None` means zero.
    initial: Vec<Option<Tensor>>,
    finals: Vec<Tensor>,
    pub spikes: Vec<SpikeRecord>,
    /// Dense multiply-accumulates of every conv/linear evaluated.
    pub dense_macs: u64,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a ParamVars, neuron: IfParams) -> Self {
        ForwardCtx {
            tape,
            vars,
            neuron,
            initial: Vec::new(),
            finals: Vec::new(),
            spikes: Vec::new(),
            dense_macs: 0,
        }
    }

    fn next_initial(&mut self) -> Option<Tensor> {
        let i = self.finals.len();
        self.initial.get(i).cloned().flatten()
    }

    fn spike(&mut self, x: Var, name: String, block: Block, fan_out: f64) -> Result<Var> {
        let v0 = self.next_initial();
        let out = spike_layer(self.tape, x, &self.neuron, v0.as_ref())?;
        self.finals.push(out.v_final);
        self.spikes.push(SpikeRecord {
            name,
            block,
            spikes: out.spikes,
            fan_out,
        });
        Ok(out.spikes)
    }

    fn integrate(&mut self, x: Var) -> Result<Var> {
        let v0 = self.next_initial();
        let v = integrate(self.tape, x, v0.as_ref())?;
        self.finals.push(self.tape.value(v).clone());
        Ok(v)
    }

    fn conv(&mut self, conv: &Conv, x: Var) -> Result<Var> {
        let y = ops::conv2d(self.tape, x, self.vars[conv.weight], conv.bias.map(|b| self.vars[b]), conv.stride, conv.padding)?;
        let (xs, ys) = (self.tape.shape(x), self.tape.shape(y));
        let c_in = xs[xs.len() - 3] as u64;
        let out: u64 = ys.iter().map(|&d| d as u64).product();
        self.dense_macs += out * c_in * (conv.kernel * conv.kernel) as u64;
        Ok(y)
    }

    fn attend(&mut self, att: &AttentionParams, x: Var) -> Result<Var> {
        if att.enabled().is_empty() {
            return Ok(x);
        }
        let [t, c, h, w] = *self.tape.shape(x) else {
            return Err(Error::dim("attention", "rank", 4, self.tape.shape(x).len()));
        };
        let (t, c, hw) = (t as u64, c as u64, (h * w) as u64);
        if att.temporal.is_some() {
            self.dense_macs += 2 * 2 * t * t;
        }
        if att.channel.is_some() {
            self.dense_macs += 2 * 2 * t * c * c;
        }
        if att.spatial.is_some() {
            self.dense_macs += t * hw * 18;
        }
        tcsa(self.tape, self.vars, att, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(format!("{name}.w"), init_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Conv {
            weight,
            bias,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub index: usize,
    pub variant: EncoderVariant,
    pub attention: AttentionParams,
    pub conv: Conv,
    fan_out: f64,
}

impl EncoderBlock {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::State(format!(
                "encoder {} received odd spatial size {h}x{w}; padding contract broken",
                self.index
            )));
        }
        let name = format!("enc{}.if", self.index);
        match self.variant {
            EncoderVariant::Ce | EncoderVariant::CeAtt => {
                let a = ctx.attend(&self.attention, x)?;
                let y = ctx.conv(&self.conv, a)?;
                ctx.spike(y, name, Block::Encoder, self.fan_out)?;
                Ok(y)
            }
            EncoderVariant::De | EncoderVariant::DeAtt1 => {
                let a = ctx.attend(&self.attention, x)?;
                let y = ctx.conv(&self.conv, a)?;
                ctx.spike(y, name, Block::Encoder, self.fan_out)
            }
            EncoderVariant::DeAtt2 => {
                let y = ctx.conv(&self.conv, x)?;
                let a = ctx.attend(&self.attention, y)?;
                ctx.spike(a, name, Block::Encoder, self.fan_out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub index: usize,
    pub conv1: Conv,
    pub conv2: Conv,
    pub attention: AttentionParams,
    fan_out: f64,
}

impl ResidualBlock {
    /// `x + att(conv2(IF(conv1(IF(x)))))`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let branch = self.branch(ctx, x)?;
        ops::add(ctx.tape, x, branch)
    }

    /// The spiking path alone, without the identity shortcut.
    pub fn branch(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let s1 = ctx.spike(x, format!("res{}.if1", self.index), Block::Residual, self.fan_out)?;
        let y1 = ctx.conv(&self.conv1, s1)?;
        let s2 = ctx.spike(y1, format!("res{}.if2", self.index), Block::Residual, self.fan_out)?;
        let y2 = ctx.conv(&self.conv2, s2)?;
        ctx.attend(&self.attention, y2)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub index: usize,
    pub attention: AttentionParams,
    pub conv: Conv,
    pub head: Conv,
    fan_out: f64,
}

pub struct DecoderOutput {
    pub next: Var,
    /// Final integrator membrane `[h, w]`.
    pub membrane: Var,
}

impl DecoderBlock {
    /// Upsample ×2 → attention → conv → IF; the spikes plus `skip` (or the
    /// upsampled input when `skip` is `None`) feed the next layer and the
    /// 1×1 integrator head.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var, skip: Option<Var>) -> Result<DecoderOutput> {
        let u = ops::nearest_upsample(ctx.tape, x, 2)?;
        if let Some(sk) = skip {
            let (us, ss) = (ctx.tape.shape(u), ctx.tape.shape(sk));
            for axis in [0, 2, 3] {
                if us[axis] != ss[axis] {
                    return Err(Error::dim("decoder_block skip", axis, us[axis], ss[axis]));
                }
            }
        }
        let a = ctx.attend(&self.attention, u)?;
        let y = ctx.conv(&self.conv, a)?;
        let s = ctx.spike(y, format!("dec{}.if", self.index), Block::Decoder, self.fan_out)?;
        let next = match skip {
            Some(sk) => ops::add(ctx.tape, s, sk)?,
            None => ops::add(ctx.tape, s, u)?,
        };
        let h = ctx.conv(&self.head, next)?;
        let m = ctx.integrate(h)?;
        let shape = ctx.tape.shape(m).to_vec();
        let membrane = ops::reshape(ctx.tape, m, &shape[1..])?;
        Ok(DecoderOutput { next, membrane })
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerActivations {
    pub encoder: Vec<Var>,
    pub residual: Vec<Var>,
    pub decoder: Vec<Var>,
    /// Per decoder layer, the head's final membrane at that layer's
    /// (padded) resolution.
    pub membranes: Vec<Var>,
    pub spikes: Vec<SpikeRecord>,
}

pub struct ForwardOutput {
    /// `[H, W]` depth in meters, cropped to the configured geometry.
    pub depth: Var,
    pub activations: LayerActivations,
    pub stats: SpikeStats,
    pub dense_macs: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Vec<EncoderBlock>,
    pub residuals: Vec<ResidualBlock>,
    pub decoders: Vec<DecoderBlock>,
    /// Membranes left by the previous pass, in layer order.
    states: Vec<Option<Tensor>>,
}

pub const RESIDUAL_BLOCKS: usize = 2;

impl Model {
    /// Registers all parameters in `store` (in a fixed order) and returns
    /// the assembled network.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let l = cfg.layers;
        let bias = cfg.conv_bias;

        let mut encoders = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = cfg.encoder_input_channels(i);
            let c_out = cfg.encoder_channels(i);
            let att_set = if cfg.encoder_variant.has_attention() {
                cfg.attention
            } else {
                AttentionSet::NONE
            };
            let att_channels = if cfg.encoder_variant == EncoderVariant::DeAtt2 { c_out } else { c_in };
            let attention = AttentionParams::new(store, &format!("enc{i}.att"), att_set, cfg.time_steps, att_channels, cfg.reduction, rng)?;
            let conv = Conv::new(store, &format!("enc{i}.conv"), c_in, c_out, 3, 2, bias, rng);
            let fan_out = match (cfg.encoder_variant.emits_spikes(), i + 1 < l) {
                (false, _) => 0.0,
                (true, true) => cfg.encoder_channels(i + 1) as f64 * 9.0 / 4.0,
                (true, false) => 1.0,
            };
            encoders.push(EncoderBlock {
                index: i,
                variant: cfg.encoder_variant,
                attention,
                conv,
                fan_out,
            });
        }

        let c_mid = cfg.encoder_channels(l - 1);
        let mut residuals = Vec::with_capacity(RESIDUAL_BLOCKS);
        for i in 0..RESIDUAL_BLOCKS {
            let conv1 = Conv::new(store, &format!("res{i}.conv1"), c_mid, c_mid, 3, 1, bias, rng);
            let conv2 = Conv::new(store, &format!("res{i}.conv2"), c_mid, c_mid, 3, 1, bias, rng);
            let attention = AttentionParams::new(store, &format!("res{i}.att"), cfg.attention, cfg.time_steps, c_mid, cfg.reduction, rng)?;
            residuals.push(ResidualBlock {
                index: i,
                conv1,
                conv2,
                attention,
                fan_out: c_mid as f64 * 9.0,
            });
        }

        let mut decoders = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = cfg.decoder_input_channels(i);
            let c_out = cfg.decoder_channels(i);
            let attention = AttentionParams::new(store, &format!("dec{i}.att"), cfg.attention, cfg.time_steps, c_in, cfg.reduction, rng)?;
            let conv = Conv::new(store, &format!("dec{i}.conv"), c_in, c_out, 3, 1, bias, rng);
            let head = Conv::new(store, &format!("dec{i}.head"), c_out, 1, 1, 1, bias, rng);
            // each spike reaches the head, and after ×2 upsampling four
            // positions of the next layer's 3×3 conv
            let fan_out = 1.0
                + if i + 1 < l {
                    4.0 * 9.0 * cfg.decoder_channels(i + 1) as f64
                } else {
                    0.0
                };
            decoders.push(DecoderBlock {
                index: i,
                attention,
                conv,
                head,
                fan_out,
            });
        }

        Ok(Model {
            config,
            encoders,
            residuals,
            decoders,
            states: Vec::new(),
        })
    }

    /// Zeroes every membrane (spiking layers and integrator heads).
    pub fn reset_state(&mut self) {
        self.states.clear();
    }

    /// Membranes left by the last forward pass.
    pub fn states(&self) -> &[Option<Tensor>] {
        &self.states
    }

    /// Full forward pass from freshly reset membranes.
    pub fn forward(&mut self, tape: &mut Tape, vars: &ParamVars, input: &StackedTensor) -> Result<ForwardOutput> {
        self.reset_state();
        self.forward_continuing(tape, vars, input)
    }

    /// Forward pass starting from the membranes the previous pass left
    /// behind (constants; no gradient flows across passes).
    pub fn forward_continuing(&mut self, tape: &mut Tape, vars: &ParamVars, input: &StackedTensor) -> Result<ForwardOutput> {
        let cfg = self.config;
        let shape = input.data.shape();
        if shape[1] != cfg.in_channels {
            return Err(Error::dim("forward", "channel (axis 1)", cfg.in_channels, shape[1]));
        }
        if shape[0] != cfg.time_steps {
            return Err(Error::dim("forward", "time (axis 0)", cfg.time_steps, shape[0]));
        }
        if input.geometry() != cfg.geometry {
            return Err(Error::dim(
                "forward",
                "geometry (axes 2-3)",
                format!("{}x{}", cfg.geometry.height, cfg.geometry.width),
                format!("{}x{}", shape[2], shape[3]),
            ));
        }
        let padded = cfg.padded_geometry();
        let x = ops::pad2d_value(&input.data, padded.height, padded.width)?;

        let mut ctx = ForwardCtx::new(tape, vars, cfg.neuron);
        ctx.initial = std::mem::take(&mut self.states);
        let mut acts = LayerActivations::default();

        let mut h = ctx.tape.constant(x);
        for enc in &self.encoders {
            h = enc.forward(&mut ctx, h)?;
            acts.encoder.push(h);
        }
        for res in &self.residuals {
            h = res.forward(&mut ctx, h)?;
            acts.residual.push(h);
        }
        let l = self.decoders.len();
        for (i, dec) in self.decoders.iter().enumerate() {
            let skip = (i + 1 < l).then(|| acts.encoder[l - 2 - i]);
            let out = dec.forward(&mut ctx, h, skip)?;
            h = out.next;
            acts.decoder.push(out.next);
            acts.membranes.push(out.membrane);
        }
        let last = *acts.membranes.last().expect("at least one decoder");
        let depth = ops::crop2d(ctx.tape, last, cfg.geometry.height, cfg.geometry.width)?;

        let stats = count_spikes(ctx.tape, &ctx.spikes);
        acts.spikes = std::mem::take(&mut ctx.spikes);
        let dense_macs = ctx.dense_macs;
        self.states = ctx.finals.into_iter().map(Some).collect();
        Ok(ForwardOutput {
            depth,
            activations: acts,
            stats,
            dense_macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: ModelConfig) -> (Model, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Model::new(cfg, &mut store, &mut rng).unwrap();
        (m, store)
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> StackedTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.time_steps, cfg.in_channels, cfg.geometry.height, cfg.geometry.width];
        let n = shape.iter().product();
        StackedTensor {
            data: Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0..4) as f64).collect()).unwrap(),
            window_start: 0,
            window_len: 50_000,
        }
    }

    #[test]
    fn channel_schedule() {
        let cfg = ModelConfig::default();
        assert_eq!((0..4).map(|l| cfg.encoder_channels(l)).collect::<Vec<_>>(), vec![8, 16, 32, 64]);
        assert_eq!((0..4).map(|l| cfg.decoder_channels(l)).collect::<Vec<_>>(), vec![32, 16, 8, 8]);
        assert_eq!((0..4).map(|l| cfg.decoder_input_channels(l)).collect::<Vec<_>>(), vec![64, 32, 16, 8]);
    }

    #[test]
    fn padding_to_multiple_of_sixteen() {
        let cfg = ModelConfig {
            geometry: Geometry::new(260, 346),
            ..ModelConfig::default()
        };
        assert_eq!(cfg.padded_geometry(), Geometry::new(272, 352));
    }

    #[test]
    fn shape_ladder_and_zero_input() {
        let cfg = ModelConfig::default();
        let (mut model, store) = build(cfg);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let input = StackedTensor {
            data: Tensor::zeros(&[5, 4, 64, 64]),
            window_start: 0,
            window_len: 50_000,
        };
        let out = model.forward(&mut tape, &vars, &input).unwrap();
        let res: Vec<usize> = out.activations.membranes.iter().map(|&m| tape.shape(m)[0]).collect();
        assert_eq!(res, vec![8, 16, 32, 64]);
        assert_eq!(tape.shape(out.depth), &[64, 64]);
        assert_eq!(tape.value(out.depth).max_abs(), 0.0);
        assert_eq!(tape.shape(out.activations.encoder[0]), &[5, 8, 32, 32]);
        assert_eq!(out.stats.total_rate(), 0.0);
        assert_eq!(out.stats.ac_ops(), 0.0);
    }

    #[test]
    fn encoder_value_domains() {
        for (variant, binary) in [
            (EncoderVariant::Ce, false),
            (EncoderVariant::CeAtt, false),
            (EncoderVariant::De, true),
            (EncoderVariant::DeAtt1, true),
            (EncoderVariant::DeAtt2, true),
        ] {
            let cfg = ModelConfig {
                encoder_variant: variant,
                base_channels: 4,
                geometry: Geometry::new(32, 32),
                ..ModelConfig::default()
            };
            let (mut model, store) = build(cfg);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &random_input(&cfg, 5)).unwrap();
            let e = tape.value(out.activations.encoder[0]);
            let is_binary = e.data().iter().all(|&v| v == 0.0 || v == 1.0);
            assert_eq!(is_binary, binary, "{variant}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let cfg = ModelConfig {
            geometry: Geometry::new(16, 16),
            ..ModelConfig::default()
        };
        let (mut model, store) = build(cfg);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let input = StackedTensor {
            data: Tensor::zeros(&[5, 2, 16, 16]),
            window_start: 0,
            window_len: 50_000,
        };
        assert!(matches!(model.forward(&mut tape, &vars, &input), Err(Error::Dimension { .. })));
    }

    #[test]
    fn decoder_block_shapes() {
        let cfg = ModelConfig::default();
        let (model, store) = build(cfg);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = ForwardCtx::new(&mut tape, &vars, cfg.neuron);
        let x = ctx.tape.constant(Tensor::zeros(&[5, 64, 8, 8]));
        let skip = ctx.tape.constant(Tensor::zeros(&[5, 32, 16, 16]));
        let out = model.decoders[0].forward(&mut ctx, x, Some(skip)).unwrap();
        assert_eq!(ctx.tape.shape(out.next), &[5, 32, 16, 16]);
        assert_eq!(ctx.tape.shape(out.membrane), &[16, 16]);
        assert_eq!(ctx.tape.value(out.membrane).max_abs(), 0.0);
        let bad = ctx.tape.constant(Tensor::zeros(&[5, 32, 8, 8]));
        assert!(model.decoders[0].forward(&mut ctx, x, Some(bad)).is_err());
    }

    #[test]
    fn meta_roundtrip() {
        let cfg = ModelConfig {
            encoder_variant: EncoderVariant::DeAtt2,
            attention: AttentionSet::TCSA,
            ..ModelConfig::default()
        };
        let meta = cfg.to_meta();
        let back = ModelConfig::from_meta(|k| meta.iter().find(|(n, _)| n == k).map(|(_, v)| *v)).unwrap();
        assert_eq!(back, cfg);
    }
}
