//! Sigmoid-gated temporal, channel and spatial attention over `[T, C, H, W]`
//! activations.
//!
//! * temporal: pool over `(C, H, W)` → shared MLP → one gate per frame;
//! * channel: per frame, pool over `(H, W)` → shared MLP → one gate per channel;
//! * spatial: per frame, channel-mean and channel-max maps → 3×3 conv → one
//!   gate per pixel, broadcast over channels.
//!
//! Each MLP is `d → d/r → d` with a ReLU between the layers and is shared
//! by the average- and max-pool branches, whose outputs are summed before
//! the sigmoid. Enabled modules apply in the fixed order T → C → S.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::init_uniform;
use crate::tensor::{ops, ParamId, ParamStore, ParamVars, PoolMode, Tape, Var};

/// Subset of {temporal, channel, spatial}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AttentionSet {
    pub temporal: bool,
    pub channel: bool,
    pub spatial: bool,
}

impl AttentionSet {
    pub const NONE: AttentionSet = AttentionSet {
        temporal: false,
        channel: false,
        spatial: false,
    };
    /// Channel + spatial.
    pub const CSA: AttentionSet = AttentionSet {
        temporal: false,
        channel: true,
        spatial: true,
    };
    pub const TCSA: AttentionSet = AttentionSet {
        temporal: true,
        channel: true,
        spatial: true,
    };

    pub fn count(&self) -> usize {
        usize::from(self.temporal) + usize::from(self.channel) + usize::from(self.spatial)
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

impl std::str::FromStr for AttentionSet {
    type Err = Error;

    /// Accepts letters T/C/S separated by commas (`"C,S"`), or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = AttentionSet::NONE;
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(set);
        }
        for part in s.split(',') {
            match part.trim() {
                "T" | "t" => set.temporal = true,
                "C" | "c" => set.channel = true,
                "S" | "s" => set.spatial = true,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown attention module {other:?} (expected T, C or S)"
                    )))
                }
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for AttentionSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<&str> = [(self.temporal, "T"), (self.channel, "C"), (self.spatial, "S")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Reduction factors of the temporal and channel MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub temporal: usize,
    pub channel: usize,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction {
            temporal: 1,
            channel: 2,
        }
    }
}

/// Two bias-free linear layers `d → d/r → d`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: ParamId,
    pub output: ParamId,
    pub dim: usize,
}

impl Mlp {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        if r == 0 || dim % r != 0 {
            return Err(Error::Validation(format!(
                "{prefix}: reduction {r} does not divide dimension {dim}"
            )));
        }
        let h = dim / r;
        Ok(Mlp {
            hidden: store.add(format!("{prefix}.w1"), init_uniform(rng, &[h, dim], dim)),
            output: store.add(format!("{prefix}.w2"), init_uniform(rng, &[dim, h], h)),
            dim,
        })
    }

    fn apply(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let h = ops::linear(tape, x, vars[self.hidden], None)?;
        let h = ops::relu(tape, h);
        ops::linear(tape, h, vars[self.output], None)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionParams {
    pub temporal: Option<Mlp>,
    pub channel: Option<Mlp>,
    /// `[1, 2, 3, 3]` kernel over (mean, max) maps.
    pub spatial: Option<ParamId>,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        set: AttentionSet,
        steps: usize,
        channels: usize,
        reduction: Reduction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let temporal = set
            .temporal
            .then(|| Mlp::new(store, &format!("{prefix}.ta"), steps, reduction.temporal, rng))
            .transpose()?;
        let channel = set
            .channel
            .then(|| Mlp::new(store, &format!("{prefix}.ca"), channels, reduction.channel, rng))
            .transpose()?;
        let spatial = set
            .spatial
            .then(|| store.add(format!("{prefix}.sa.w"), init_uniform(rng, &[1, 2, 3, 3], 18)));
        Ok(AttentionParams {
            temporal,
            channel,
            spatial,
        })
    }

    pub fn enabled(&self) -> AttentionSet {
        AttentionSet {
            temporal: self.temporal.is_some(),
            channel: self.channel.is_some(),
            spatial: self.spatial.is_some(),
        }
    }

    /// Every parameter this block owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for m in [&self.temporal, &self.channel].into_iter().flatten() {
            ids.push(m.hidden);
            ids.push(m.output);
        }
        ids.extend(self.spatial);
        ids
    }
}

fn check_rank4(op: &'static str, tape: &Tape, x: Var) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [t, c, h, w] => Ok([t, c, h, w]),
        ref s => Err(Error::dim(op, "rank", 4, s.len())),
    }
}

fn pooled_gate(tape: &mut Tape, vars: &ParamVars, mlp: &Mlp, x: Var, axes: &[usize]) -> Result<Var> {
    let avg = ops::pool(tape, x, axes, PoolMode::Avg)?;
    let max = ops::pool(tape, x, axes, PoolMode::Max)?;
    let a = mlp.apply(tape, vars, avg)?;
    let m = mlp.apply(tape, vars, max)?;
    let s = ops::add(tape, a, m)?;
    Ok(ops::sigmoid(tape, s))
}

/// Per-frame gate `[T]`.
pub fn temporal_gate(tape: &mut Tape, vars: &ParamVars, mlp: &Mlp, x: Var) -> Result<Var> {
    let [t, ..] = check_rank4("temporal_attention", tape, x)?;
    if t != mlp.dim {
        return Err(Error::dim("temporal_attention", 0, mlp.dim, t));
    }
    pooled_gate(tape, vars, mlp, x, &[1, 2, 3])
}

/// Per-frame, per-channel gate `[T, C]`.
pub fn channel_gate(tape: &mut Tape, vars: &ParamVars, mlp: &Mlp, x: Var) -> Result<Var> {
    let [_, c, ..] = check_rank4("channel_attention", tape, x)?;
    if c != mlp.dim {
        return Err(Error::dim("channel_attention", 1, mlp.dim, c));
    }
    pooled_gate(tape, vars, mlp, x, &[2, 3])
}

/// Per-frame, per-pixel gate `[T, 1, H, W]`.
pub fn spatial_gate(tape: &mut Tape, vars: &ParamVars, kernel: ParamId, x: Var) -> Result<Var> {
    let [t, _, h, w] = check_rank4("spatial_attention", tape, x)?;
    let avg = ops::pool(tape, x, &[1], PoolMode::Avg)?;
    let max = ops::pool(tape, x, &[1], PoolMode::Max)?;
    let avg = ops::reshape(tape, avg, &[t, 1, h, w])?;
    let max = ops::reshape(tape, max, &[t, 1, h, w])?;
    let both = ops::concat(tape, &[avg, max], 1)?;
    let logits = ops::conv2d(tape, both, vars[kernel], None, 1, 1)?;
    Ok(ops::sigmoid(tape, logits))
}

pub fn temporal_attention(tape: &mut Tape, vars: &ParamVars, mlp: &Mlp, x: Var) -> Result<Var> {
    let g = temporal_gate(tape, vars, mlp, x)?;
    ops::mul(tape, x, g)
}

pub fn channel_attention(tape: &mut Tape, vars: &ParamVars, mlp: &Mlp, x: Var) -> Result<Var> {
    let g = channel_gate(tape, vars, mlp, x)?;
    ops::mul(tape, x, g)
}

pub fn spatial_attention(tape: &mut Tape, vars: &ParamVars, kernel: ParamId, x: Var) -> Result<Var> {
    let g = spatial_gate(tape, vars, kernel, x)?;
    ops::mul(tape, x, g)
}

/// Applies the enabled modules in order T → C → S; identity when none are.
pub fn tcsa(tape: &mut Tape, vars: &ParamVars, params: &AttentionParams, x: Var) -> Result<Var> {
    let mut y = x;
    if let Some(m) = &params.temporal {
        y = temporal_attention(tape, vars, m, y)?;
    }
    if let Some(m) = &params.channel {
        y = channel_attention(tape, vars, m, y)?;
    }
    if let Some(k) = params.spatial {
        y = spatial_attention(tape, vars, k, y)?;
    }
    Ok(y)
}
