//! Flat `key = value` run configuration.
//!
//! Every key has a default; [`RunConfig::to_text`] prints all of them and
//! the output parses back to an identical config. Unknown keys are errors.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionSet, Reduction};
use crate::error::{Error, Result};
use crate::events::{Geometry, StackMode};
use crate::model::{EncoderVariant, ModelConfig};
use crate::neuron::{IfParams, NeuronMode};
use crate::objective::{LossConfig, SsiSign};
use crate::tensor::AdamConfig;

/// Splits `key = value` lines into `(line number, key, value)`. Blank lines
/// and text after `#` are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub time_steps: usize,
    pub base_channels: usize,
    pub layers: usize,
    pub encoder_variant: EncoderVariant,
    pub attention: AttentionSet,
    pub reduction_temporal: usize,
    pub reduction_channel: usize,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
    pub neuron_mode: NeuronMode,
    pub conv_bias: bool,
    pub use_right_camera: bool,
    // loss
    pub lambda_reg: f64,
    pub ssi_sign: SsiSign,
    pub multiscale_loss: bool,
    // optimisation
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub milestone_fractions: Vec<f64>,
    pub windows_per_step: usize,
    pub val_fraction: f64,
    pub shuffle: bool,
    pub seed: u64,
    pub stack_mode: StackMode,
    /// Clamps event counts to {0, 1} before they reach the network.
    pub binarize: bool,
    // paths, overridable from the command line
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let l = LossConfig::default();
        let a = AdamConfig::default();
        RunConfig {
            time_steps: m.time_steps,
            base_channels: m.base_channels,
            layers: m.layers,
            encoder_variant: m.encoder_variant,
            attention: m.attention,
            reduction_temporal: m.reduction.temporal,
            reduction_channel: m.reduction.channel,
            v_threshold: m.neuron.v_threshold,
            v_reset: m.neuron.v_reset,
            surrogate_alpha: m.neuron.surrogate_alpha,
            neuron_mode: m.neuron.mode,
            conv_bias: m.conv_bias,
            use_right_camera: true,
            lambda_reg: l.lambda_reg,
            ssi_sign: l.ssi_sign,
            multiscale_loss: false,
            learning_rate: a.lr,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            epochs: 20,
            max_steps: 0,
            milestone_fractions: vec![0.5, 0.75],
            windows_per_step: 1,
            val_fraction: 0.2,
            shuffle: true,
            seed: 0,
            stack_mode: StackMode::Cumulative,
            binarize: false,
            data_dir: String::new(),
            out_dir: String::new(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{key}: invalid value {v:?}"),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (line, key, v) in parse_key_values(text)? {
            c.set(line, &key, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        macro_rules! p {
            () => {
                parse_value(line, key, v)?
            };
        }
        let wrap = |e: Error| Error::Parse {
            line,
            msg: format!("{key}: {e}"),
        };
        match key {
            "time_steps" => self.time_steps = p!(),
            "base_channels" => self.base_channels = p!(),
            "layers" => self.layers = p!(),
            "encoder_variant" => self.encoder_variant = v.parse().map_err(wrap)?,
            "attention" => self.attention = v.parse().map_err(wrap)?,
            "reduction_temporal" => self.reduction_temporal = p!(),
            "reduction_channel" => self.reduction_channel = p!(),
            "v_threshold" => self.v_threshold = p!(),
            "v_reset" => self.v_reset = p!(),
            "surrogate_alpha" => self.surrogate_alpha = p!(),
            "neuron_mode" => self.neuron_mode = v.parse().map_err(wrap)?,
            "conv_bias" => self.conv_bias = p!(),
            "use_right_camera" => self.use_right_camera = p!(),
            "lambda_reg" => self.lambda_reg = p!(),
            "ssi_sign" => self.ssi_sign = v.parse().map_err(wrap)?,
            "multiscale_loss" => self.multiscale_loss = p!(),
            "learning_rate" => self.learning_rate = p!(),
            "adam_beta1" => self.adam_beta1 = p!(),
            "adam_beta2" => self.adam_beta2 = p!(),
            "adam_eps" => self.adam_eps = p!(),
            "epochs" => self.epochs = p!(),
            "max_steps" => self.max_steps = p!(),
            "milestone_fractions" => {
                self.milestone_fractions = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse_value(line, key, s.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "windows_per_step" => self.windows_per_step = p!(),
            "val_fraction" => self.val_fraction = p!(),
            "shuffle" => self.shuffle = p!(),
            "seed" => self.seed = p!(),
            "stack_mode" => self.stack_mode = v.parse().map_err(wrap)?,
            "binarize" => self.binarize = p!(),
            "data_dir" => self.data_dir = v.to_owned(),
            "out_dir" => self.out_dir = v.to_owned(),
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown config key {key:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.windows_per_step == 0 {
            return bad("windows_per_step must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.milestone_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("milestone_fractions must lie in [0, 1]".into());
        }
        self.loss().validate()?;
        // channel count and geometry only matter for shape checks here
        self.model(4, Geometry::new(1, 1)).validate()
    }

    pub fn model(&self, in_channels: usize, geometry: Geometry) -> ModelConfig {
        ModelConfig {
            time_steps: self.time_steps,
            in_channels,
            base_channels: self.base_channels,
            layers: self.layers,
            encoder_variant: self.encoder_variant,
            attention: self.attention,
            reduction: Reduction {
                temporal: self.reduction_temporal,
                channel: self.reduction_channel,
            },
            neuron: IfParams {
                v_threshold: self.v_threshold,
                v_reset: self.v_reset,
                surrogate_alpha: self.surrogate_alpha,
                mode: self.neuron_mode,
            },
            geometry,
            conv_bias: self.conv_bias,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_reg: self.lambda_reg,
            ssi_sign: self.ssi_sign,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate of epoch `epoch` (0-based): halved once for every
    /// milestone fraction `f` with `epoch ≥ f · epochs`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestone_fractions
            .iter()
            .filter(|&&f| epoch as f64 >= f * self.epochs as f64)
            .count();
        self.learning_rate * 0.5f64.powi(passed as i32)
    }

    pub fn to_text(&self) -> String {
        let fractions: Vec<String> = self.milestone_fractions.iter().map(f64::to_string).collect();
        let rows: Vec<(&str, String)> = vec![
            ("time_steps", self.time_steps.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("layers", self.layers.to_string()),
            ("encoder_variant", self.encoder_variant.to_string()),
            ("attention", self.attention.to_string()),
            ("reduction_temporal", self.reduction_temporal.to_string()),
            ("reduction_channel", self.reduction_channel.to_string()),
            ("v_threshold", self.v_threshold.to_string()),
            ("v_reset", self.v_reset.to_string()),
            ("surrogate_alpha", self.surrogate_alpha.to_string()),
            ("neuron_mode", self.neuron_mode.to_string()),
            ("conv_bias", self.conv_bias.to_string()),
            ("use_right_camera", self.use_right_camera.to_string()),
            ("lambda_reg", self.lambda_reg.to_string()),
            ("ssi_sign", self.ssi_sign.to_string()),
            ("multiscale_loss", self.multiscale_loss.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("milestone_fractions", fractions.join(",")),
            ("windows_per_step", self.windows_per_step.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("seed", self.seed.to_string()),
            ("stack_mode", self.stack_mode.to_string()),
            ("binarize", self.binarize.to_string()),
            ("data_dir", self.data_dir.clone()),
            ("out_dir", self.out_dir.clone()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
