//! Training losses and the depth metric, all restricted to valid pixels.
//!
//! With the residual `R = gt − pred` over the `n` valid pixels:
//!
//! * ssi, minus variant: `ΣR²/n − (ΣR)²/n²` (the variance of `R`); the
//!   plus variant adds the squared-mean term instead.
//! * reg: `Σ(|∇x R| + |∇y R|)/n` with forward differences, counting a
//!   difference only when both pixels of the pair are valid.
//! * mde: `100 · Σ|gt − pred| / n`, in centimeters for depths in meters.

use crate::error::{Error, Result};
use crate::events::DepthFrame;
use crate::tensor::{ops, Backward, BackwardCtx, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsiSign {
    Minus,
    Plus,
}

impl std::str::FromStr for SsiSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus" => Ok(SsiSign::Minus),
            "plus" => Ok(SsiSign::Plus),
            _ => Err(Error::Validation(format!("ssi_sign must be plus or minus, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for SsiSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SsiSign::Minus => "minus",
            SsiSign::Plus => "plus",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub ssi_sign: SsiSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 0.5,
            ssi_sign: SsiSign::Minus,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Validation(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        Ok(())
    }
}

/// Residual `gt − pred` on the valid pixels of a frame.
#[derive(Clone, Debug)]
pub struct Residual {
    /// `[H, W]`, zero on invalid pixels.
    pub r: Tensor,
    pub mask: Vec<bool>,
    pub n: usize,
}

impl Residual {
    pub fn new(pred: &Tensor, gt: &DepthFrame) -> Result<Self> {
        let g = gt.geometry();
        if pred.shape() != [g.height, g.width] {
            return Err(Error::dim(
                "residual",
                "prediction shape",
                format!("[{}, {}]", g.height, g.width),
                format!("{:?}", pred.shape()),
            ));
        }
        let n = gt.valid_count();
        if n == 0 {
            return Err(Error::Metric("ground truth frame has no valid pixels".into()));
        }
        let data = pred
            .data()
            .iter()
            .zip(gt.depth.data())
            .zip(&gt.valid)
            .map(|((&p, &d), &ok)| if ok { d - p } else { 0.0 })
            .collect();
        Ok(Residual {
            r: Tensor::new(pred.shape().to_vec(), data).expect("shape checked"),
            mask: gt.valid.clone(),
            n,
        })
    }

    fn width(&self) -> usize {
        self.r.shape()[1]
    }

    /// Σ R and Σ R².
    fn moments(&self) -> (f64, f64) {
        self.r.data().iter().fold((0.0, 0.0), |(s, q), &x| (s + x, q + x * x))
    }

    /// Visits every pairwise-valid forward difference as (earlier, later).
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let w = self.width();
        let h = self.r.shape()[0];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.mask[i] {
                    continue;
                }
                if x + 1 < w && self.mask[i + 1] {
                    f(i, i + 1);
                }
                if y + 1 < h && self.mask[i + w] {
                    f(i, i + w);
                }
            }
        }
    }
}

fn sign_factor(sign: SsiSign) -> f64 {
    match sign {
        SsiSign::Minus => -1.0,
        SsiSign::Plus => 1.0,
    }
}

pub fn ssi_value(res: &Residual, sign: SsiSign) -> f64 {
    let n = res.n as f64;
    let (s, q) = res.moments();
    q / n + sign_factor(sign) * s * s / (n * n)
}

pub fn reg_value(res: &Residual) -> f64 {
    let r = res.r.data();
    let mut total = 0.0;
    res.for_each_pair(|a, b| total += (r[b] - r[a]).abs());
    total / res.n as f64
}

/// Holds d(loss)/d(pred) computed alongside the value.
struct FixedGrad(Tensor);

impl Backward for FixedGrad {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_out.item();
        vec![ctx.needs[0].then(|| self.0.map(|x| x * g))]
    }
}

pub fn ssi_loss(tape: &mut Tape, pred: Var, gt: &DepthFrame, config: &LossConfig) -> Result<Var> {
    let res = Residual::new(tape.value(pred), gt)?;
    let n = res.n as f64;
    let (s, _) = res.moments();
    let k = sign_factor(config.ssi_sign);
    // dL/dR = 2R/n ± 2ΣR/n², and dR/dpred = −1 on valid pixels
    let grad = res
        .r
        .data()
        .iter()
        .zip(&res.mask)
        .map(|(&r, &ok)| if ok { -(2.0 * r / n + k * 2.0 * s / (n * n)) } else { 0.0 })
        .collect();
    let grad = Tensor::new(res.r.shape().to_vec(), grad).expect("same shape");
    let value = Tensor::scalar(ssi_value(&res, config.ssi_sign));
    Ok(tape.record(value, &[pred], FixedGrad(grad)))
}

pub fn reg_loss(tape: &mut Tape, pred: Var, gt: &DepthFrame) -> Result<Var> {
    let res = Residual::new(tape.value(pred), gt)?;
    let n = res.n as f64;
    let r = res.r.data();
    let mut grad = vec![0.0; r.len()];
    res.for_each_pair(|a, b| {
        let d = r[b] - r[a];
        let s = if d == 0.0 { 0.0 } else { d.signum() };
        // R = gt − pred flips the sign once more
        grad[b] -= s / n;
        grad[a] += s / n;
    });
    let grad = Tensor::new(res.r.shape().to_vec(), grad).expect("same shape");
    let value = Tensor::scalar(reg_value(&res));
    Ok(tape.record(value, &[pred], FixedGrad(grad)))
}

/// `ssi + λ · reg` for one frame.
pub fn frame_loss(tape: &mut Tape, pred: Var, gt: &DepthFrame, config: &LossConfig) -> Result<Var> {
    let ssi = ssi_loss(tape, pred, gt, config)?;
    if config.lambda_reg == 0.0 {
        return Ok(ssi);
    }
    let reg = reg_loss(tape, pred, gt)?;
    let reg = ops::scale(tape, reg, config.lambda_reg);
    ops::add(tape, ssi, reg)
}

/// Sum of per-frame losses over `(prediction, ground truth)` pairs.
pub fn total_loss(tape: &mut Tape, frames: &[(Var, &DepthFrame)], config: &LossConfig) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(pred, gt) in frames {
        let l = frame_loss(tape, pred, gt, config)?;
        acc = Some(match acc {
            Some(a) => ops::add(tape, a, l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::arg("total_loss", "no frames"))
}

/// Loss components of one frame, evaluated without a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ssi: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn loss_values(pred: &Tensor, gt: &DepthFrame, config: &LossConfig) -> Result<LossBreakdown> {
    let res = Residual::new(pred, gt)?;
    let ssi = ssi_value(&res, config.ssi_sign);
    let reg = reg_value(&res);
    Ok(LossBreakdown {
        ssi,
        reg,
        total: ssi + config.lambda_reg * reg,
    })
}

/// Mean depth error in centimeters over valid pixels.
pub fn mde(pred: &Tensor, gt: &DepthFrame) -> Result<f64> {
    let res = Residual::new(pred, gt)?;
    let sum: f64 = res.r.data().iter().map(|x| x.abs()).sum();
    Ok(100.0 * sum / res.n as f64)
}

/// Keeps every `factor`-th pixel in both directions, matching the pixel
/// grid of a decoder layer at `1/factor` resolution.
pub fn subsample_frame(gt: &DepthFrame, factor: usize) -> DepthFrame {
    let g = gt.geometry();
    let (h, w) = (g.height.div_ceil(factor), g.width.div_ceil(factor));
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * factor * g.width + x * factor;
            depth.push(gt.depth.data()[i]);
            valid.push(gt.valid[i]);
        }
    }
    DepthFrame {
        depth: Tensor::new(vec![h, w], depth).expect("non-empty"),
        valid,
        t: gt.t,
    }
}
