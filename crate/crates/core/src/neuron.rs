//! Multi-step integrate-and-fire neurons.
//!
//! Per step: `H_t = V_{t-1} + X_t`, `S_t = Θ(H_t − v_th)`,
//! `V_t = H_t·(1 − S_t) + v_reset·S_t` (hard reset). The step function's
//! derivative is replaced by a triangular surrogate of half-width `α`
//! centred on the threshold. In smooth mode the forward pass uses the
//! surrogate's antiderivative in place of `Θ`, so the recorded gradient is
//! exact and can be checked by finite differences.

use crate::error::{Error, Result};
use crate::tensor::{Backward, BackwardCtx, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeuronMode {
    Spiking,
    /// No threshold: the membrane integrates its input forever.
    Integrator,
    Smooth,
}

impl std::str::FromStr for NeuronMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiking" => Ok(NeuronMode::Spiking),
            "integrator" => Ok(NeuronMode::Integrator),
            "smooth" => Ok(NeuronMode::Smooth),
            other => Err(Error::Validation(format!("unknown neuron mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for NeuronMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeuronMode::Spiking => "spiking",
            NeuronMode::Integrator => "integrator",
            NeuronMode::Smooth => "smooth",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IfParams {
    pub v_threshold: f64,
    pub v_reset: f64,
    pub surrogate_alpha: f64,
    pub mode: NeuronMode,
}

impl Default for IfParams {
    fn default() -> Self {
        IfParams {
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 1.0,
            mode: NeuronMode::Spiking,
        }
    }
}

impl IfParams {
    pub fn with_mode(self, mode: NeuronMode) -> Self {
        IfParams { mode, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::Validation(format!(
                "v_threshold ({}) must exceed v_reset ({})",
                self.v_threshold, self.v_reset
            )));
        }
        if !(self.surrogate_alpha > 0.0) || !self.surrogate_alpha.is_finite() {
            return Err(Error::Validation(format!(
                "surrogate_alpha must be positive, got {}",
                self.surrogate_alpha
            )));
        }
        Ok(())
    }

    /// Triangular surrogate `max(0, 1 − |h − v_th|/α)/α`.
    #[inline]
    pub fn surrogate(&self, h: f64) -> f64 {
        let a = self.surrogate_alpha;
        (1.0 - (h - self.v_threshold).abs() / a).max(0.0) / a
    }

    /// Antiderivative of [`Self::surrogate`], rising from 0 to 1 across
    /// `[v_th − α, v_th + α]`.
    #[inline]
    pub fn smooth_step(&self, h: f64) -> f64 {
        let a = self.surrogate_alpha;
        let z = h - self.v_threshold;
        if z <= -a {
            0.0
        } else if z <= 0.0 {
            (z + a) * (z + a) / (2.0 * a * a)
        } else if z < a {
            1.0 - (a - z) * (a - z) / (2.0 * a * a)
        } else {
            1.0
        }
    }

    #[inline]
    fn fire(&self, h: f64) -> f64 {
        match self.mode {
            NeuronMode::Spiking => {
                if h >= self.v_threshold {
                    1.0
                } else {
                    0.0
                }
            }
            NeuronMode::Smooth => self.smooth_step(h),
            NeuronMode::Integrator => 0.0,
        }
    }
}

/// Elementwise surrogate derivative dS/dH.
pub fn surrogate_grad(h: &Tensor, params: &IfParams) -> Tensor {
    h.map(|x| params.surrogate(x))
}

/// Membrane state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct IfState {
    pub v: Tensor,
    pub step: usize,
}

impl IfState {
    pub fn new(shape: &[usize]) -> Self {
        IfState {
            v: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.v.data_mut().fill(0.0);
        self.step = 0;
    }
}

/// Zeroes every membrane and step counter.
pub fn reset_state<'a>(states: impl IntoIterator<Item = &'a mut IfState>) {
    for s in states {
        s.reset();
    }
}

/// Advances one step. Returns the spike tensor, or `None` in integrator
/// mode.
pub fn if_step(state: &mut IfState, input: &Tensor, params: &IfParams) -> Result<Option<Tensor>> {
    if input.shape() != state.v.shape() {
        return Err(Error::dim(
            "if_step",
            "input",
            format!("{:?}", state.v.shape()),
            format!("{:?}", input.shape()),
        ));
    }
    state.step += 1;
    if params.mode == NeuronMode::Integrator {
        state.v.add_assign(input);
        return Ok(None);
    }
    let mut spikes = Tensor::zeros(input.shape());
    for ((v, &x), s) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(spikes.data_mut())
    {
        let h = *v + x;
        *s = params.fire(h);
        *v = h * (1.0 - *s) + params.v_reset * *s;
    }
    Ok(Some(spikes))
}

/// Runs `if_step` over the leading axis of `input` from a zero membrane.
/// Returns the stacked spikes (absent in integrator mode) and the final
/// membrane.
pub fn if_multistep(input: &Tensor, params: &IfParams) -> Result<(Option<Tensor>, Tensor)> {
    if input.rank() < 1 {
        return Err(Error::dim("if_multistep", "rank", ">= 1", 0));
    }
    let mut state = IfState::new(&input.shape()[1..]);
    let mut frames = Vec::with_capacity(input.shape()[0]);
    for t in 0..input.shape()[0] {
        if let Some(s) = if_step(&mut state, &input.slice0(t), params)? {
            frames.push(s);
        }
    }
    let spikes = if frames.is_empty() {
        None
    } else {
        Some(Tensor::stack(&frames)?)
    };
    Ok((spikes, state.v))
}

// ---------------------------------------------------------------------------
// differentiable layer
// ---------------------------------------------------------------------------

struct SpikeLayerRule {
    params: IfParams,
    /// Pre-reset membrane `H_t`, `[T, ...]`.
    pre_reset: Vec<f64>,
    steps: usize,
}

impl Backward for SpikeLayerRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let n = ctx.inputs[0].len() / self.steps;
        let go = ctx.grad_out.data();
        let spikes = ctx.output.data();
        let mut gx = vec![0.0; self.steps * n];
        let mut g_v = vec![0.0; n];
        let p = &self.params;
        for t in (0..self.steps).rev() {
            let base = t * n;
            for i in 0..n {
                let h = self.pre_reset[base + i];
                let s = spikes[base + i];
                let sg = p.surrogate(h);
                let dv_dh = (1.0 - s) + (p.v_reset - h) * sg;
                let gh = go[base + i] * sg + g_v[i] * dv_dh;
                gx[base + i] = gh;
                g_v[i] = gh;
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx).unwrap())]
    }
}

pub struct SpikeLayerOutput {
    pub spikes: Var,
    pub v_final: Tensor,
}

/// Spiking (or smooth) IF layer over `input` `[T, ...]`, starting from
/// `initial` (zero when `None`). The initial membrane is treated as a
/// constant: no gradient flows into earlier forward passes.
pub fn spike_layer(tape: &mut Tape, input: Var, params: &IfParams, initial: Option<&Tensor>) -> Result<SpikeLayerOutput> {
    if params.mode == NeuronMode::Integrator {
        return Err(Error::arg("spike_layer", "integrator mode emits no spikes; use integrate()"));
    }
    let x = tape.value(input);
    let shape = x.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::dim("spike_layer", "rank", ">= 1", 0));
    }
    let steps = shape[0];
    let n = x.len() / steps;
    let mut v = match initial {
        Some(v0) if v0.shape() == &shape[1..] => v0.data().to_vec(),
        Some(v0) => {
            return Err(Error::dim(
                "spike_layer",
                "initial membrane",
                format!("{:?}", &shape[1..]),
                format!("{:?}", v0.shape()),
            ))
        }
        None => vec![0.0; n],
    };
    let mut pre_reset = vec![0.0; x.len()];
    let mut spikes = vec![0.0; x.len()];
    for t in 0..steps {
        let base = t * n;
        for i in 0..n {
            let h = v[i] + x.data()[base + i];
            let s = params.fire(h);
            pre_reset[base + i] = h;
            spikes[base + i] = s;
            v[i] = h * (1.0 - s) + params.v_reset * s;
        }
    }
    let v_final = Tensor::new(shape[1..].to_vec(), v)?;
    let out = Tensor::new(shape, spikes)?;
    let spikes = tape.record(
        out,
        &[input],
        SpikeLayerRule {
            params: *params,
            pre_reset,
            steps,
        },
    );
    Ok(SpikeLayerOutput { spikes, v_final })
}

struct IntegrateRule {
    steps: usize,
}

impl Backward for IntegrateRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad_out.data();
        let mut data = Vec::with_capacity(g.len() * self.steps);
        for _ in 0..self.steps {
            data.extend_from_slice(g);
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), data).unwrap())]
    }
}

/// Non-spiking integrator over `input` `[T, ...]`: returns the final
/// membrane `V_T = initial + Σ_t X_t`.
pub fn integrate(tape: &mut Tape, input: Var, initial: Option<&Tensor>) -> Result<Var> {
    let x = tape.value(input);
    let shape = x.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::dim("integrate", "rank", ">= 1", 0));
    }
    let steps = shape[0];
    let n = x.len() / steps;
    let mut v = match initial {
        Some(v0) if v0.shape() == &shape[1..] => v0.data().to_vec(),
        Some(v0) => {
            return Err(Error::dim(
                "integrate",
                "initial membrane",
                format!("{:?}", &shape[1..]),
                format!("{:?}", v0.shape()),
            ))
        }
        None => vec![0.0; n],
    };
    for t in 0..steps {
        for (acc, &xi) in v.iter_mut().zip(&x.data()[t * n..(t + 1) * n]) {
            *acc += xi;
        }
    }
    let value = Tensor::new(shape[1..].to_vec(), v)?;
    Ok(tape.record(value, &[input], IntegrateRule { steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn seq(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn quiescent_neuron_stays_silent() {
        let mut st = IfState::new(&[1]);
        let s = if_step(&mut st, &Tensor::zeros(&[1]), &IfParams::default()).unwrap();
        assert_eq!(s.unwrap().item(), 0.0);
        assert_eq!(st.v.item(), 0.0);
    }

    #[test]
    fn hand_simulated_trace() {
        let p = IfParams::default();
        let mut st = IfState::new(&[1]);
        let mut spikes = Vec::new();
        let mut trace = Vec::new();
        for _ in 0..3 {
            spikes.push(if_step(&mut st, &Tensor::from_vec(vec![0.6]), &p).unwrap().unwrap().item());
            trace.push(st.v.item());
        }
        assert_eq!(spikes, vec![0.0, 1.0, 0.0]);
        assert_eq!(trace[0], 0.6);
        assert_eq!(trace[1], 0.0);
        assert_eq!(trace[2], 0.6);
    }

    #[test]
    fn integrator_accumulates() {
        let p = IfParams::default().with_mode(NeuronMode::Integrator);
        let (s, v) = if_multistep(&seq(&[0.5, 0.25]), &p).unwrap();
        assert!(s.is_none());
        assert_eq!(v.item(), 0.75);
    }

    #[test]
    fn first_crossing_time_matches_closed_form() {
        let p = IfParams::default();
        for &c in &[0.3, 0.25, 0.45, 0.9, 0.11] {
            let steps = 12;
            let (s, _) = if_multistep(&seq(&vec![c; steps]), &p).unwrap();
            let s = s.unwrap();
            let first = s.data().iter().position(|&x| x == 1.0).unwrap() + 1;
            // smallest k with k*c >= v_th, accumulated the same way the neuron does
            let mut acc = 0.0;
            let mut k = 0;
            while acc < p.v_threshold {
                acc += c;
                k += 1;
            }
            assert_eq!(first, k, "c={c}");
            assert_eq!(k, (1.0 / c).ceil() as usize, "c={c}");
        }
    }

    #[test]
    fn frame_order_matters() {
        let p = IfParams::default();
        let (a, _) = if_multistep(&seq(&[1.0, 0.0]), &p).unwrap();
        let (b, _) = if_multistep(&seq(&[0.0, 1.0]), &p).unwrap();
        assert_eq!(a.unwrap().data(), &[1.0, 0.0]);
        assert_eq!(b.unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn single_step_matches_stateless_step() {
        let p = IfParams::default();
        let x = Tensor::from_vec(vec![0.2, 1.3, -0.4, 1.0]);
        let (s, v) = if_multistep(&x.clone().reshape(&[1, 4]).unwrap(), &p).unwrap();
        let mut st = IfState::new(&[4]);
        let s1 = if_step(&mut st, &x, &p).unwrap().unwrap();
        assert_eq!(s.unwrap().slice0(0), s1);
        assert_eq!(v, st.v);
    }

    #[test]
    fn surrogate_shape() {
        let p = IfParams::default();
        assert_eq!(p.surrogate(1.0), 1.0);
        assert_eq!(p.surrogate(2.0), 0.0);
        assert_eq!(p.surrogate(-0.5), 0.0);
        let p2 = IfParams {
            surrogate_alpha: 0.5,
            ..p
        };
        assert_eq!(p2.surrogate(1.0), 2.0);
        // trapezoid rule over the support
        let n = 200_000;
        let (lo, hi) = (p.v_threshold - 1.5, p.v_threshold + 1.5);
        let dx = (hi - lo) / n as f64;
        let mut area = 0.0;
        for i in 0..n {
            let a = lo + i as f64 * dx;
            area += 0.5 * dx * (p.surrogate(a) + p.surrogate(a + dx));
        }
        assert!((area - 1.0).abs() < 1e-6, "{area}");
        assert_eq!(surrogate_grad(&Tensor::from_vec(vec![1.0, 3.0]), &p).data(), &[1.0, 0.0]);
    }

    #[test]
    fn smooth_step_is_antiderivative() {
        let p = IfParams::default();
        for &h in &[-0.5, 0.2, 0.7, 1.0, 1.3, 1.9, 2.5] {
            let eps = 1e-6;
            let fd = (p.smooth_step(h + eps) - p.smooth_step(h - eps)) / (2.0 * eps);
            // the second derivative jumps at the threshold, so the central
            // difference there is only first-order accurate
            assert!((fd - p.surrogate(h)).abs() < eps, "h={h}");
        }
    }

    #[test]
    fn reset_clears_state() {
        let p = IfParams::default();
        let mut states = vec![IfState::new(&[2]), IfState::new(&[3])];
        if_step(&mut states[0], &Tensor::from_vec(vec![0.5, 0.7]), &p).unwrap();
        reset_state(states.iter_mut());
        assert!(states.iter().all(|s| s.step == 0 && s.v.sum() == 0.0));
        let s = if_step(&mut states[0], &Tensor::zeros(&[2]), &p).unwrap().unwrap();
        assert_eq!(s.sum(), 0.0);
    }

    #[test]
    fn validation() {
        let bad = IfParams {
            v_reset: 1.0,
            ..IfParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = IfParams {
            surrogate_alpha: 0.0,
            ..IfParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(IfParams::default().validate().is_ok());
    }

    #[test]
    fn spike_layer_matches_reference_forward() {
        let p = IfParams::default();
        let x = Tensor::new(vec![4, 3], vec![0.6, 1.2, -0.1, 0.6, 0.0, 0.9, 0.1, 1.5, 0.3, 0.5, 0.2, 0.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = spike_layer(&mut tape, xv, &p, None).unwrap();
        let (s, v) = if_multistep(&x, &p).unwrap();
        assert_eq!(tape.value(out.spikes), &s.unwrap());
        assert_eq!(out.v_final, v);
        assert!(spike_layer(&mut tape, xv, &p.with_mode(NeuronMode::Integrator), None).is_err());
    }

    #[test]
    fn smooth_layer_gradient_matches_finite_differences() {
        let p = IfParams::default().with_mode(NeuronMode::Smooth);
        let x0: Vec<f64> = vec![0.31, 0.77, -0.2, 0.55, 0.9, 0.05, 0.4, 1.4, 0.62, 0.13, 0.71, 0.33];
        let w: Vec<f64> = (0..12).map(|i| 0.3 + 0.1 * i as f64).collect();
        let loss = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![4, 3], x.to_vec()).unwrap(), false);
            let o = spike_layer(&mut tape, xv, &p, None).unwrap();
            tape.value(o.spikes).data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![4, 3], x0.clone()).unwrap(), true);
        let o = spike_layer(&mut tape, xv, &p, None).unwrap();
        let wv = tape.constant(Tensor::new(vec![4, 3], w.clone()).unwrap());
        let prod = ops::mul(&mut tape, o.spikes, wv).unwrap();
        let l = ops::sum(&mut tape, prod);
        tape.backward(l).unwrap();
        let g = tape.grad(xv).unwrap().data().to_vec();
        for i in 0..x0.len() {
            let eps = 1e-5;
            let mut xp = x0.clone();
            xp[i] += eps;
            let mut xm = x0.clone();
            xm[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let scale = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / scale < 1e-5, "i={i} fd={fd} an={}", g[i]);
        }
    }

    #[test]
    fn integrate_sums_over_time() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let v = integrate(&mut tape, x, None).unwrap();
        assert_eq!(tape.value(v).data(), &[9.0, 12.0]);
        let l = ops::sum(&mut tape, v);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }
}
