use std::ops::Index;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name,
            value,
            grad: None,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            steps: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Records every parameter on `tape` as a gradient-collecting leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), true))
                .collect(),
        )
    }

    /// Adds the gradients collected on `tape` into the parameters' buffers.
    /// Parameters that did not influence the loss receive a zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ParamVars) {
        for (p, &v) in self.params.iter_mut().zip(&vars.0) {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// One bias-corrected Adam update of every parameter. Fails without
    /// touching anything if some parameter has no gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }
        for p in &mut self.params {
            let g = p.grad.as_ref().expect("checked above");
            p.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.steps as i32);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![value]));
        store.get_mut(id).grad = grad.map(|g| Tensor::from_vec(vec![g]));
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0, Some(1.0));
        store.adam_step(&AdamConfig::default()).unwrap();
        let w = store.get(ParamId(0)).value.item();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((w + 0.002 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut store = scalar_store(0.7, Some(0.0));
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get(ParamId(0)).value.item(), 0.7);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut store = scalar_store(1.0, Some(0.5));
        let mut prev = 1.0;
        for _ in 0..2 {
            store.adam_step(&AdamConfig::default()).unwrap();
            let w = store.get(ParamId(0)).value.item();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut store = scalar_store(1.0, None);
        assert!(matches!(store.adam_step(&AdamConfig::default()), Err(Error::State(_))));
    }
}
