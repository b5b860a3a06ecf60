use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub grad_out: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// `needs[i]` is false when input `i` does not require a gradient; rules
    /// may skip that computation and return `None`.
    pub needs: Vec<bool>,
}

/// Reverse rule of a recorded operation: maps the output gradient to one
/// gradient per input (in the order the inputs were recorded).
pub trait Backward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of operations. Single writer; values are immutable once
/// recorded, only gradient buffers change.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records the result of an operation. The rule is kept only when some
    /// input requires a gradient.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], rule: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward>),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` node reachable
    /// from the scalar `loss`. Repeated calls accumulate into existing
    /// gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        let loss_len = self.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(Error::arg(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let ctx = BackwardCtx {
                    grad_out: &g,
                    output: &node.value,
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    needs: node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect(),
                };
                let input_grads = rule.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), self.nodes[v.0].value.shape());
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
