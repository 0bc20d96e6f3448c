use super::{Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the input values, the output value, the
/// gradient flowing into the output, and which inputs want a gradient.
pub struct BackwardCtx<'a, F> {
    pub inputs: Vec<&'a Tensor<F>>,
    pub output: &'a Tensor<F>,
    pub grad: &'a [F],
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> + Send>;

enum Record<F> {
    Leaf,
    Constant,
    Op {
        name: &'static str,
        inputs: Vec<Var>,
        backward: BackwardFn<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    record: Record<F>,
    requires_grad: bool,
}

/// Recording of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are stored in recording order, which is a topological order.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            record: Record::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            record: Record::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].record, Record::Leaf)
    }

    /// Records an operation. The output must be finite.
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: Vec<Var>,
        value: Tensor<F>,
        backward: impl Fn(&BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> + Send + 'static,
    ) -> Result<Var, TensorError> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = if requires_grad {
            Record::Op {
                name,
                inputs,
                backward: Box::new(backward),
            }
        } else {
            Record::Constant
        };
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Nodes are visited in strict reverse
    /// recording order; gradients of shared inputs accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Contract(format!("loss {loss:?} is not on this tape")))?;
        if loss_node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Record::Op {
                name,
                inputs,
                backward,
            } = &node.record
            {
                let ctx = BackwardCtx {
                    inputs: inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                let contributions = backward(&ctx);
                debug_assert_eq!(contributions.len(), inputs.len(), "{name}: one gradient slot per input");
                for (input, contrib) in inputs.iter().zip(contributions) {
                    let Some(contrib) = contrib else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), self.nodes[input.0].value.len(), "{name}: gradient length");
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients<F> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        match self.grads[v.0].take() {
            Some(data) => Tensor {
                shape: self.shapes[v.0].clone(),
                data,
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
