use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use super::kernels::Op;
use super::{Parameters, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    param_ids: HashMap<String, usize>,
    faults: Vec<(&'static str, f64)>,
}

/// Records operations in execution order. A tape and the [`Var`]s that
/// borrow it stay on one thread.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op.name())
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool, param: Option<String>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
            param,
        });
        inner.nodes.len() - 1
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(Op::Leaf, Vec::new(), value, requires_grad, None);
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf bound to a named parameter. Repeated requests for the same name
    /// return the same node, so every use accumulates into one gradient.
    pub fn param<'t>(&'t self, params: &Parameters, name: &str) -> Result<Var<'t>> {
        if let Some(&id) = self.inner.borrow().param_ids.get(name) {
            return Ok(Var { tape: self, id });
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        let id = self.push(
            Op::Leaf,
            Vec::new(),
            p.value.clone(),
            p.requires_grad,
            Some(name.to_string()),
        );
        self.inner.borrow_mut().param_ids.insert(name.to_string(), id);
        Ok(Var { tape: self, id })
    }

    /// Scales the adjoint of every node of the named operation. Only used to
    /// show that gradient checking catches a wrong backward rule.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&self, op_name: &'static str, factor: f64) {
        self.inner.borrow_mut().faults.push((op_name, factor));
    }

    fn record(&self, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        let (values, requires_grad) = {
            let inner = self.inner.borrow();
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|&i| inner.nodes[i].value.clone()).collect();
            let rg = inputs.iter().any(|&i| inner.nodes[i].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        let id = self.push(op, inputs.to_vec(), out, requires_grad, None);
        Ok(Var { tape: self, id })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let inner = self.inner.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = match node.op {
                Op::Leaf => node.value.as_ref().clone(),
                _ => {
                    let refs: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    node.op.forward(&refs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Recorded output of every node, in tape order.
    pub fn recorded_values(&self) -> Vec<Tensor> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.value.as_ref().clone())
            .collect()
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are returned for
    /// leaves only; leaves the loss does not depend on get none.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("backward on a variable from another tape".into()));
        }
        let inner = self.inner.borrow();
        let root = &inner.nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![1.0]));
        }
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| inner.nodes[i].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| inner.nodes[i].value.as_ref()).collect();
            let mut adj = node.op.adjoint(&inputs, &node.value, &g, &needs);
            for &(name, factor) in &inner.faults {
                if name == node.op.name() {
                    for a in adj.iter_mut().flatten() {
                        a.data_mut().iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (&input, a) in node.inputs.iter().zip(adj) {
                let Some(a) = a else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(a.data()).for_each(|(x, y)| *x += y),
                    slot @ None => *slot = Some(a),
                }
            }
        }
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for (id, node) in inner.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if let Some(g) = grads[id].take() {
                    if let Some(name) = &node.param {
                        params.push((name.clone(), g.clone()));
                    }
                    leaves.insert(id, g);
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, g)| (n.as_str(), g))
    }

    /// Adds parameter gradients into `params`, so successive sweeps
    /// accumulate until [`Parameters::zero_grad`].
    pub fn accumulate_into(&self, params: &mut Parameters) {
        for (name, g) in &self.params {
            if let Some(p) = params.get_mut(name) {
                match &mut p.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

macro_rules! unary_ops {
    ($($(#[$m:meta])* $name:ident => $op:expr;)*) => {
        $(
            $(#[$m])*
            pub fn $name(&self) -> Result<Var<'t>> {
                self.tape.record($op, &[self.id])
            }
        )*
    };
}

macro_rules! binary_ops {
    ($($(#[$m:meta])* $name:ident => $op:expr;)*) => {
        $(
            $(#[$m])*
            pub fn $name(&self, other: &Var<'t>) -> Result<Var<'t>> {
                self.tape.record($op, &[self.id, other.id])
            }
        )*
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.as_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    binary_ops! {
        /// Elementwise sum; `other` may broadcast over leading axes.
        add => Op::Add;
        sub => Op::Sub;
        mul => Op::Mul;
        div => Op::Div;
        /// `[m×k] · [k×n]`
        matmul => Op::Matmul;
        /// Dot product of two vectors of equal length.
        inner_product => Op::InnerProduct;
        /// `self` is the input block, `other` the weight block.
        dynamic_contract => Op::DynamicContract;
    }

    unary_ops! {
        neg => Op::Neg;
        exp => Op::Exp;
        log => Op::Log;
        relu => Op::Relu;
        /// Tanh approximation of GELU.
        gelu => Op::Gelu;
        sigmoid => Op::Sigmoid;
        transpose => Op::Transpose;
        sum => Op::Sum;
        mean => Op::Mean;
        /// Softmax over the last axis.
        softmax => Op::Softmax;
        /// Log-sum-exp over the last axis, which is removed.
        logsumexp => Op::LogSumExp;
        /// `v / max(|v|, 1e-12)` over the last axis.
        l2_normalize => Op::L2Normalize;
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Scale(c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.tape.record(Op::AddScalar(c), &[self.id])
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.tape.record(Op::Clamp { lo, hi }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::Reshape(shape.to_vec()), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::Permute(perm.to_vec()), &[self.id])
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.tape.record(Op::Slice { axis, start, end }, &[self.id])
    }

    /// Picks elements by flat row-major index.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        self.tape.record(Op::Gather(indices.to_vec()), &[self.id])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.tape.record(Op::SumAxis(axis), &[self.id])
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.tape.record(Op::MeanAxis(axis), &[self.id])
    }

    /// Zero-mean, unit-variance over the last axis (no affine part).
    pub fn layer_norm(&self) -> Result<Var<'t>> {
        self.tape.record(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[self.id])
    }

    /// Cross-correlation of `self` (`C_in×H×L×D`) with `kernels`
    /// (`C_out×C_in×kh×kl×kd`).
    pub fn conv3d(&self, kernels: &Var<'t>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var<'t>> {
        self.tape.record(Op::Conv3d { stride, padding }, &[self.id, kernels.id])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        first.tape.record(Op::Concat { axis }, &ids)
    }
}
