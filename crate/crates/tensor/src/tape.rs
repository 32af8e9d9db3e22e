//! The computation tape.
//!
//! Every forward op appends a node holding its output values and enough
//! information to push gradients back to its parents. Tapes are rebuilt for
//! each training step and dropped afterwards.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Tan(usize),
    /// Gradient passes through unchanged (reshape, angle wrapping).
    Identity(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        idx: Rc<[usize]>,
    },
    MaskedFill {
        x: usize,
        mask: Rc<[bool]>,
    },
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    PairScores {
        q: usize,
        k: usize,
        q_rows: Rc<[usize]>,
        k_rows: Rc<[usize]>,
        heads: usize,
    },
    PairMix {
        w: usize,
        v: usize,
        v_rows: Rc<[usize]>,
        group: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Tan(_) => "tan",
            Op::Identity(_) => "identity",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::SumAxis { .. } => "sum_axis",
            Op::PairScores { .. } => "pair_scores",
            Op::PairMix { .. } => "pair_mix",
        }
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct Inner {
    pub(crate) nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
    params: HashMap<usize, usize>,
}

/// A define-by-run computation tape. Cloning shares the same tape.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.id, self.shape())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        let mut inner = self.inner.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|&p| inner.nodes[p].requires_grad),
        };
        let id = inner.nodes.len();
        if inner.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            inner.first_non_finite = Some((id, op.name()));
        }
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { tape: self.clone(), id }
    }

    /// A constant (gradient-free) tensor.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(TensorError::Invalid {
                op: "constant",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf)
    }

    /// Binds a parameter onto this tape. Repeated binds of the same parameter
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.inner.borrow().params.get(&id.0) {
            return Var {
                tape: self.clone(),
                id: node,
            };
        }
        let entry = store.entry(id);
        let var = self.push(entry.shape.clone(), entry.value.clone(), Op::Param(id.0));
        self.inner.borrow_mut().params.insert(id.0, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails with the first op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.inner.borrow().first_non_finite {
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    /// Borrow of this node's values.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.tape.inner.borrow(), |inner| inner.nodes[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.values()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }
}

pub(crate) fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Tan(a)
        | Op::Identity(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumSquares(a) => vec![*a],
        Op::LayerNorm { x, .. }
        | Op::Softmax { x, .. }
        | Op::Slice { x, .. }
        | Op::Gather { x, .. }
        | Op::MaskedFill { x, .. }
        | Op::SumAxis { x, .. } => vec![*x],
        Op::Concat { parts, .. } => parts.clone(),
        Op::PairScores { q, k, .. } => vec![*q, *k],
        Op::PairMix { w, v, .. } => vec![*w, *v],
    }
}
