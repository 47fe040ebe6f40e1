//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its inputs in an `Op` node, so each forward pass
//! builds a fresh dynamic graph. `backward` on a scalar output walks the
//! graph once in reverse topological order and accumulates gradients into
//! every tracked node, leaves included. Values are immutable after
//! creation; only the gradient buffer is interior-mutable.

mod backward;
mod fdcheck;
mod ops;

pub use fdcheck::finite_diff_check;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{FasError, Result};

/// Operation that produced a tensor. Parents are held by reference count,
/// which keeps the graph alive exactly as long as its outputs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Neg(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Abs(Tensor),
    MatMul {
        a: Tensor,
        b: Tensor,
        m: usize,
        k: usize,
        n: usize,
    },
    MatVec {
        a: Tensor,
        x: Tensor,
        m: usize,
        k: usize,
    },
    Conv2d {
        input: Tensor,
        kernels: Tensor,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        x: Tensor,
        bias: Tensor,
    },
    Softmax(Tensor),
    LogSoftmax(Tensor),
    Index {
        x: Tensor,
        idx: usize,
    },
    Sum(Tensor),
    Mean(Tensor),
    MeanGroups {
        x: Tensor,
        groups: usize,
    },
    Upsample2x(Tensor),
    AvgPool2x2(Tensor),
    Reshape(Tensor),
    Standardize(Tensor),
    ConcatChannels {
        a: Tensor,
        b: Tensor,
        a_ch: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul { a, b, .. }
            | Op::ConcatChannels { a, b, .. } => vec![a, b],
            Op::MatVec { a, x, .. } | Op::AddChannelBias { x, bias: a } => vec![a, x],
            Op::Conv2d { input, kernels, .. } => vec![input, kernels],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Neg(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Abs(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Index { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanGroups { x, .. }
            | Op::Upsample2x(x)
            | Op::AvgPool2x2(x)
            | Op::Reshape(x)
            | Op::Standardize(x) => vec![x],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<usize> {
    if shape.contains(&0) {
        return Err(FasError::Dim {
            op: "tensor",
            detail: format!("zero extent in shape {shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(FasError::Dim {
            op: "tensor",
            detail: format!("shape {shape:?} implies {numel} elements, data has {len}"),
        });
    }
    Ok(numel)
}

impl Tensor {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let tracked = op.parents().iter().any(|p| p.inner.tracked);
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                tracked,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant (untracked) tensor from parts.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data,
                tracked: false,
                grad: RefCell::new(None),
                op: Op::Leaf,
            }),
        })
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data,
                tracked: true,
                grad: RefCell::new(None),
                op: Op::Leaf,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Whether gradients flow through/into this tensor.
    pub fn requires_grad(&self) -> bool {
        self.inner.tracked
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "value() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if a backward pass populated one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values as a fresh untracked leaf; cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.inner.data.clone()).expect("detach")
    }

    /// Same values as a fresh tracked leaf.
    pub fn detach_tracked(&self) -> Tensor {
        Tensor::leaf(&self.inner.shape, self.inner.data.clone()).expect("detach_tracked")
    }

    /// True when the two tensors share the same node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Raw little-endian byte serialization, row-major. The shape is
    /// carried externally by whichever manifest references the blob.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 8);
        for v in &self.inner.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(FasError::Integrity(format!(
                "blob holds {} bytes, shape {shape:?} needs {}",
                bytes.len(),
                numel * 8
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// FNV-1a fingerprint of the value buffer; used for golden regressions.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.inner.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
