//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! then walks the record in reverse and returns one gradient per registered
//! parameter. Tapes are rebuilt for every pass and may be consumed only once.
//! Parameters and large constants are borrowed, not copied.

mod kernels;
mod tensor;

use std::borrow::Cow;

pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this tape; record a new forward pass")]
    Consumed,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Add { a: Var, b: Var },
    Softmax { x: Var },
    ConcatCols { parts: Vec<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var> },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var, out: [usize; 2] },
    Reshape { x: Var },
    Affine { x: Var, scale: f64 },
    Rmse { pred: Var, label: Var },
    Mean { xs: Vec<Var> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Linear { x, w, b } | Op::Conv2d { x, k: w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::Rmse { pred, label } => vec![*pred, *label],
            Op::Scale { x, .. }
            | Op::Softmax { x }
            | Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::AdaptiveAvgPool { x, .. }
            | Op::Reshape { x }
            | Op::Affine { x, .. } => vec![*x],
            Op::ConcatCols { parts: xs } | Op::Mean { xs } => xs.clone(),
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    /// Whether any parameter is upstream of this node.
    requires_grad: bool,
}

/// Gradients in parameter registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

/// Record of one forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<Var>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(AutodiffError::NonFinite(op))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        let requires_grad = matches!(op, Op::Param) || op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let v = finite(value, name)?;
        Ok(self.push(Cow::Owned(v), op))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable parameter; gradients come back in registration order.
    pub fn param(&mut self, t: &'a Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(AutodiffError::NonFinite("parameter"));
        }
        let v = self.push(Cow::Borrowed(t), Op::Param);
        self.params.push(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_checked(t, Op::Constant, "constant")
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(AutodiffError::NonFinite("constant"));
        }
        Ok(self.push(Cow::Borrowed(t), Op::Constant))
    }

    /// `x·W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push_checked(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(a), self.value(b), None)?;
        self.push_checked(y, Op::MatMul { a, b }, "matmul")
    }

    /// `a·bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_nt(self.value(a), self.value(b))?;
        self.push_checked(y, Op::MatMulNt { a, b }, "matmul_nt")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push_checked(y, Op::Scale { x, s }, "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(y, Op::Add { a, b }, "add")
    }

    /// Row-wise softmax of a matrix, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(x))?;
        self.push_checked(y, Op::Softmax { x }, "softmax_rows")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let y = kernels::concat_cols(&ts)?;
        self.push_checked(y, Op::ConcatCols { parts: parts.to_vec() }, "concat_cols")
    }

    /// Valid stride-1 convolution, `x: [h, w, c_in]`, `k: [kh, kw, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)))?;
        self.push_checked(y, Op::Conv2d { x, k, b }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push_checked(y, Op::Relu { x }, "relu")
    }

    /// Max pooling over `window` with `stride` on `[h, w, c]`; ties route to
    /// the first maximal element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: [usize; 2], stride: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d(self.value(x), window, stride)?;
        self.push_checked(y, Op::MaxPool { x, argmax }, "maxpool2d")
    }

    /// Average pooling of `[h, w, c]` onto `[p, q, c]` with partitioning blocks.
    pub fn adaptive_avgpool(&mut self, x: Var, out: [usize; 2]) -> Result<Var> {
        let y = kernels::adaptive_avgpool(self.value(x), out)?;
        self.push_checked(y, Op::AdaptiveAvgPool { x, out }, "adaptive_avgpool")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push_checked(y, Op::Reshape { x }, "reshape")
    }

    /// `offset + scale · x` with a constant offset of the same length.
    pub fn affine(&mut self, x: Var, scale: f64, offset: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != offset.len() {
            return Err(AutodiffError::Shape(format!("affine offset {} vs {:?}", offset.len(), t.shape())));
        }
        let data = t.data().iter().zip(offset).map(|(v, o)| o + scale * v).collect();
        let y = Tensor::new(t.shape().to_vec(), data)?;
        self.push_checked(y, Op::Affine { x, scale }, "affine")
    }

    /// `sqrt(mean((pred − label)²))` as a scalar.
    pub fn rmse(&mut self, pred: Var, label: Var) -> Result<Var> {
        let (p, l) = (self.value(pred), self.value(label));
        if p.len() != l.len() || p.is_empty() {
            return Err(AutodiffError::Shape(format!("rmse {:?} vs {:?}", p.shape(), l.shape())));
        }
        let y = Tensor::scalar(kernels::rmse(p.data(), l.data()));
        self.push_checked(y, Op::Rmse { pred, label }, "rmse")
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(AutodiffError::Shape("mean of nothing".into()));
        }
        let mut s = 0.0;
        for x in xs {
            let t = self.value(*x);
            if t.len() != 1 {
                return Err(AutodiffError::NotScalar(t.shape().to_vec()));
            }
            s += t.data()[0];
        }
        let y = Tensor::scalar(s / xs.len() as f64);
        self.push_checked(y, Op::Mean { xs: xs.to_vec() }, "mean")
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets a
    /// gradient, zero-filled when the loss does not depend on it. A tape can
    /// be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::Consumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            kernels::backprop(&self.nodes, &node.op, &node.value, &g, &mut grads)?;
            // parameters keep their gradient for collection below
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }
        let out = self
            .params
            .iter()
            .map(|p| {
                let shape = self.value(*p).shape().to_vec();
                match grads[p.0].take() {
                    Some(g) => Tensor::new(shape, g),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for g in &out {
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite("backward"));
            }
        }
        Ok(Gradients(out))
    }
}

#[cfg(test)]
mod tests;
