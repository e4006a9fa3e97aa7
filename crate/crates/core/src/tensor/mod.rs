//! Define-by-run reverse-mode differentiation over dense row-major `f64`
//! matrices.
//!
//! Every builder method on [`Graph`] computes its value immediately and
//! records the operation, so a graph is always in topological order. The
//! recorded graph can be re-evaluated with new leaf values
//! ([`Graph::evaluate`]) and differentiated ([`Graph::backprop`]).

mod check;
mod ops;
mod optim;
mod params;

use std::rc::Rc;

use crate::error::{Error, Result};

pub use check::finite_diff_check;
pub use optim::{AdamConfig, AdamState};
pub use params::{Checkpoint, CheckpointManifest, ParamStore};

/// Dense tensor. Operations treat it as a `rows x cols` matrix; a 1-D shape
/// `[n]` is read as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: length must match the shape and values must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if shape.len() > 2 || shape.is_empty() {
            return Err(Error::Shape(format!("only 1-D and 2-D tensors are supported, got {shape:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor input".into()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `[r, c] + [1, c]`
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    Reshape(Var, usize, usize),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
        seg_len: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, Option<Rc<Vec<bool>>>),
    Log(Var),
    Embedding(Var, Rc<Vec<usize>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        blocks: usize,
        transpose_b: bool,
    },
    NodeMix {
        x: Var,
        mix: Rc<Vec<f64>>,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    WeightedNll {
        probs: Var,
        targets: Rc<Vec<usize>>,
        coef: Rc<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) bound: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of one output with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::raw(like.rows(), like.cols(), vec![0.0; like.len()]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool, bound: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
            bound,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false, true)
    }

    /// Leaf that must be bound through [`Graph::evaluate`] before its
    /// downstream values are meaningful. Holds zeros until then.
    pub fn placeholder(&mut self, rows: usize, cols: usize, requires_grad: bool) -> Var {
        self.leaf(Tensor::zeros(rows, cols), requires_grad, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of an output node, rejecting NaN or infinity.
    pub fn output(&self, v: Var) -> Result<&Tensor> {
        let t = self.value(v);
        if t.is_finite() {
            Ok(t)
        } else {
            Err(Error::NonFinite(format!("output node {}", v.0)))
        }
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        ops::check_shapes(self, &op)?;
        let value = ops::forward(self, &op);
        let requires_grad = ops::inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            bound: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Rebinds leaves and recomputes every node in order.
    pub fn evaluate(&mut self, bindings: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in bindings {
            let node = self
                .nodes
                .get_mut(v.0)
                .ok_or_else(|| Error::Shape(format!("node {} does not exist", v.0)))?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Shape(format!("node {} is not a leaf", v.0)));
            }
            if node.value.rows() != t.rows() || node.value.cols() != t.cols() {
                return Err(Error::Shape(format!(
                    "binding for leaf {} has shape {:?}, expected {:?}",
                    v.0,
                    t.shape(),
                    node.value.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("binding for leaf {}", v.0)));
            }
            node.value = t.clone();
            node.bound = true;
        }
        if let Some(i) = self.nodes.iter().position(|n| !n.bound) {
            return Err(Error::UnboundLeaf(i));
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = ops::forward(self, &self.nodes[i].op);
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    pub fn backprop(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out = self.value(output);
        if out.rows() != seed.rows() || out.cols() != seed.cols() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::raw(out.rows(), out.cols(), seed.data().to_vec()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                ops::backward(self, &node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backprop of a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backprop(output, &Tensor::scalar(1.0))
    }

    // ---- builders ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, len))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, Rc::new(rows)))
    }

    /// Same data, new `rows x cols` view.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        if rows * cols != n {
            return Err(Error::Shape(format!("cannot reshape {n} values to {rows}x{cols}")));
        }
        self.push(Op::Reshape(a, rows, cols))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// Causal dilated convolution along rows. `x` holds consecutive segments
    /// of `seg_len` time steps (`[segments * seg_len, c_in]`); `w` is
    /// `[kernel * c_in, c_out]` with tap `kernel - 1` on the current step.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize, seg_len: usize) -> Result<Var> {
        self.push(Op::Conv1d {
            x,
            w,
            kernel,
            dilation,
            seg_len,
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a, None))
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are 0
    /// and a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        self.push(Op::Softmax(a, Some(mask)))
    }

    /// Natural log, inputs clamped below at `1e-12`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.push(Op::Embedding(table, Rc::new(ids)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    /// Block-diagonal product: `a` and `b` are split row-wise into `blocks`
    /// equal parts and multiplied pairwise (`b` transposed when asked).
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize, transpose_b: bool) -> Result<Var> {
        self.push(Op::BlockMatMul {
            a,
            b,
            blocks,
            transpose_b,
        })
    }

    /// For `x` laid out as groups of `n` rows, replaces each group `X_g` by
    /// `M X_g` with the constant `n x n` matrix `M` (row-major in `mix`).
    pub fn node_mix(&mut self, x: Var, mix: Rc<Vec<f64>>, n: usize) -> Result<Var> {
        self.push(Op::NodeMix { x, mix, n })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// `sum_r coef[r] * -ln(max(p[r, target[r]], 1e-12))`
    pub fn weighted_nll(&mut self, probs: Var, targets: Vec<usize>, coef: Vec<f64>) -> Result<Var> {
        self.push(Op::WeightedNll {
            probs,
            targets: Rc::new(targets),
            coef: Rc::new(coef),
        })
    }

    /// Scaled dot-product attention within `blocks` independent row groups.
    /// `mask`, when given, has one entry per score (`[rows of q, keys per block]`).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: usize,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<(Var, Var)> {
        let d = self.value(q).cols() as f64;
        let scores = self.block_matmul(q, k, blocks, true)?;
        let scores = self.scale(scores, 1.0 / d.sqrt())?;
        let weights = match mask {
            Some(m) => self.masked_softmax(scores, m)?,
            None => self.softmax(scores)?,
        };
        let out = self.block_matmul(weights, v, blocks, false)?;
        Ok((out, weights))
    }
}
