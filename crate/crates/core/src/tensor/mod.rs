//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every differentiable operation of one forward pass
//! (define-by-run); [`Tensor`] is a cheap handle into it. Calling
//! [`Tensor::backward`] on a scalar walks the recorded operations in exact
//! reverse execution order and accumulates gradients into every reachable
//! [`Param`]. The graph is meant to be dropped afterwards; parameters live
//! outside it and persist across passes.
//!
//! Storage is flat row-major. There is no general broadcasting: the only
//! shape-bending ops are `add_row` (bias over rows), `scale_by` (multiply by
//! a 1-element tensor) and the explicit concat/slice/reshape family. Shape
//! misuse panics with a message naming both shapes.

mod check;
mod optim;
mod param;

pub use check::finite_diff_check;
pub use optim::{AdamW, AdamWConfig};
pub use param::{Param, ParamSet};

use std::cell::RefCell;
use std::rc::Rc;

/// Variance floor for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Clamp applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone)]
enum Op {
    Leaf,
    ParamLeaf(Param),
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleConst(usize, f64),
    AddConst(usize),
    ScaleByScalar(usize, usize),
    Gelu(usize),
    Sigmoid(usize),
    LogClamped(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize, usize),
    MaskedSoftmaxRows(usize, Rc<Vec<bool>>),
    LayerNorm { x: usize, gain: usize, bias: usize },
    CrossEntropy { logits: usize, target: usize },
    ConcatRows(usize, usize),
    ConcatCols(Rc<Vec<usize>>),
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    GatherRows { table: usize, ids: Rc<Vec<usize>> },
    Reshape(usize),
    Detach,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Recorded forward pass. Clone handles share the same recording.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to one value in a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(debug_assertions)]
fn assert_finite(data: &[f64], what: &str) {
    debug_assert!(
        data.iter().all(|x| x.is_finite()),
        "non-finite value produced by {what}"
    );
}
#[cfg(not(debug_assertions))]
fn assert_finite(_data: &[f64], _what: &str) {}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Non-differentiable input value.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(shape),
            data.len(),
            "constant: shape {:?} does not hold {} values",
            shape,
            data.len()
        );
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&[1], vec![v])
    }

    /// Leaf bound to a parameter; backward accumulates into `param.grad`.
    pub fn param(&self, param: &Param) -> Tensor {
        let (shape, data) = param.shape_and_data();
        self.push(shape, data, true, Op::ParamLeaf(param.clone()))
    }

    /// Columnwise concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let rows = parts[0].dim(0);
        let mut total_cols = 0;
        for p in parts {
            assert!(
                Rc::ptr_eq(&p.graph.inner, &self.inner),
                "concat_cols: tensor from another graph"
            );
            assert_eq!(p.rank(), 2, "concat_cols: rank-2 tensors only");
            assert_eq!(
                p.dim(0),
                rows,
                "concat_cols: row mismatch {} vs {}",
                p.dim(0),
                rows
            );
            total_cols += p.dim(1);
        }
        let mut data = vec![0.0; rows * total_cols];
        {
            let inner = self.inner.borrow();
            let mut col_off = 0;
            for p in parts {
                let n = &inner.nodes[p.id];
                let cols = n.shape[1];
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + cols]
                        .copy_from_slice(&n.data[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        let ids = Rc::new(parts.iter().map(|p| p.id).collect::<Vec<_>>());
        self.push(vec![rows, total_cols], data, requires, Op::ConcatCols(ids))
    }

    /// Rows of `table` selected by index, in order (embedding lookup).
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Tensor {
        assert_eq!(table.rank(), 2, "gather_rows: table must be rank-2");
        let (rows, cols) = (table.dim(0), table.dim(1));
        for &i in ids {
            assert!(i < rows, "gather_rows: id {i} out of range 0..{rows}");
        }
        let data = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[table.id];
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                out.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
            }
            out
        };
        self.push(
            vec![ids.len(), cols],
            data,
            table.requires_grad(),
            Op::GatherRows {
                table: table.id,
                ids: Rc::new(ids.to_vec()),
            },
        )
    }

    fn node_requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn node_data(&self, id: usize) -> Vec<f64> {
        self.inner.borrow().nodes[id].data.clone()
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.node_shape(self.id)
    }

    pub fn rank(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.inner.borrow().nodes[self.id].shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node_requires(self.id)
    }

    /// Copy of the value buffer.
    pub fn data(&self) -> Vec<f64> {
        self.graph.node_data(self.id)
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        assert_eq!(
            n.data.len(),
            1,
            "item: tensor of shape {:?} is not scalar",
            n.shape
        );
        n.data[0]
    }

    fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "operands recorded on different graphs"
        );
    }

    fn binary_same_shape(&self, other: &Tensor, name: &str) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        self.same_graph(other);
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        assert_eq!(
            a.shape, b.shape,
            "{name}: shape {:?} vs {:?}",
            a.shape, b.shape
        );
        (a.shape.clone(), a.data.clone(), b.data.clone())
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (shape, a, b) = self.binary_same_shape(other, "add");
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_finite(&data, "add");
        let req = self.requires_grad() || other.requires_grad();
        self.graph.push(shape, data, req, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (shape, a, b) = self.binary_same_shape(other, "sub");
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        assert_finite(&data, "sub");
        let req = self.requires_grad() || other.requires_grad();
        self.graph.push(shape, data, req, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (shape, a, b) = self.binary_same_shape(other, "mul");
        let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        assert_finite(&data, "mul");
        let req = self.requires_grad() || other.requires_grad();
        self.graph.push(shape, data, req, Op::Mul(self.id, other.id))
    }

    /// `[m×n] + [n]`: the row vector is added to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        self.same_graph(row);
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[row.id];
        assert_eq!(a.shape.len(), 2, "add_row: lhs must be rank-2");
        assert_eq!(
            b.shape,
            vec![a.shape[1]],
            "add_row: shape {:?} vs row {:?}",
            a.shape,
            b.shape
        );
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut data = a.data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b.data[c];
            }
        }
        let shape = a.shape.clone();
        drop(inner);
        assert_finite(&data, "add_row");
        let req = self.requires_grad() || row.requires_grad();
        self.graph.push(shape, data, req, Op::AddRow(self.id, row.id))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        assert_finite(&data, "scale");
        self.graph.push(
            self.shape(),
            data,
            self.requires_grad(),
            Op::ScaleConst(self.id, c),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + c).collect();
        assert_finite(&data, "add_const");
        self.graph.push(
            self.shape(),
            data,
            self.requires_grad(),
            Op::AddConst(self.id),
        )
    }

    /// Elementwise multiply by a 1-element tensor.
    pub fn scale_by(&self, s: &Tensor) -> Tensor {
        self.same_graph(s);
        assert_eq!(s.numel(), 1, "scale_by: scale must have one element");
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|x| x * sv).collect();
        assert_finite(&data, "scale_by");
        let req = self.requires_grad() || s.requires_grad();
        self.graph.push(
            self.shape(),
            data,
            req,
            Op::ScaleByScalar(self.id, s.id),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        assert!(
            a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
            "matmul: incompatible shapes {:?} x {:?}",
            a.shape,
            b.shape
        );
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        drop(inner);
        assert_finite(&data, "matmul");
        let req = self.requires_grad() || other.requires_grad();
        self.graph
            .push(vec![m, n], data, req, Op::Matmul(self.id, other.id))
    }

    /// Rank-2 transpose.
    pub fn t(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        assert_eq!(a.shape.len(), 2, "transpose: rank-2 only, got {:?}", a.shape);
        let (m, n) = (a.shape[0], a.shape[1]);
        let data = transpose_raw(&a.data, m, n);
        drop(inner);
        self.graph
            .push(vec![n, m], data, self.requires_grad(), Op::Transpose(self.id))
    }

    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| gelu_fwd(x)).collect();
        assert_finite(&data, "gelu");
        self.graph
            .push(self.shape(), data, self.requires_grad(), Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| sigmoid_fwd(x)).collect();
        assert_finite(&data, "sigmoid");
        self.graph
            .push(self.shape(), data, self.requires_grad(), Op::Sigmoid(self.id))
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log_clamped(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
        assert_finite(&data, "log_clamped");
        self.graph.push(
            self.shape(),
            data,
            self.requires_grad(),
            Op::LogClamped(self.id),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        self.graph
            .push(vec![1], vec![s], self.requires_grad(), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor {
        let d = self.data();
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        self.graph
            .push(vec![1], vec![s], self.requires_grad(), Op::Mean(self.id))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shape = self.shape();
        assert!(
            axis < shape.len(),
            "softmax: axis {axis} out of range for shape {shape:?}"
        );
        let data = softmax_axis_raw(&self.data(), &shape, axis, None);
        assert_finite(&data, "softmax");
        self.graph
            .push(shape, data, self.requires_grad(), Op::Softmax(self.id, axis))
    }

    /// Row softmax on a rank-2 tensor where `mask[j] == false` columns get
    /// exactly zero weight. Panics if a row has no unmasked column.
    pub fn masked_softmax_rows(&self, mask: Option<&[bool]>) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "masked_softmax_rows: rank-2 only");
        let mask_vec = match mask {
            Some(m) => {
                assert_eq!(
                    m.len(),
                    shape[1],
                    "masked_softmax_rows: mask len {} vs {} columns",
                    m.len(),
                    shape[1]
                );
                assert!(m.iter().any(|&b| b), "masked_softmax_rows: fully masked row");
                m.to_vec()
            }
            None => vec![true; shape[1]],
        };
        let data = softmax_axis_raw(&self.data(), &shape, 1, Some(&mask_vec));
        assert_finite(&data, "masked_softmax_rows");
        self.graph.push(
            shape,
            data,
            self.requires_grad(),
            Op::MaskedSoftmaxRows(self.id, Rc::new(mask_vec)),
        )
    }

    /// Normalize the last axis to zero mean / unit variance (population,
    /// floored at [`LAYER_NORM_EPS`]), then apply elementwise gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Tensor {
        self.same_graph(gain);
        self.same_graph(bias);
        let shape = self.shape();
        let d = *shape.last().expect("layer_norm: scalar input");
        assert!(d >= 2, "layer_norm: last axis must be >= 2, got {d}");
        assert_eq!(gain.shape(), vec![d], "layer_norm: gain shape");
        assert_eq!(bias.shape(), vec![d], "layer_norm: bias shape");
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut data = vec![0.0; x.len()];
        for r in 0..x.len() / d {
            let row = &x[r * d..(r + 1) * d];
            let (mu, var) = row_mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                data[r * d + c] = (row[c] - mu) * inv * g[c] + b[c];
            }
        }
        assert_finite(&data, "layer_norm");
        let req = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.graph.push(
            shape,
            data,
            req,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
            },
        )
    }

    /// `-log softmax(logits)[target]` for rank-1 logits.
    pub fn cross_entropy(&self, target: usize) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 1, "cross_entropy: rank-1 logits only");
        assert!(
            target < shape[0],
            "cross_entropy: target {target} out of range 0..{}",
            shape[0]
        );
        let x = self.data();
        let loss = log_sum_exp(&x) - x[target];
        assert_finite(&[loss], "cross_entropy");
        self.graph.push(
            vec![1],
            vec![loss],
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                target,
            },
        )
    }

    /// Stack `other` below `self` (rank-2, equal column counts).
    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[other.id];
        assert!(
            a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[1],
            "concat_rows: shapes {:?} and {:?}",
            a.shape,
            b.shape
        );
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        let shape = vec![a.shape[0] + b.shape[0], a.shape[1]];
        drop(inner);
        let req = self.requires_grad() || other.requires_grad();
        self.graph
            .push(shape, data, req, Op::ConcatRows(self.id, other.id))
    }

    /// Contiguous row slice of a rank-2 tensor (or element slice of rank-1).
    pub fn rows(&self, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        let (nrows, cols) = match shape.len() {
            1 => (shape[0], 1),
            2 => (shape[0], shape[1]),
            _ => panic!("rows: rank-1 or rank-2 only, got {shape:?}"),
        };
        assert!(
            start + len <= nrows,
            "rows: slice {start}..{} out of {nrows} rows",
            start + len
        );
        let x = self.data();
        let data = x[start * cols..(start + len) * cols].to_vec();
        let out_shape = if shape.len() == 1 {
            vec![len]
        } else {
            vec![len, cols]
        };
        self.graph.push(
            out_shape,
            data,
            self.requires_grad(),
            Op::SliceRows {
                x: self.id,
                start,
                len,
            },
        )
    }

    /// Contiguous column slice of a rank-2 tensor.
    pub fn cols(&self, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cols: rank-2 only");
        let (m, n) = (shape[0], shape[1]);
        assert!(
            start + len <= n,
            "cols: slice {start}..{} out of {n} columns",
            start + len
        );
        let x = self.data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        self.graph.push(
            vec![m, len],
            data,
            self.requires_grad(),
            Op::SliceCols {
                x: self.id,
                start,
                len,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape: {:?} cannot view {} elements",
            shape,
            self.numel()
        );
        self.graph.push(
            shape.to_vec(),
            self.data(),
            self.requires_grad(),
            Op::Reshape(self.id),
        )
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Tensor {
        self.graph
            .push(self.shape(), self.data(), false, Op::Detach)
    }

    /// Reverse-mode sweep from a scalar loss. Every parameter leaf reachable
    /// from it gets its gradient accumulated (added) into the `Param`.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape()
        );
        let inner = self.graph.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for idx in (0..=self.id).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(nodes, idx, &g, &mut grads);
        }
    }
}

/// `A[m×k] · B[k×n]`, plain triple loop in i-k-j order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.044715;
    const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.044715;
    const S: f64 = 0.797_884_560_802_865_4;
    let u = S * (x + C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * S * (1.0 + 3.0 * C * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Softmax along `axis` with optional keep-mask on that axis.
fn softmax_axis_raw(x: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * axis_len * inner + k * inner + i;
            let keep = |k: usize| mask.map_or(true, |m| m[k]);
            let mut mx = f64::NEG_INFINITY;
            for k in 0..axis_len {
                if keep(k) {
                    mx = mx.max(x[at(k)]);
                }
            }
            let mut z = 0.0;
            for k in 0..axis_len {
                if keep(k) {
                    let e = (x[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
            }
            for k in 0..axis_len {
                if keep(k) {
                    out[at(k)] /= z;
                }
            }
        }
    }
    out
}

fn softmax_backward_axis(
    y: &[f64],
    g: &[f64],
    shape: &[usize],
    axis: usize,
    dx: &mut [f64],
) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * axis_len * inner + k * inner + i;
            let mut dot = 0.0;
            for k in 0..axis_len {
                dot += g[at(k)] * y[at(k)];
            }
            for k in 0..axis_len {
                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn backward_op(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::ParamLeaf(p) => p.add_grad(g),
        Op::Matmul(a, b) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = nodes[*a].shape[1];
            if nodes[*a].requires_grad {
                // dA = dC . B^T
                let bt = transpose_raw(&nodes[*b].data, k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let ga = accum(grads, *a, m * k);
                for (x, d) in ga.iter_mut().zip(&da) {
                    *x += d;
                }
            }
            if nodes[*b].requires_grad {
                // dB = A^T . dC
                let at = transpose_raw(&nodes[*a].data, m, k);
                let db = matmul_raw(&at, g, k, m, n);
                let gb = accum(grads, *b, k * n);
                for (x, d) in gb.iter_mut().zip(&db) {
                    *x += d;
                }
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (node.shape[0], node.shape[1]);
            if nodes[*a].requires_grad {
                let da = transpose_raw(g, n, m);
                let ga = accum(grads, *a, m * n);
                for (x, d) in ga.iter_mut().zip(&da) {
                    *x += d;
                }
            }
        }
        Op::Add(a, b) => {
            for &src in &[*a, *b] {
                if nodes[src].requires_grad {
                    let gs = accum(grads, src, g.len());
                    for (x, d) in gs.iter_mut().zip(g) {
                        *x += d;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, g.len());
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
            if nodes[*b].requires_grad {
                let gb = accum(grads, *b, g.len());
                for (x, d) in gb.iter_mut().zip(g) {
                    *x -= d;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bd = &nodes[*b].data;
                let ga = accum(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if nodes[*b].requires_grad {
                let ad = &nodes[*a].data;
                let gb = accum(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        Op::AddRow(a, b) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, m * n);
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
            if nodes[*b].requires_grad {
                let gb = accum(grads, *b, n);
                for r in 0..m {
                    for c in 0..n {
                        gb[c] += g[r * n + c];
                    }
                }
            }
        }
        Op::ScaleConst(a, c) => {
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, g.len());
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d * c;
                }
            }
        }
        Op::AddConst(a) => {
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, g.len());
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
        }
        Op::ScaleByScalar(a, s) => {
            let sv = nodes[*s].data[0];
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, g.len());
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d * sv;
                }
            }
            if nodes[*s].requires_grad {
                let ad = &nodes[*a].data;
                let mut ds = 0.0;
                for i in 0..g.len() {
                    ds += g[i] * ad[i];
                }
                accum(grads, *s, 1)[0] += ds;
            }
        }
        Op::Gelu(a) => {
            if nodes[*a].requires_grad {
                let ad = &nodes[*a].data;
                let ga = accum(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(ad[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if nodes[*a].requires_grad {
                let y = &node.data;
                let ga = accum(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::LogClamped(a) => {
            if nodes[*a].requires_grad {
                let ad = &nodes[*a].data;
                let ga = accum(grads, *a, g.len());
                for i in 0..g.len() {
                    if ad[i] > LOG_FLOOR {
                        ga[i] += g[i] / ad[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].data.len();
                let ga = accum(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].data.len();
                let ga = accum(grads, *a, n);
                let d = g[0] / n as f64;
                for x in ga.iter_mut() {
                    *x += d;
                }
            }
        }
        Op::Softmax(a, axis) => {
            if nodes[*a].requires_grad {
                let n = node.data.len();
                let mut dx = vec![0.0; n];
                softmax_backward_axis(&node.data, g, &node.shape, *axis, &mut dx);
                let ga = accum(grads, *a, n);
                for (x, d) in ga.iter_mut().zip(&dx) {
                    *x += d;
                }
            }
        }
        Op::MaskedSoftmaxRows(a, _mask) => {
            // masked positions have y == 0, so the shared formula yields 0 there
            if nodes[*a].requires_grad {
                let n = node.data.len();
                let mut dx = vec![0.0; n];
                softmax_backward_axis(&node.data, g, &node.shape, 1, &mut dx);
                let ga = accum(grads, *a, n);
                for (x, d) in ga.iter_mut().zip(&dx) {
                    *x += d;
                }
            }
        }
        Op::LayerNorm { x, gain, bias } => {
            let d = *node.shape.last().unwrap();
            let xd = &nodes[*x].data;
            let gd = &nodes[*gain].data;
            let rows = xd.len() / d;
            let x_req = nodes[*x].requires_grad;
            let g_req = nodes[*gain].requires_grad;
            let b_req = nodes[*bias].requires_grad;
            let mut dx_all = if x_req { vec![0.0; xd.len()] } else { Vec::new() };
            let mut dgain = if g_req { vec![0.0; d] } else { Vec::new() };
            let mut dbias = if b_req { vec![0.0; d] } else { Vec::new() };
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let (mu, var) = row_mean_var(row);
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let grow = &g[r * d..(r + 1) * d];
                if g_req || b_req || x_req {
                    for c in 0..d {
                        let xhat = (row[c] - mu) * inv;
                        if g_req {
                            dgain[c] += grow[c] * xhat;
                        }
                        if b_req {
                            dbias[c] += grow[c];
                        }
                    }
                }
                if x_req {
                    // dx = inv * (dy*gain - mean(dy*gain) - xhat * mean(dy*gain*xhat))
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let dyg = grow[c] * gd[c];
                        let xhat = (row[c] - mu) * inv;
                        m1 += dyg;
                        m2 += dyg * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        let dyg = grow[c] * gd[c];
                        let xhat = (row[c] - mu) * inv;
                        dx_all[r * d + c] = inv * (dyg - m1 - xhat * m2);
                    }
                }
            }
            if x_req {
                let gx = accum(grads, *x, xd.len());
                for (x, d) in gx.iter_mut().zip(&dx_all) {
                    *x += d;
                }
            }
            if g_req {
                let gg = accum(grads, *gain, d);
                for (x, dv) in gg.iter_mut().zip(&dgain) {
                    *x += dv;
                }
            }
            if b_req {
                let gb = accum(grads, *bias, d);
                for (x, dv) in gb.iter_mut().zip(&dbias) {
                    *x += dv;
                }
            }
        }
        Op::CrossEntropy { logits, target } => {
            if nodes[*logits].requires_grad {
                let x = &nodes[*logits].data;
                let probs = softmax_axis_raw(x, &[x.len()], 0, None);
                let gl = accum(grads, *logits, x.len());
                for i in 0..x.len() {
                    let one_hot = if i == *target { 1.0 } else { 0.0 };
                    gl[i] += g[0] * (probs[i] - one_hot);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let an = nodes[*a].data.len();
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, an);
                for (x, d) in ga.iter_mut().zip(&g[..an]) {
                    *x += d;
                }
            }
            if nodes[*b].requires_grad {
                let bn = nodes[*b].data.len();
                let gb = accum(grads, *b, bn);
                for (x, d) in gb.iter_mut().zip(&g[an..]) {
                    *x += d;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for &pid in parts.iter() {
                let cols = nodes[pid].shape[1];
                if nodes[pid].requires_grad {
                    let gp = accum(grads, pid, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp[r * cols + c] += g[r * total + off + c];
                        }
                    }
                }
                off += cols;
            }
        }
        Op::SliceRows { x, start, len } => {
            if nodes[*x].requires_grad {
                let shape = &nodes[*x].shape;
                let cols = if shape.len() == 1 { 1 } else { shape[1] };
                let gx = accum(grads, *x, nodes[*x].data.len());
                for i in 0..len * cols {
                    gx[start * cols + i] += g[i];
                }
            }
        }
        Op::SliceCols { x, start, len } => {
            if nodes[*x].requires_grad {
                let n = nodes[*x].shape[1];
                let m = nodes[*x].shape[0];
                let gx = accum(grads, *x, m * n);
                for r in 0..m {
                    for c in 0..*len {
                        gx[r * n + start + c] += g[r * len + c];
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if nodes[*table].requires_grad {
                let cols = nodes[*table].shape[1];
                let gt = accum(grads, *table, nodes[*table].data.len());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if nodes[*a].requires_grad {
                let ga = accum(grads, *a, g.len());
                for (x, d) in ga.iter_mut().zip(g) {
                    *x += d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
