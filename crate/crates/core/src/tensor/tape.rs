//! Gradient tape: records forward ops, replays them in reverse.
//!
//! Ops are methods on [`Tape`]. An op's output is recorded iff the tape is
//! recording and at least one input is tracked; otherwise the op is a plain
//! computation, which is how target networks and other no-grad evaluation run
//! through the same code path.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{assert_finite, Element, Tensor, TensorError};

/// An op input: either a tracked node or captured constant data.
#[derive(Clone)]
pub(crate) enum Src<E: Element> {
    Node(usize),
    Const(Arc<Vec<E>>),
}

#[derive(Clone)]
pub(crate) enum Op<E: Element> {
    Leaf,
    MatMul {
        a: Src<E>,
        b: Src<E>,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Src<E>,
        w: Src<E>,
        batch: usize,
        cin: usize,
        h: usize,
        wid: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
    },
    AddChannelBias {
        x: Src<E>,
        b: Src<E>,
        batch: usize,
        c: usize,
        hw: usize,
    },
    AddRowBias {
        x: Src<E>,
        b: Src<E>,
        m: usize,
        n: usize,
    },
    Add {
        a: Src<E>,
        b: Src<E>,
    },
    Sub {
        a: Src<E>,
        b: Src<E>,
    },
    Mul {
        a: Src<E>,
        b: Src<E>,
    },
    MinElem {
        a: Src<E>,
        b: Src<E>,
    },
    AddScalar {
        x: Src<E>,
    },
    MulScalar {
        x: Src<E>,
        c: E,
    },
    Relu {
        x: Src<E>,
    },
    Tanh {
        x: Src<E>,
    },
    Exp {
        x: Src<E>,
    },
    Log {
        x: Src<E>,
    },
    Square {
        x: Src<E>,
    },
    Softplus {
        x: Src<E>,
    },
    Clamp {
        x: Src<E>,
        lo: E,
        hi: E,
    },
    Softmax {
        x: Src<E>,
        rows: usize,
        n: usize,
    },
    LogSoftmax {
        x: Src<E>,
        rows: usize,
        n: usize,
    },
    SumAll {
        x: Src<E>,
    },
    MeanAll {
        x: Src<E>,
    },
    SumLast {
        x: Src<E>,
        rows: usize,
        n: usize,
    },
    GatherChunks {
        x: Src<E>,
        idx: Arc<Vec<usize>>,
        chunk: usize,
    },
    ConcatCols {
        a: Src<E>,
        b: Src<E>,
        m: usize,
        na: usize,
        nb: usize,
    },
    RepeatRows {
        x: Src<E>,
        m: usize,
        n: usize,
        times: usize,
    },
    MeanOverGroups {
        x: Src<E>,
        rows: usize,
        groups: usize,
        chunk: usize,
    },
    RepeatGroups {
        x: Src<E>,
        rows: usize,
        groups: usize,
        chunk: usize,
    },
    Pad2d {
        x: Src<E>,
        planes: usize,
        h: usize,
        w: usize,
        pad: usize,
    },
    Slice2d {
        x: Src<E>,
        planes: usize,
        h: usize,
        w: usize,
        oy: usize,
        ox: usize,
        oh: usize,
        ow: usize,
    },
    LayerNorm {
        x: Src<E>,
        gamma: Src<E>,
        beta: Src<E>,
        rows: usize,
        n: usize,
        eps: E,
    },
}

pub(crate) struct Node<E: Element> {
    pub op: Op<E>,
    pub out: Arc<Vec<E>>,
}

/// Gradients produced by one backward pass, addressable by tape node or by
/// parameter id.
pub struct Grads<E: Element> {
    by_node: Vec<Option<Vec<E>>>,
    params: HashMap<u64, usize>,
}

impl<E: Element> Grads<E> {
    pub fn tensor_grad(&self, t: &Tensor<E>) -> Option<&[E]> {
        t.node
            .and_then(|id| self.by_node.get(id))
            .and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, param_id: u64) -> Option<&[E]> {
        self.params
            .get(&param_id)
            .and_then(|&id| self.by_node[id].as_deref())
    }

    pub fn has_param(&self, param_id: u64) -> bool {
        self.params.contains_key(&param_id)
    }
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    recording: bool,
    consumed: bool,
    param_leaves: HashMap<u64, usize>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    /// A recording tape for one forward/backward cycle.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            param_leaves: HashMap::new(),
        }
    }

    /// A non-recording tape: same ops, no gradient bookkeeping.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an arbitrary tensor as a differentiable leaf.
    pub fn var(&mut self, t: &Tensor<E>) -> Tensor<E> {
        if !self.recording {
            return t.detach();
        }
        let id = self.push(Op::Leaf, t.data_arc());
        Tensor::with_node(t.shape().to_vec(), t.data_arc(), Some(id))
    }

    /// Register a named parameter as a leaf. Repeated registration of the
    /// same parameter returns the same node so gradients accumulate.
    pub(crate) fn param_leaf(&mut self, param_id: u64, value: &Tensor<E>) -> Tensor<E> {
        if !self.recording {
            return value.detach();
        }
        if let Some(&id) = self.param_leaves.get(&param_id) {
            return Tensor::with_node(value.shape().to_vec(), value.data_arc(), Some(id));
        }
        let id = self.push(Op::Leaf, value.data_arc());
        self.param_leaves.insert(param_id, id);
        Tensor::with_node(value.shape().to_vec(), value.data_arc(), Some(id))
    }

    fn push(&mut self, op: Op<E>, out: Arc<Vec<E>>) -> usize {
        self.nodes.push(Node { op, out });
        self.nodes.len() - 1
    }

    fn src(&self, t: &Tensor<E>) -> Src<E> {
        match t.node {
            Some(id) => Src::Node(id),
            None => Src::Const(t.data_arc()),
        }
    }

    fn tracked(&self, inputs: &[&Tensor<E>]) -> bool {
        self.recording && inputs.iter().any(|t| t.node.is_some())
    }

    fn emit(
        &mut self,
        op: Op<E>,
        data: Vec<E>,
        shape: Vec<usize>,
        inputs: &[&Tensor<E>],
        name: &'static str,
    ) -> Tensor<E> {
        assert_finite(&data, name);
        let arc = Arc::new(data);
        let node = if self.tracked(inputs) {
            Some(self.push(op, Arc::clone(&arc)))
        } else {
            None
        };
        Tensor::with_node(shape, arc, node)
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            s => {
                return Err(TensorError::BadShape {
                    op: "matmul",
                    shape: s.to_vec(),
                    reason: "lhs must be 2-d".into(),
                })
            }
        };
        let (k2, n) = match b.shape() {
            [k2, n] => (*k2, *n),
            s => {
                return Err(TensorError::BadShape {
                    op: "matmul",
                    shape: s.to_vec(),
                    reason: "rhs must be 2-d".into(),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        let op = Op::MatMul {
            a: self.src(a),
            b: self.src(b),
            m,
            k,
            n,
        };
        Ok(self.emit(op, out, vec![m, n], &[a, b], "matmul"))
    }

    /// 2-d convolution, NCHW, square stride/padding, no dilation.
    pub fn conv2d(
        &mut self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let (batch, cin, h, wid) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::BadShape {
                    op: "conv2d",
                    shape: s.to_vec(),
                    reason: "input must be NCHW".into(),
                })
            }
        };
        let (cout, cin2, kh, kw) = match w.shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            s => {
                return Err(TensorError::BadShape {
                    op: "conv2d",
                    shape: s.to_vec(),
                    reason: "kernel must be OIHW".into(),
                })
            }
        };
        if cin != cin2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let oh = kernels::conv_out_size(h, kh, stride, pad).ok_or(TensorError::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
        })?;
        let ow = kernels::conv_out_size(wid, kw, stride, pad).ok_or(TensorError::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit"),
        })?;

        let ck = cin * kh * kw;
        let l = oh * ow;
        let mut out = vec![E::zero(); batch * cout * l];
        let mut cols = vec![E::zero(); ck * l];
        for b in 0..batch {
            let xb = &x.data()[b * cin * h * wid..(b + 1) * cin * h * wid];
            kernels::im2col(xb, &mut cols, cin, h, wid, kh, kw, stride, pad, oh, ow);
            let yb = &mut out[b * cout * l..(b + 1) * cout * l];
            kernels::matmul_acc(w.data(), &cols, yb, cout, ck, l);
        }
        let op = Op::Conv2d {
            x: self.src(x),
            w: self.src(w),
            batch,
            cin,
            h,
            wid,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        Ok(self.emit(op, out, vec![batch, cout, oh, ow], &[x, w], "conv2d"))
    }

    pub fn add_channel_bias(
        &mut self,
        x: &Tensor<E>,
        b: &Tensor<E>,
    ) -> Result<Tensor<E>, TensorError> {
        let (batch, c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => {
                return Err(TensorError::BadShape {
                    op: "add_channel_bias",
                    shape: s.to_vec(),
                    reason: "input must be NCHW".into(),
                })
            }
        };
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for bi in 0..batch {
            for ci in 0..c {
                let bias = b.data()[ci];
                let plane = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for v in plane.iter_mut() {
                    *v = *v + bias;
                }
            }
        }
        let op = Op::AddChannelBias {
            x: self.src(x),
            b: self.src(b),
            batch,
            c,
            hw,
        };
        Ok(self.emit(op, out, x.shape().to_vec(), &[x, b], "add_channel_bias"))
    }

    pub fn add_row_bias(&mut self, x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (m, n) = match x.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::BadShape {
                    op: "add_row_bias",
                    shape: s.to_vec(),
                    reason: "input must be 2-d".into(),
                })
            }
        };
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        let op = Op::AddRowBias {
            x: self.src(x),
            b: self.src(b),
            m,
            n,
        };
        Ok(self.emit(op, out, x.shape().to_vec(), &[x, b], "add_row_bias"))
    }

    fn elementwise_pair(
        &mut self,
        a: &Tensor<E>,
        b: &Tensor<E>,
        name: &'static str,
    ) -> Result<(), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.elementwise_pair(a, b, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let op = Op::Add {
            a: self.src(a),
            b: self.src(b),
        };
        Ok(self.emit(op, out, a.shape().to_vec(), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.elementwise_pair(a, b, "sub")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let op = Op::Sub {
            a: self.src(a),
            b: self.src(b),
        };
        Ok(self.emit(op, out, a.shape().to_vec(), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.elementwise_pair(a, b, "mul")?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let op = Op::Mul {
            a: self.src(a),
            b: self.src(b),
        };
        Ok(self.emit(op, out, a.shape().to_vec(), &[a, b], "mul"))
    }

    /// Elementwise minimum. Gradient routes to the smaller input; on ties the
    /// first input wins.
    pub fn min_elementwise(
        &mut self,
        a: &Tensor<E>,
        b: &Tensor<E>,
    ) -> Result<Tensor<E>, TensorError> {
        self.elementwise_pair(a, b, "min_elementwise")?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let op = Op::MinElem {
            a: self.src(a),
            b: self.src(b),
        };
        Ok(self.emit(op, out, a.shape().to_vec(), &[a, b], "min_elementwise"))
    }

    pub fn add_scalar(&mut self, x: &Tensor<E>, c: E) -> Tensor<E> {
        let out = x.data().iter().map(|&v| v + c).collect();
        let op = Op::AddScalar { x: self.src(x) };
        self.emit(op, out, x.shape().to_vec(), &[x], "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: &Tensor<E>, c: E) -> Tensor<E> {
        let out = x.data().iter().map(|&v| v * c).collect();
        let op = Op::MulScalar { x: self.src(x), c };
        self.emit(op, out, x.shape().to_vec(), &[x], "mul_scalar")
    }

    fn unary(
        &mut self,
        x: &Tensor<E>,
        f: impl Fn(E) -> E,
        op: impl FnOnce(Src<E>) -> Op<E>,
        name: &'static str,
    ) -> Tensor<E> {
        let out = x.data().iter().map(|&v| f(v)).collect();
        let op = op(self.src(x));
        self.emit(op, out, x.shape().to_vec(), &[x], name)
    }

    pub fn relu(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(
            x,
            |v| if v > E::zero() { v } else { E::zero() },
            |x| Op::Relu { x },
            "relu",
        )
    }

    pub fn tanh(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, |v| v.tanh(), |x| Op::Tanh { x }, "tanh")
    }

    pub fn exp(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, |v| v.exp(), |x| Op::Exp { x }, "exp")
    }

    pub fn log(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, |v| v.ln(), |x| Op::Log { x }, "log")
    }

    pub fn square(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, |v| v * v, |x| Op::Square { x }, "square")
    }

    pub fn softplus(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.unary(x, kernels::softplus, |x| Op::Softplus { x }, "softplus")
    }

    pub fn clamp(&mut self, x: &Tensor<E>, lo: E, hi: E) -> Tensor<E> {
        self.unary(
            x,
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            |x| Op::Clamp { x, lo, hi },
            "clamp",
        )
    }

    fn last_dim(&self, x: &Tensor<E>, name: &'static str) -> Result<(usize, usize), TensorError> {
        match x.shape().split_last() {
            Some((&n, rest)) if n > 0 => Ok((rest.iter().product::<usize>().max(1), n)),
            _ => Err(TensorError::BadShape {
                op: name,
                shape: x.shape().to_vec(),
                reason: "needs a non-empty last dimension".into(),
            }),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (rows, n) = self.last_dim(x, "softmax")?;
        let mut out = vec![E::zero(); x.numel()];
        kernels::softmax_rows(x.data(), &mut out, rows, n);
        let op = Op::Softmax {
            x: self.src(x),
            rows,
            n,
        };
        Ok(self.emit(op, out, x.shape().to_vec(), &[x], "softmax"))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (rows, n) = self.last_dim(x, "log_softmax")?;
        let mut out = vec![E::zero(); x.numel()];
        kernels::log_softmax_rows(x.data(), &mut out, rows, n);
        let op = Op::LogSoftmax {
            x: self.src(x),
            rows,
            n,
        };
        Ok(self.emit(op, out, x.shape().to_vec(), &[x], "log_softmax"))
    }

    pub fn sum_all(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let mut s = E::zero();
        for &v in x.data() {
            s = s + v;
        }
        let op = Op::SumAll { x: self.src(x) };
        self.emit(op, vec![s], vec![1], &[x], "sum_all")
    }

    pub fn mean_all(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let mut s = E::zero();
        for &v in x.data() {
            s = s + v;
        }
        let n = E::of_f64(x.numel() as f64);
        let op = Op::MeanAll { x: self.src(x) };
        self.emit(op, vec![s / n], vec![1], &[x], "mean_all")
    }

    /// Sum over the last dimension: [.., n] -> [..].
    pub fn sum_last(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (rows, n) = self.last_dim(x, "sum_last")?;
        let mut out = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mut s = E::zero();
            for &v in row {
                s = s + v;
            }
            out[r] = s;
        }
        let shape: Vec<usize> = if x.shape().len() <= 1 {
            vec![1]
        } else {
            x.shape()[..x.shape().len() - 1].to_vec()
        };
        let op = Op::SumLast {
            x: self.src(x),
            rows,
            n,
        };
        Ok(self.emit(op, out, shape, &[x], "sum_last"))
    }

    /// Per-row chunk selection: x viewed as [rows, groups*chunk], output row r
    /// is the idx[r]-th chunk of row r. chunk == 1 gathers scalars.
    pub fn gather_chunks(
        &mut self,
        x: &Tensor<E>,
        idx: &[usize],
        chunk: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let (rows, w) = self.last_dim(x, "gather_chunks")?;
        if rows != idx.len() || chunk == 0 || w % chunk != 0 {
            return Err(TensorError::BadShape {
                op: "gather_chunks",
                shape: x.shape().to_vec(),
                reason: format!("rows {rows}, idx len {}, chunk {chunk}", idx.len()),
            });
        }
        let groups = w / chunk;
        let mut out = vec![E::zero(); rows * chunk];
        for (r, &a) in idx.iter().enumerate() {
            if a >= groups {
                return Err(TensorError::BadShape {
                    op: "gather_chunks",
                    shape: x.shape().to_vec(),
                    reason: format!("index {a} out of {groups} groups"),
                });
            }
            let src = &x.data()[r * w + a * chunk..r * w + (a + 1) * chunk];
            out[r * chunk..(r + 1) * chunk].copy_from_slice(src);
        }
        let op = Op::GatherChunks {
            x: self.src(x),
            idx: Arc::new(idx.to_vec()),
            chunk,
        };
        Ok(self.emit(op, out, vec![rows, chunk], &[x], "gather_chunks"))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (m, na) = match a.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::BadShape {
                    op: "concat_cols",
                    shape: s.to_vec(),
                    reason: "lhs must be 2-d".into(),
                })
            }
        };
        let (m2, nb) = match b.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::BadShape {
                    op: "concat_cols",
                    shape: s.to_vec(),
                    reason: "rhs must be 2-d".into(),
                })
            }
        };
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let n = na + nb;
        let mut out = vec![E::zero(); m * n];
        for r in 0..m {
            out[r * n..r * n + na].copy_from_slice(&a.data()[r * na..(r + 1) * na]);
            out[r * n + na..(r + 1) * n].copy_from_slice(&b.data()[r * nb..(r + 1) * nb]);
        }
        let op = Op::ConcatCols {
            a: self.src(a),
            b: self.src(b),
            m,
            na,
            nb,
        };
        Ok(self.emit(op, out, vec![m, n], &[a, b], "concat_cols"))
    }

    /// Repeat each row `times` times consecutively: [m, n] -> [m*times, n].
    pub fn repeat_rows(&mut self, x: &Tensor<E>, times: usize) -> Result<Tensor<E>, TensorError> {
        let (m, n) = match x.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::BadShape {
                    op: "repeat_rows",
                    shape: s.to_vec(),
                    reason: "input must be 2-d".into(),
                })
            }
        };
        let mut out = vec![E::zero(); m * times * n];
        for r in 0..m {
            let src = &x.data()[r * n..(r + 1) * n];
            for t in 0..times {
                out[(r * times + t) * n..(r * times + t + 1) * n].copy_from_slice(src);
            }
        }
        let op = Op::RepeatRows {
            x: self.src(x),
            m,
            n,
            times,
        };
        Ok(self.emit(op, out, vec![m * times, n], &[x], "repeat_rows"))
    }

    /// Mean across groups: x viewed as [rows, groups*chunk] -> [rows, chunk].
    pub fn mean_over_groups(
        &mut self,
        x: &Tensor<E>,
        groups: usize,
        chunk: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let (rows, w) = self.last_dim(x, "mean_over_groups")?;
        if w != groups * chunk {
            return Err(TensorError::BadShape {
                op: "mean_over_groups",
                shape: x.shape().to_vec(),
                reason: format!("last dim {w} != groups {groups} * chunk {chunk}"),
            });
        }
        let inv = E::one() / E::of_f64(groups as f64);
        let mut out = vec![E::zero(); rows * chunk];
        for r in 0..rows {
            for g in 0..groups {
                let src = &x.data()[r * w + g * chunk..r * w + (g + 1) * chunk];
                let dst = &mut out[r * chunk..(r + 1) * chunk];
                for j in 0..chunk {
                    dst[j] = dst[j] + src[j];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let op = Op::MeanOverGroups {
            x: self.src(x),
            rows,
            groups,
            chunk,
        };
        Ok(self.emit(op, out, vec![rows, chunk], &[x], "mean_over_groups"))
    }

    /// Repeat the chunk across groups: [rows, chunk] -> [rows, groups*chunk].
    pub fn repeat_groups(
        &mut self,
        x: &Tensor<E>,
        groups: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let (rows, chunk) = self.last_dim(x, "repeat_groups")?;
        let mut out = vec![E::zero(); rows * groups * chunk];
        for r in 0..rows {
            let src = &x.data()[r * chunk..(r + 1) * chunk];
            for g in 0..groups {
                out[(r * groups + g) * chunk..(r * groups + g + 1) * chunk].copy_from_slice(src);
            }
        }
        let op = Op::RepeatGroups {
            x: self.src(x),
            rows,
            groups,
            chunk,
        };
        Ok(self.emit(op, out, vec![rows, groups * chunk], &[x], "repeat_groups"))
    }

    /// Zero-pad the two trailing spatial dims of [.., h, w] by `pad`.
    pub fn pad2d(&mut self, x: &Tensor<E>, pad: usize) -> Result<Tensor<E>, TensorError> {
        let dims = x.shape();
        if dims.len() < 2 {
            return Err(TensorError::BadShape {
                op: "pad2d",
                shape: dims.to_vec(),
                reason: "needs at least 2 dims".into(),
            });
        }
        let h = dims[dims.len() - 2];
        let w = dims[dims.len() - 1];
        let planes = x.numel() / (h * w);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![E::zero(); planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let src = &x.data()[p * h * w + y * w..p * h * w + (y + 1) * w];
                let base = p * ph * pw + (y + pad) * pw + pad;
                out[base..base + w].copy_from_slice(src);
            }
        }
        let mut shape = dims.to_vec();
        let len = shape.len();
        shape[len - 2] = ph;
        shape[len - 1] = pw;
        let op = Op::Pad2d {
            x: self.src(x),
            planes,
            h,
            w,
            pad,
        };
        Ok(self.emit(op, out, shape, &[x], "pad2d"))
    }

    /// Crop a window from the two trailing spatial dims.
    pub fn slice2d(
        &mut self,
        x: &Tensor<E>,
        oy: usize,
        ox: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let dims = x.shape();
        if dims.len() < 2 {
            return Err(TensorError::BadShape {
                op: "slice2d",
                shape: dims.to_vec(),
                reason: "needs at least 2 dims".into(),
            });
        }
        let h = dims[dims.len() - 2];
        let w = dims[dims.len() - 1];
        if oy + oh > h || ox + ow > w {
            return Err(TensorError::BadShape {
                op: "slice2d",
                shape: dims.to_vec(),
                reason: format!("window {oy},{ox} {oh}x{ow} exceeds {h}x{w}"),
            });
        }
        let planes = x.numel() / (h * w);
        let mut out = vec![E::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                let src = &x.data()[p * h * w + (y + oy) * w + ox..p * h * w + (y + oy) * w + ox + ow];
                out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow].copy_from_slice(src);
            }
        }
        let mut shape = dims.to_vec();
        let len = shape.len();
        shape[len - 2] = oh;
        shape[len - 1] = ow;
        let op = Op::Slice2d {
            x: self.src(x),
            planes,
            h,
            w,
            oy,
            ox,
            oh,
            ow,
        };
        Ok(self.emit(op, out, shape, &[x], "slice2d"))
    }

    /// Layer normalization over the last dimension with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>, TensorError> {
        let (rows, n) = self.last_dim(x, "layer_norm")?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); x.numel()];
        let ninv = E::one() / E::of_f64(n as f64);
        for r in 0..rows {
            let xi = &x.data()[r * n..(r + 1) * n];
            let oi = &mut out[r * n..(r + 1) * n];
            let mut mean = E::zero();
            for &v in xi {
                mean = mean + v;
            }
            mean = mean * ninv;
            let mut var = E::zero();
            for &v in xi {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * ninv;
            let inv = E::one() / (var + eps).sqrt();
            for j in 0..n {
                oi[j] = (xi[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x: self.src(x),
            gamma: self.src(gamma),
            beta: self.src(beta),
            rows,
            n,
            eps,
        };
        Ok(self.emit(op, out, x.shape().to_vec(), &[x, gamma, beta], "layer_norm"))
    }

    // ---- backward ----

    /// Run one reverse pass from a scalar loss. Consumes the tape's ability
    /// to run further backward passes.
    pub fn backward(&mut self, loss: &Tensor<E>) -> Result<Grads<E>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        self.consumed = true;
        let mut by_node: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        let Some(seed) = loss.node else {
            // Loss does not depend on anything tracked; nothing to do.
            return Ok(Grads {
                by_node,
                params: self.param_leaves.clone(),
            });
        };
        by_node[seed] = Some(vec![E::one()]);
        for id in (0..=seed).rev() {
            let Some(g) = by_node[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                by_node[id] = Some(g);
                continue;
            }
            backprop_node(&self.nodes, id, &g, &mut by_node);
        }
        Ok(Grads {
            by_node,
            params: self.param_leaves.clone(),
        })
    }
}

fn src_data<'a, E: Element>(nodes: &'a [Node<E>], src: &'a Src<E>) -> &'a [E] {
    match src {
        Src::Node(id) => &nodes[*id].out,
        Src::Const(data) => data,
    }
}

fn accumulate<E: Element>(
    by_node: &mut [Option<Vec<E>>],
    src: &Src<E>,
    len: usize,
    add: impl FnOnce(&mut [E]),
) {
    if let Src::Node(id) = src {
        let slot = by_node[*id].get_or_insert_with(|| vec![E::zero(); len]);
        add(slot);
    }
}

#[allow(clippy::needless_range_loop)]
fn backprop_node<E: Element>(
    nodes: &[Node<E>],
    id: usize,
    g: &[E],
    by_node: &mut [Option<Vec<E>>],
) {
    let out = &nodes[id].out;
    match &nodes[id].op {
        Op::Leaf => unreachable!("leaves keep their gradient"),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let adata = src_data(nodes, a);
            let bdata = src_data(nodes, b);
            accumulate(by_node, a, m * k, |da| {
                kernels::matmul_nt_acc(g, bdata, da, m, n, k);
            });
            accumulate(by_node, b, k * n, |db| {
                kernels::matmul_tn_acc(adata, g, db, k, m, n);
            });
        }
        Op::Conv2d {
            x,
            w,
            batch,
            cin,
            h,
            wid,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        } => {
            let (batch, cin, h, wid) = (*batch, *cin, *h, *wid);
            let (cout, kh, kw, stride, pad, oh, ow) = (*cout, *kh, *kw, *stride, *pad, *oh, *ow);
            let ck = cin * kh * kw;
            let l = oh * ow;
            let xdata = src_data(nodes, x);
            let wdata = src_data(nodes, w);
            let mut cols = vec![E::zero(); ck * l];
            let mut dcols = vec![E::zero(); ck * l];
            let want_dx = matches!(x, Src::Node(_));
            let want_dw = matches!(w, Src::Node(_));
            let mut dxbuf = if want_dx {
                vec![E::zero(); batch * cin * h * wid]
            } else {
                Vec::new()
            };
            let mut dwbuf = if want_dw {
                vec![E::zero(); cout * ck]
            } else {
                Vec::new()
            };
            for bi in 0..batch {
                let gb = &g[bi * cout * l..(bi + 1) * cout * l];
                if want_dw {
                    let xb = &xdata[bi * cin * h * wid..(bi + 1) * cin * h * wid];
                    kernels::im2col(xb, &mut cols, cin, h, wid, kh, kw, stride, pad, oh, ow);
                    kernels::matmul_nt_acc(gb, &cols, &mut dwbuf, cout, l, ck);
                }
                if want_dx {
                    for v in dcols.iter_mut() {
                        *v = E::zero();
                    }
                    kernels::matmul_tn_acc(wdata, gb, &mut dcols, ck, cout, l);
                    let dxb = &mut dxbuf[bi * cin * h * wid..(bi + 1) * cin * h * wid];
                    kernels::col2im_acc(&dcols, dxb, cin, h, wid, kh, kw, stride, pad, oh, ow);
                }
            }
            if want_dx {
                accumulate(by_node, x, batch * cin * h * wid, |dx| {
                    for (d, v) in dx.iter_mut().zip(&dxbuf) {
                        *d = *d + *v;
                    }
                });
            }
            if want_dw {
                accumulate(by_node, w, cout * ck, |dw| {
                    for (d, v) in dw.iter_mut().zip(&dwbuf) {
                        *d = *d + *v;
                    }
                });
            }
        }
        Op::AddChannelBias { x, b, batch, c, hw } => {
            let (batch, c, hw) = (*batch, *c, *hw);
            accumulate(by_node, x, g.len(), |dx| {
                for (d, v) in dx.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
            accumulate(by_node, b, c, |db| {
                for bi in 0..batch {
                    for ci in 0..c {
                        let plane = &g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        let mut s = E::zero();
                        for &v in plane {
                            s = s + v;
                        }
                        db[ci] = db[ci] + s;
                    }
                }
            });
        }
        Op::AddRowBias { x, b, m, n } => {
            let (m, n) = (*m, *n);
            accumulate(by_node, x, g.len(), |dx| {
                for (d, v) in dx.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
            accumulate(by_node, b, n, |db| {
                for r in 0..m {
                    let row = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        db[j] = db[j] + row[j];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(by_node, a, g.len(), |da| {
                for (d, v) in da.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
            accumulate(by_node, b, g.len(), |db| {
                for (d, v) in db.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(by_node, a, g.len(), |da| {
                for (d, v) in da.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
            accumulate(by_node, b, g.len(), |db| {
                for (d, v) in db.iter_mut().zip(g) {
                    *d = *d - *v;
                }
            });
        }
        Op::Mul { a, b } => {
            let adata = src_data(nodes, a);
            let bdata = src_data(nodes, b);
            accumulate(by_node, a, g.len(), |da| {
                for i in 0..g.len() {
                    da[i] = da[i] + g[i] * bdata[i];
                }
            });
            accumulate(by_node, b, g.len(), |db| {
                for i in 0..g.len() {
                    db[i] = db[i] + g[i] * adata[i];
                }
            });
        }
        Op::MinElem { a, b } => {
            let adata = src_data(nodes, a);
            let bdata = src_data(nodes, b);
            accumulate(by_node, a, g.len(), |da| {
                for i in 0..g.len() {
                    if adata[i] <= bdata[i] {
                        da[i] = da[i] + g[i];
                    }
                }
            });
            accumulate(by_node, b, g.len(), |db| {
                for i in 0..g.len() {
                    if !(adata[i] <= bdata[i]) {
                        db[i] = db[i] + g[i];
                    }
                }
            });
        }
        Op::AddScalar { x } => {
            accumulate(by_node, x, g.len(), |dx| {
                for (d, v) in dx.iter_mut().zip(g) {
                    *d = *d + *v;
                }
            });
        }
        Op::MulScalar { x, c } => {
            let c = *c;
            accumulate(by_node, x, g.len(), |dx| {
                for (d, v) in dx.iter_mut().zip(g) {
                    *d = *d + *v * c;
                }
            });
        }
        Op::Relu { x } => {
            let xdata = src_data(nodes, x);
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    if xdata[i] > E::zero() {
                        dx[i] = dx[i] + g[i];
                    }
                }
            });
        }
        Op::Tanh { x } => {
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    let y = out[i];
                    dx[i] = dx[i] + g[i] * (E::one() - y * y);
                }
            });
        }
        Op::Exp { x } => {
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * out[i];
                }
            });
        }
        Op::Log { x } => {
            let xdata = src_data(nodes, x);
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] / xdata[i];
                }
            });
        }
        Op::Square { x } => {
            let xdata = src_data(nodes, x);
            let two = E::of_f64(2.0);
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * two * xdata[i];
                }
            });
        }
        Op::Softplus { x } => {
            let xdata = src_data(nodes, x);
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    let sig = E::one() / (E::one() + (-xdata[i]).exp());
                    dx[i] = dx[i] + g[i] * sig;
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xdata = src_data(nodes, x);
            let (lo, hi) = (*lo, *hi);
            accumulate(by_node, x, g.len(), |dx| {
                for i in 0..g.len() {
                    if xdata[i] >= lo && xdata[i] <= hi {
                        dx[i] = dx[i] + g[i];
                    }
                }
            });
        }
        Op::Softmax { x, rows, n } => {
            let (rows, n) = (*rows, *n);
            accumulate(by_node, x, rows * n, |dx| {
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot = dot + gr[j] * y[j];
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = dr[j] + y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { x, rows, n } => {
            let (rows, n) = (*rows, *n);
            accumulate(by_node, x, rows * n, |dx| {
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut gsum = E::zero();
                    for &v in gr {
                        gsum = gsum + v;
                    }
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = dr[j] + gr[j] - y[j].exp() * gsum;
                    }
                }
            });
        }
        Op::SumAll { x } => {
            let len = match x {
                Src::Node(nid) => nodes[*nid].out.len(),
                Src::Const(d) => d.len(),
            };
            accumulate(by_node, x, len, |dx| {
                for d in dx.iter_mut() {
                    *d = *d + g[0];
                }
            });
        }
        Op::MeanAll { x } => {
            let len = match x {
                Src::Node(nid) => nodes[*nid].out.len(),
                Src::Const(d) => d.len(),
            };
            let scale = g[0] / E::of_f64(len as f64);
            accumulate(by_node, x, len, |dx| {
                for d in dx.iter_mut() {
                    *d = *d + scale;
                }
            });
        }
        Op::SumLast { x, rows, n } => {
            let (rows, n) = (*rows, *n);
            accumulate(by_node, x, rows * n, |dx| {
                for r in 0..rows {
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = dr[j] + g[r];
                    }
                }
            });
        }
        Op::GatherChunks { x, idx, chunk } => {
            let chunk = *chunk;
            let w = match x {
                Src::Node(nid) => nodes[*nid].out.len() / idx.len(),
                Src::Const(d) => d.len() / idx.len(),
            };
            accumulate(by_node, x, idx.len() * w, |dx| {
                for (r, &a) in idx.iter().enumerate() {
                    let dst = &mut dx[r * w + a * chunk..r * w + (a + 1) * chunk];
                    let src = &g[r * chunk..(r + 1) * chunk];
                    for j in 0..chunk {
                        dst[j] = dst[j] + src[j];
                    }
                }
            });
        }
        Op::ConcatCols { a, b, m, na, nb } => {
            let (m, na, nb) = (*m, *na, *nb);
            let n = na + nb;
            accumulate(by_node, a, m * na, |da| {
                for r in 0..m {
                    for j in 0..na {
                        da[r * na + j] = da[r * na + j] + g[r * n + j];
                    }
                }
            });
            accumulate(by_node, b, m * nb, |db| {
                for r in 0..m {
                    for j in 0..nb {
                        db[r * nb + j] = db[r * nb + j] + g[r * n + na + j];
                    }
                }
            });
        }
        Op::RepeatRows { x, m, n, times } => {
            let (m, n, times) = (*m, *n, *times);
            accumulate(by_node, x, m * n, |dx| {
                for r in 0..m {
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for t in 0..times {
                        let gr = &g[(r * times + t) * n..(r * times + t + 1) * n];
                        for j in 0..n {
                            dr[j] = dr[j] + gr[j];
                        }
                    }
                }
            });
        }
        Op::MeanOverGroups {
            x,
            rows,
            groups,
            chunk,
        } => {
            let (rows, groups, chunk) = (*rows, *groups, *chunk);
            let w = groups * chunk;
            let inv = E::one() / E::of_f64(groups as f64);
            accumulate(by_node, x, rows * w, |dx| {
                for r in 0..rows {
                    let gr = &g[r * chunk..(r + 1) * chunk];
                    for gi in 0..groups {
                        let dst = &mut dx[r * w + gi * chunk..r * w + (gi + 1) * chunk];
                        for j in 0..chunk {
                            dst[j] = dst[j] + gr[j] * inv;
                        }
                    }
                }
            });
        }
        Op::RepeatGroups {
            x,
            rows,
            groups,
            chunk,
        } => {
            let (rows, groups, chunk) = (*rows, *groups, *chunk);
            let w = groups * chunk;
            accumulate(by_node, x, rows * chunk, |dx| {
                for r in 0..rows {
                    let dr = &mut dx[r * chunk..(r + 1) * chunk];
                    for gi in 0..groups {
                        let gr = &g[r * w + gi * chunk..r * w + (gi + 1) * chunk];
                        for j in 0..chunk {
                            dr[j] = dr[j] + gr[j];
                        }
                    }
                }
            });
        }
        Op::Pad2d { x, planes, h, w, pad } => {
            let (planes, h, w, pad) = (*planes, *h, *w, *pad);
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            accumulate(by_node, x, planes * h * w, |dx| {
                for p in 0..planes {
                    for y in 0..h {
                        let gbase = p * ph * pw + (y + pad) * pw + pad;
                        let dbase = p * h * w + y * w;
                        for xj in 0..w {
                            dx[dbase + xj] = dx[dbase + xj] + g[gbase + xj];
                        }
                    }
                }
            });
        }
        Op::Slice2d {
            x,
            planes,
            h,
            w,
            oy,
            ox,
            oh,
            ow,
        } => {
            let (planes, h, w, oy, ox, oh, ow) = (*planes, *h, *w, *oy, *ox, *oh, *ow);
            accumulate(by_node, x, planes * h * w, |dx| {
                for p in 0..planes {
                    for y in 0..oh {
                        let dbase = p * h * w + (y + oy) * w + ox;
                        let gbase = p * oh * ow + y * ow;
                        for xj in 0..ow {
                            dx[dbase + xj] = dx[dbase + xj] + g[gbase + xj];
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            rows,
            n,
            eps,
        } => {
            let (rows, n, eps) = (*rows, *n, *eps);
            let xdata = src_data(nodes, x);
            let gdata = src_data(nodes, gamma);
            let ninv = E::one() / E::of_f64(n as f64);
            // Recompute per-row statistics; cheaper than caching for the
            // small latent widths this engine targets.
            let mut stats = vec![(E::zero(), E::zero()); rows];
            for r in 0..rows {
                let xi = &xdata[r * n..(r + 1) * n];
                let mut mean = E::zero();
                for &v in xi {
                    mean = mean + v;
                }
                mean = mean * ninv;
                let mut var = E::zero();
                for &v in xi {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * ninv;
                stats[r] = (mean, E::one() / (var + eps).sqrt());
            }
            accumulate(by_node, gamma, n, |dg| {
                for r in 0..rows {
                    let (mean, inv) = stats[r];
                    let xi = &xdata[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        dg[j] = dg[j] + gr[j] * (xi[j] - mean) * inv;
                    }
                }
            });
            accumulate(by_node, beta, n, |db| {
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        db[j] = db[j] + gr[j];
                    }
                }
            });
            accumulate(by_node, x, rows * n, |dx| {
                for r in 0..rows {
                    let (mean, inv) = stats[r];
                    let xi = &xdata[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dxhat_mean = E::zero();
                    let mut dxhat_xhat_mean = E::zero();
                    for j in 0..n {
                        let xhat = (xi[j] - mean) * inv;
                        let dxh = gr[j] * gdata[j];
                        dxhat_mean = dxhat_mean + dxh;
                        dxhat_xhat_mean = dxhat_xhat_mean + dxh * xhat;
                    }
                    dxhat_mean = dxhat_mean * ninv;
                    dxhat_xhat_mean = dxhat_xhat_mean * ninv;
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xi[j] - mean) * inv;
                        let dxh = gr[j] * gdata[j];
                        dr[j] = dr[j] + inv * (dxh - dxhat_mean - xhat * dxhat_xhat_mean);
                    }
                }
            });
        }
    }
}
