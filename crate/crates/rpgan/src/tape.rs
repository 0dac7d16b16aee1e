//! Single-threaded reverse-mode tape.
//!
//! Operations append value nodes and, when any input participates in
//! differentiation, a record that the backward pass replays in reverse.
//! Values are immutable once pushed; a tape lives for one training step.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{Real, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

struct Node<T: Real> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
    leaf: bool,
}

#[derive(Clone)]
enum Op<T: Real> {
    MatMul {
        a: VarId,
        b: VarId,
        out: VarId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: VarId,
        b: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
    },
    AddChannelBias {
        x: VarId,
        b: VarId,
        out: VarId,
        ch: usize,
        spatial: usize,
    },
    Add {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Neg {
        x: VarId,
        out: VarId,
    },
    Scale {
        x: VarId,
        c: T,
        out: VarId,
    },
    AddScalar {
        x: VarId,
        out: VarId,
    },
    Relu {
        x: VarId,
        out: VarId,
    },
    LeakyRelu {
        x: VarId,
        alpha: T,
        out: VarId,
    },
    Tanh {
        x: VarId,
        out: VarId,
    },
    Sqrt {
        x: VarId,
        out: VarId,
    },
    Sum {
        x: VarId,
        out: VarId,
    },
    Mean {
        x: VarId,
        out: VarId,
    },
    SumRows {
        x: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
    },
    Concat0 {
        parts: Vec<VarId>,
        out: VarId,
        lens: Vec<usize>,
    },
    Reshape {
        x: VarId,
        out: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        out: VarId,
        dims: ConvDims,
    },
    ConvInputGrad {
        dy: VarId,
        w: VarId,
        out: VarId,
        dims: ConvDims,
    },
    AvgPool2 {
        x: VarId,
        out: VarId,
        bc: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        x: VarId,
        out: VarId,
        bc: usize,
        h: usize,
        w: usize,
    },
    CrossEntropy {
        logits: VarId,
        out: VarId,
        targets: Vec<usize>,
        classes: usize,
    },
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push_inner(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        needs_grad: bool,
        leaf: bool,
    ) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            leaf,
        });
        self.grads.push(None);
        id
    }

    fn push_node(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> VarId {
        self.push_inner(data, shape, needs_grad, false)
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> VarId {
        self.push_inner(data, shape, needs_grad, true)
    }

    /// Leaf from a tensor, honoring its `requires_grad` flag.
    pub fn leaf_tensor(&mut self, t: &Tensor<T>) -> VarId {
        self.push_inner(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            true,
        )
    }

    /// Leaf from a tensor that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> VarId {
        self.push_inner(t.data().to_vec(), t.shape().to_vec(), false, true)
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("tape node shapes are consistent")
    }

    pub fn scalar_value(&self, id: VarId) -> T {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `opA(a) * opB(b)` with `ta`/`tb` transposing the logical operands.
    pub fn matmul(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> Result<VarId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, ka) = if ta {
            (ash[1], ash[0])
        } else {
            (ash[0], ash[1])
        };
        let (kb, n) = if tb {
            (bsh[1], bsh[0])
        } else {
            (bsh[0], bsh[1])
        };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a),
            self.value(b),
            &mut out,
            m,
            ka,
            n,
            ta,
            tb,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        let id = self.push_node(out, vec![m, n], needs);
        if needs {
            self.ops.push(Op::MatMul {
                a,
                b,
                out: id,
                ta,
                tb,
                m,
                k: ka,
                n,
            });
        }
        Ok(id)
    }

    /// Affine map `x @ w^T (+ b)` with `x: [rows, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(bias) => self.add_row_bias(y, bias),
            None => Ok(y),
        }
    }

    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs != vec![xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let bvals = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bvals[c];
            }
        }
        let needs = self.needs(x) || self.needs(b);
        let id = self.push_node(out, xs, needs);
        if needs {
            self.ops.push(Op::AddRowBias {
                x,
                b,
                out: id,
                rows,
                cols,
            });
        }
        Ok(id)
    }

    /// Per-channel bias on an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || bs != vec![xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (batch, ch, spatial) = (xs[0], xs[1], xs[2] * xs[3]);
        let bvals = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * spatial;
                for s in 0..spatial {
                    out[base + s] += bvals[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        let id = self.push_node(out, xs, needs);
        if needs {
            self.ops.push(Op::AddChannelBias {
                x,
                b,
                out: id,
                ch,
                spatial,
            });
        }
        Ok(id)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        a: VarId,
        b: VarId,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> (VarId, bool) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op_name}: shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        (self.push_node(out, shape, needs), needs)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (id, needs) = self.binary_same_shape(a, b, "add", |x, y| x + y);
        if needs {
            self.ops.push(Op::Add { a, b, out: id });
        }
        id
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (id, needs) = self.binary_same_shape(a, b, "sub", |x, y| x - y);
        if needs {
            self.ops.push(Op::Sub { a, b, out: id });
        }
        id
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (id, needs) = self.binary_same_shape(a, b, "mul", |x, y| x * y);
        if needs {
            self.ops.push(Op::Mul { a, b, out: id });
        }
        id
    }

    fn unary(&mut self, x: VarId, f: impl Fn(T) -> T, rec: impl FnOnce(VarId) -> Op<T>) -> VarId {
        let out: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        let id = self.push_node(out, shape, needs);
        if needs {
            self.ops.push(rec(id));
        }
        id
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| -v, |out| Op::Neg { x, out })
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        self.unary(x, |v| v * c, |out| Op::Scale { x, c, out })
    }

    pub fn add_scalar(&mut self, x: VarId, c: T) -> VarId {
        self.unary(x, |v| v + c, |out| Op::AddScalar { x, out })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |out| Op::Relu { x, out },
        )
    }

    pub fn leaky_relu(&mut self, x: VarId, alpha: T) -> VarId {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * alpha },
            |out| Op::LeakyRelu { x, alpha, out },
        )
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.tanh(), |out| Op::Tanh { x, out })
    }

    pub fn sqrt(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.sqrt(), |out| Op::Sqrt { x, out })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: T = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        let id = self.push_node(vec![s], vec![1], needs);
        if needs {
            self.ops.push(Op::Sum { x, out: id });
        }
        id
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = T::from_f64(self.numel(x) as f64);
        let s: T = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        let id = self.push_node(vec![s / n], vec![1], needs);
        if needs {
            self.ops.push(Op::Mean { x, out: id });
        }
        id
    }

    /// Row sums of a 2-D tensor, producing `[rows, 1]`.
    pub fn sum_rows(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_rows",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let v = self.value(x);
        let out: Vec<T> = (0..rows)
            .map(|r| v[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        let needs = self.needs(x);
        let id = self.push_node(out, vec![rows, 1], needs);
        if needs {
            self.ops.push(Op::SumRows {
                x,
                out: id,
                rows,
                cols,
            });
        }
        Ok(id)
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[VarId]) -> Result<VarId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat0 of zero parts".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            let sh = self.shape(p);
            if sh[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    lhs: self.shape(first).to_vec(),
                    rhs: sh.to_vec(),
                });
            }
            rows += sh[0];
            lens.push(self.numel(p));
            data.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let id = self.push_node(data, shape, needs);
        if needs {
            self.ops.push(Op::Concat0 {
                parts: parts.to_vec(),
                out: id,
                lens,
            });
        }
        Ok(id)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        let id = self.push_node(data, shape, needs);
        if needs {
            self.ops.push(Op::Reshape { x, out: id });
        }
        Ok(id)
    }

    // ── convolution family ──────────────────────────────────────────

    /// Cross-correlation, NCHW in / FCkk weights.
    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let dims = ConvDims::infer(self.shape(x), self.shape(w), stride, pad)?;
        let mut out = vec![T::zero(); dims.out_len()];
        kernels::conv2d_forward(self.value(x), self.value(w), &mut out, &dims);
        let needs = self.needs(x) || self.needs(w);
        let id = self.push_node(out, dims.out_shape(), needs);
        if needs {
            self.ops.push(Op::Conv2d {
                x,
                w,
                out: id,
                dims,
            });
        }
        Ok(id)
    }

    /// Adjoint of [`Tape::conv2d`] in the input slot, as a first-class op:
    /// maps a `dy`-shaped value back to input shape. Used to build gradient
    /// graphs that are themselves differentiated (gradient penalties).
    pub fn conv2d_input_grad(&mut self, dy: VarId, w: VarId, dims: &ConvDims) -> Result<VarId> {
        if self.shape(dy) != dims.out_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "conv2d_input_grad",
                lhs: self.shape(dy).to_vec(),
                rhs: dims.out_shape(),
            });
        }
        let mut out = vec![T::zero(); dims.in_len()];
        kernels::conv2d_input_grad(self.value(dy), self.value(w), &mut out, dims, false);
        let needs = self.needs(dy) || self.needs(w);
        let id = self.push_node(out, dims.in_shape(), needs);
        if needs {
            self.ops.push(Op::ConvInputGrad {
                dy,
                w,
                out: id,
                dims: *dims,
            });
        }
        Ok(id)
    }

    pub fn avg_pool2(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut out = vec![T::zero(); bc * (h / 2) * (w / 2)];
        kernels::avg_pool2(self.value(x), &mut out, xs[0], xs[1], h, w);
        let needs = self.needs(x);
        let id = self.push_node(out, vec![xs[0], xs[1], h / 2, w / 2], needs);
        if needs {
            self.ops.push(Op::AvgPool2 {
                x,
                out: id,
                bc,
                h,
                w,
            });
        }
        Ok(id)
    }

    pub fn upsample_nearest2(&mut self, x: VarId) -> Result<VarId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest2",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut out = vec![T::zero(); bc * h * 2 * w * 2];
        kernels::upsample_nearest2(self.value(x), &mut out, xs[0], xs[1], h, w);
        let needs = self.needs(x);
        let id = self.push_node(out, vec![xs[0], xs[1], h * 2, w * 2], needs);
        if needs {
            self.ops.push(Op::Upsample2 {
                x,
                out: id,
                bc,
                h,
                w,
            });
        }
        Ok(id)
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean negative log-softmax likelihood of `targets` under `logits [B, K]`.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![targets.len()],
            });
        }
        let classes = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!(
                "cross_entropy target {bad} out of range for {classes} classes"
            )));
        }
        let v = self.value(logits);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &v[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_sum: T = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += log_sum - row[t];
        }
        loss /= T::from_f64(targets.len() as f64);
        let needs = self.needs(logits);
        let id = self.push_node(vec![loss], vec![1], needs);
        if needs {
            self.ops.push(Op::CrossEntropy {
                logits,
                out: id,
                targets: targets.to_vec(),
                classes,
            });
        }
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────

    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn accum(&mut self, id: VarId, delta: &[T]) {
        if !self.needs(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn out_grad(&self, id: VarId) -> Option<Vec<T>> {
        self.grads[id.0].clone()
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// repeated calls on the same tape; intermediate gradients are reset.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.leaf {
                self.grads[i] = None;
            }
        }
        self.accum(loss, &[T::one()]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize) {
        let op = self.ops[idx].clone();
        match &op {
            Op::MatMul {
                a,
                b,
                out,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let Some(d) = self.out_grad(*out) else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); self.numel(*a)];
                    if !*ta {
                        kernels::matmul(&d, self.value(*b), &mut da, m, n, k, false, !*tb, false);
                    } else {
                        kernels::matmul(self.value(*b), &d, &mut da, k, n, m, *tb, true, false);
                    }
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); self.numel(*b)];
                    if !*tb {
                        kernels::matmul(self.value(*a), &d, &mut db, k, m, n, !*ta, false, false);
                    } else {
                        kernels::matmul(&d, self.value(*a), &mut db, n, m, k, true, *ta, false);
                    }
                    self.accum(*b, &db);
                }
            }
            Op::AddRowBias {
                x,
                b,
                out,
                rows,
                cols,
            } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*x, &d);
                if self.needs(*b) {
                    let mut db = vec![T::zero(); *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += d[r * cols + c];
                        }
                    }
                    self.accum(*b, &db);
                }
            }
            Op::AddChannelBias {
                x,
                b,
                out,
                ch,
                spatial,
            } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*x, &d);
                if self.needs(*b) {
                    let mut db = vec![T::zero(); *ch];
                    let per_img = ch * spatial;
                    for (i, dv) in d.iter().enumerate() {
                        db[(i % per_img) / spatial] += *dv;
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*a, &d);
                self.accum(*b, &d);
            }
            Op::Sub { a, b, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*a, &d);
                if self.needs(*b) {
                    let neg: Vec<T> = d.iter().map(|&v| -v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                if self.needs(*a) {
                    let da: Vec<T> = d.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = d.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Neg { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx: Vec<T> = d.iter().map(|&v| -v).collect();
                self.accum(*x, &dx);
            }
            Op::Scale { x, c, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx: Vec<T> = d.iter().map(|&v| v * *c).collect();
                self.accum(*x, &dx);
            }
            Op::AddScalar { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*x, &d);
            }
            Op::Relu { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx: Vec<T> = d
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::LeakyRelu { x, alpha, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx: Vec<T> = d
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *alpha })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Tanh { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx: Vec<T> = d
                    .iter()
                    .zip(self.value(*out))
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Sqrt { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let half = T::from_f64(0.5);
                let tiny = T::from_f64(1e-30);
                let dx: Vec<T> = d
                    .iter()
                    .zip(self.value(*out))
                    .map(|(&g, &y)| g * half / y.max(tiny))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Sum { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let dx = vec![d[0]; self.numel(*x)];
                self.accum(*x, &dx);
            }
            Op::Mean { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                let n = self.numel(*x);
                let dx = vec![d[0] / T::from_f64(n as f64); n];
                self.accum(*x, &dx);
            }
            Op::SumRows { x, out, rows, cols } => {
                let Some(d) = self.out_grad(*out) else { return };
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = d[r];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Concat0 { parts, out, lens } => {
                let Some(d) = self.out_grad(*out) else { return };
                let mut offset = 0usize;
                for (&p, &len) in parts.iter().zip(lens) {
                    if self.needs(p) {
                        let chunk = d[offset..offset + len].to_vec();
                        self.accum(p, &chunk);
                    }
                    offset += len;
                }
            }
            Op::Reshape { x, out } => {
                let Some(d) = self.out_grad(*out) else { return };
                self.accum(*x, &d);
            }
            Op::Conv2d { x, w, out, dims } => {
                let Some(d) = self.out_grad(*out) else { return };
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); dims.in_len()];
                    kernels::conv2d_input_grad(&d, self.value(*w), &mut dx, dims, false);
                    self.accum(*x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); self.numel(*w)];
                    kernels::conv2d_weight_grad(self.value(*x), &d, &mut dw, dims, false);
                    self.accum(*w, &dw);
                }
            }
            Op::ConvInputGrad { dy, w, out, dims } => {
                // forward: out = conv_input_grad(dy, w); the map is bilinear,
                // so d_dy = conv2d(g, w) and d_w = weight_grad(g, dy) with the
                // upstream g playing the input role.
                let Some(g) = self.out_grad(*out) else { return };
                if self.needs(*dy) {
                    let mut ddy = vec![T::zero(); dims.out_len()];
                    kernels::conv2d_forward(&g, self.value(*w), &mut ddy, dims);
                    self.accum(*dy, &ddy);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); self.numel(*w)];
                    kernels::conv2d_weight_grad(&g, self.value(*dy), &mut dw, dims, false);
                    self.accum(*w, &dw);
                }
            }
            Op::AvgPool2 { x, out, bc, h, w } => {
                let Some(d) = self.out_grad(*out) else { return };
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); bc * h * w];
                for i in 0..*bc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = d[(i * oh + oy) * ow + ox] * quarter;
                            let base = i * h * w + oy * 2 * w + ox * 2;
                            dx[base] += g;
                            dx[base + 1] += g;
                            dx[base + w] += g;
                            dx[base + w + 1] += g;
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Upsample2 { x, out, bc, h, w } => {
                let Some(d) = self.out_grad(*out) else { return };
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = vec![T::zero(); bc * h * w];
                for i in 0..*bc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[i * h * w + (oy / 2) * w + ox / 2] += d[(i * oh + oy) * ow + ox];
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                out,
                targets,
                classes,
            } => {
                let Some(d) = self.out_grad(*out) else { return };
                let scale = d[0] / T::from_f64(targets.len() as f64);
                let v = self.value(*logits);
                let k = *classes;
                let mut dl = vec![T::zero(); v.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &v[r * k..(r + 1) * k];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
                    let denom: T = exps.iter().copied().sum();
                    for c in 0..k {
                        let p = exps[c] / denom;
                        let delta = if c == t { T::one() } else { T::zero() };
                        dl[r * k + c] = (p - delta) * scale;
                    }
                }
                self.accum(*logits, &dl);
            }
        }
    }
}
