//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar loss with
//! respect to every node that was marked as requiring one.

use super::kernels::{self, ConvGeom, ResizeAxis};
use super::{numel, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    ScaleConst(Var, T),
    ScaleBy(Var, Var),
    MulChannel(Var, Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        ay: ResizeAxis,
        ax: ResizeAxis,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Bce {
        p: Var,
        label: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
///
/// A graph optionally borrows a [`ParamStore`]; [`Graph::param`] copies a
/// parameter onto the tape on first use and returns the same node afterwards.
#[derive(Debug)]
pub struct Graph<'s, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Probability clamp used by the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Epsilon added to group-norm variances.
pub const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Node for a stored parameter.
    ///
    /// Panics if the graph was built without a store or `id` is foreign.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = &store.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node holds a consistent tensor")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, value, mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape, value, op, ng)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::ScaleConst(x, c))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::shape("scale_by", self.shape(s), &[1]));
        }
        let k = self.scalar_value(s);
        let value = self.value(x).iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, s]);
        Ok(self.push(shape, value, Op::ScaleBy(x, s), ng))
    }

    /// Multiplies channel `c` of a `C×…` tensor by `u[c]`.
    pub fn mul_channel(&mut self, x: Var, u: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(u) != [c] {
            return Err(Error::shape("mul_channel", self.shape(x), self.shape(u)));
        }
        let plane = self.value(x).len() / c;
        let uv = self.value(u);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * uv[i / plane])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, u]);
        Ok(self.push(shape, value, Op::MulChannel(x, u), ng))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b) / n;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Per-channel spatial mean: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 {
            return Err(Error::dim("global_avg_pool", format!("expected C×H×W, got {shape:?}")));
        }
        let c = shape[0];
        let plane = shape[1] * shape[2];
        let n = T::from_usize(plane).unwrap();
        let value = self
            .value(x)
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b) / n)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![c], value, Op::GlobalAvgPool(x), ng))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let value = transpose(self.value(x), r, c);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), ng))
    }

    /// Concatenates `C_i×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut c = 0;
        let mut value = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_channels", self.shape(*first), s));
            }
            c += s[0];
            value.extend_from_slice(self.value(x));
        }
        let mut shape = vec![c];
        shape.extend(tail);
        let ng = self.ng(xs);
        Ok(self.push(shape, value, Op::Concat(xs.to_vec()), ng))
    }

    // ---- linear algebra -------------------------------------------------

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match self.shape(x) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut value = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut value, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("softmax_rows", x)?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax_rows",
                msg: "NaN in input".into(),
            });
        }
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, value, Op::SoftmaxRows(x), ng))
    }

    // ---- image ops ------------------------------------------------------

    /// 2-D cross-correlation of a `C_in×H×W` input with a
    /// `C_out×C_in×k×k` kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if xs[0] != ws[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("input has {} channels, kernel expects {} (shapes {xs:?}, {ws:?})", xs[0], ws[1]),
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(xs[1], k, stride, padding),
            kernels::conv_out_extent(xs[2], k, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::dim("conv2d", format!("kernel {k} does not fit input {xs:?}"))),
        };
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let ncol = oh * ow;
        let mut value = vec![T::zero(); c_out * ncol];
        if let Some(b) = b {
            for (row, &bv) in value.chunks_mut(ncol).zip(self.value(b)) {
                row.fill(bv);
            }
        }
        let cols;
        let cols_ref = if geom.is_pointwise() {
            self.value(x)
        } else {
            cols = kernels::im2col(self.value(x), &geom);
            &cols
        };
        T::gemm(c_out, geom.col_rows(), ncol, self.value(w), false, cols_ref, false, &mut value, b.is_some());
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        Ok(self.push(vec![c_out, oh, ow], value, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize(&mut self, x: Var, (th, tw): (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("resize", format!("expected C×H×W, got {s:?}")));
        }
        if th == 0 || tw == 0 {
            return Err(Error::dim("resize", "target extents must be positive"));
        }
        if (s[1], s[2]) == (th, tw) {
            // identity resize still records a node so shapes stay explicit
            return self.reshape(x, s);
        }
        let ay = ResizeAxis::new(s[1], th);
        let ax = ResizeAxis::new(s[2], tw);
        let value = kernels::resize_forward(self.value(x), s[0], (s[1], s[2]), &ay, &ax);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![s[0], th, tw], value, Op::Resize { x, ay, ax }, ng))
    }

    /// Group normalisation over `C×H×W` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("group_norm", format!("expected C×H×W, got {s:?}")));
        }
        let c = s[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm affine", self.shape(gamma), &[c]));
        }
        let plane = s[1] * s[2];
        let group_len = c / groups * plane;
        let n = T::from_usize(group_len).unwrap();
        let eps = T::from_f64_lossy(NORM_EPS);
        let xv = self.value(x);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for (src, dst) in xv.chunks(group_len).zip(xhat.chunks_mut(group_len)) {
            let mean = src.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = src.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let value = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i / plane] + bv[i / plane])
            .collect();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            s,
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy between the change channel (index 1) of a
    /// `2×H×W` probability map and an `H×W` {0,1} label. Probabilities are
    /// clamped to `[1e-7, 1 − 1e-7]` before the logarithm.
    pub fn binary_cross_entropy(&mut self, p: Var, label: &Tensor<T>) -> Result<Var> {
        let s = self.shape(p);
        if s.len() != 3 || s[0] != 2 || s[1..] != *label.shape() {
            return Err(Error::shape("binary_cross_entropy", s, label.shape()));
        }
        if label.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::Validation("label entries must be 0 or 1".into()));
        }
        let plane = label.len();
        let probs = &self.value(p)[plane..];
        let (lo, hi) = clamp_bounds::<T>();
        let mut total = T::zero();
        for (&q, &y) in probs.iter().zip(label.data()) {
            let q = q.max(lo).min(hi);
            total = total - (y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let loss = total / T::from_usize(plane).unwrap();
        let ng = self.ng(&[p]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                label: label.data().to_vec(),
            },
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
        f(buf);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] - g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::ScaleConst(x, c) => self.acc(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c)
            }),
            Op::ScaleBy(x, s) => {
                let k = self.scalar_value(*s);
                let xv = self.value(*x);
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * k));
                self.acc(grads, *s, |d| {
                    d[0] = d[0] + g.iter().zip(xv).fold(zero, |a, (&g, &x)| a + g * x)
                });
            }
            Op::MulChannel(x, u) => {
                let (xv, uv) = (self.value(*x), self.value(*u));
                let plane = xv.len() / uv.len();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * uv[i / plane];
                    }
                });
                self.acc(grads, *u, |d| {
                    for (c, dc) in d.iter_mut().enumerate() {
                        let r = c * plane..(c + 1) * plane;
                        *dc = *dc + g[r.clone()].iter().zip(&xv[r]).fold(zero, |a, (&g, &x)| a + g * x);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        // subgradient 0 at the kink
                        let s = if xv[i] > zero {
                            one
                        } else if xv[i] < zero {
                            -one
                        } else {
                            zero
                        };
                        d[i] = d[i] + g[i] * s;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > zero {
                            d[i] = d[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * y[i] * (one - y[i]);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let k = g[0] / T::from_usize(self.value(*x).len()).unwrap();
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d = *d + k));
            }
            Op::GlobalAvgPool(x) => {
                let plane = self.value(*x).len() / g.len();
                let n = T::from_usize(plane).unwrap();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i / plane] / n;
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gt = transpose(g, r, c);
                self.acc(grads, *x, |d| add_into(d, &gt));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    self.acc(grads, x, |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| T::gemm(m, n, k, g, false, bv, true, d, true));
                self.acc(grads, *b, |d| T::gemm(k, m, n, av, true, g, false, d, true));
            }
            Op::SoftmaxRows(x) => {
                let c = node.shape[1];
                let y = &node.value;
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot = gr.iter().zip(yr).fold(zero, |a, (&g, &y)| a + g * y);
                        for j in 0..c {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = node.shape[0];
                let ncol = geom.col_cols();
                let rows = geom.col_rows();
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for (dc, gr) in d.iter_mut().zip(g.chunks(ncol)) {
                            *dc = *dc + gr.iter().fold(zero, |a, &v| a + v);
                        }
                    });
                }
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.nodes[w.0].needs_grad {
                    let cols;
                    let cols_ref = if geom.is_pointwise() {
                        xv
                    } else {
                        cols = kernels::im2col(xv, geom);
                        &cols
                    };
                    self.acc(grads, *w, |d| T::gemm(c_out, ncol, rows, g, false, cols_ref, true, d, true));
                }
                if self.nodes[x.0].needs_grad {
                    if geom.is_pointwise() {
                        self.acc(grads, *x, |d| T::gemm(rows, c_out, ncol, wv, true, g, false, d, true));
                    } else {
                        let mut dcols = vec![zero; rows * ncol];
                        T::gemm(rows, c_out, ncol, wv, true, g, false, &mut dcols, false);
                        self.acc(grads, *x, |d| kernels::col2im(&dcols, geom, d));
                    }
                }
            }
            Op::Resize { x, ay, ax } => {
                let s = self.shape(*x);
                let dx = kernels::resize_backward(g, s[0], (s[1], s[2]), ay, ax);
                self.acc(grads, *x, |d| add_into(d, &dx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let c = node.shape[0];
                let plane = node.shape[1] * node.shape[2];
                let gv = self.value(*gamma);
                self.acc(grads, *beta, |d| {
                    for ch in 0..c {
                        d[ch] = d[ch] + g[ch * plane..(ch + 1) * plane].iter().fold(zero, |a, &v| a + v);
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for ch in 0..c {
                        let r = ch * plane..(ch + 1) * plane;
                        d[ch] = d[ch] + g[r.clone()].iter().zip(&xhat[r]).fold(zero, |a, (&g, &h)| a + g * h);
                    }
                });
                let group_len = c / groups * plane;
                let n = T::from_usize(group_len).unwrap();
                self.acc(grads, *x, |d| {
                    for gi in 0..*groups {
                        let r = gi * group_len..(gi + 1) * group_len;
                        let mut sum_dh = zero;
                        let mut sum_dh_h = zero;
                        for i in r.clone() {
                            let dh = g[i] * gv[i / plane];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[i];
                        }
                        let k = inv_std[gi] / n;
                        for i in r {
                            let dh = g[i] * gv[i / plane];
                            d[i] = d[i] + k * (n * dh - sum_dh - xhat[i] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Bce { p, label } => {
                let plane = label.len();
                let probs = &self.value(*p)[plane..];
                let (lo, hi) = clamp_bounds::<T>();
                let n = T::from_usize(plane).unwrap();
                self.acc(grads, *p, |d| {
                    for i in 0..plane {
                        let q = probs[i];
                        if q < lo || q > hi {
                            continue;
                        }
                        let y = label[i];
                        let dq = (-y / q + (one - y) / (one - q)) / n;
                        d[plane + i] = d[plane + i] + g[0] * dq;
                    }
                });
            }
        }
    }
}

fn clamp_bounds<T: Scalar>() -> (T, T) {
    let lo = T::from_f64_lossy(BCE_CLAMP);
    (lo, T::one() - lo)
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }

    /// Adds every reached parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}
