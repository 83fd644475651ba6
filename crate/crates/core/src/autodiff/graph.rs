use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::conv::{self, ConvGeom, Padding};
use super::layers::{self, BatchStats, BnMode, BnSaved};
use super::{spatial, GraphError, Parameter, Scalar, Tensor};
use crate::exec;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardRule<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Abs(Var),
    Ln(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp { a: Var, lo: T, hi: T },
    Sum(Var),
    Diff { a: Var, axis: usize },
    Reshape(Var),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    MaxPool { x: Var, arg: Vec<usize> },
    Dense { x: Var, w: Var, b: Var },
    Custom { a: Var, rule: BackwardRule<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Ln(_) => "ln",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Diff { .. } => "diff",
            Op::Reshape(_) => "reshape",
            Op::Conv { .. } => "conv3d",
            Op::BatchNorm { .. } => "batchnorm3d",
            Op::MaxPool { .. } => "maxpool3d",
            Op::Dense { .. } => "dense",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// The tape: an append-only record of operations in execution order.
///
/// Operands always precede the operations that use them, so a reverse
/// sweep over the node list is a valid topological order for backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Non-finite values are rejected as they are produced unless
    /// disabled with [`Graph::with_finite_checks`].
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true, fault: None }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Test hook: negates the gradient passed through every `op` node in
    /// backward, simulating a sign error in that rule.
    #[doc(hidden)]
    pub fn with_fault(mut self, op: &str) -> Self {
        self.fault = Some(op.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, GraphError> {
        if self.check_finite && !value.all_finite() {
            return Err(GraphError::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a parameter; frozen parameters are recorded as
    /// constants.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.nodes.push(Node {
            value: p.value().clone(),
            op: Op::Leaf,
            requires_grad: !p.is_frozen(),
            param: Some(p.name().to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, GraphError> {
        let t = self.value(a);
        let value = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| f(v)).collect() };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, GraphError> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, GraphError> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `|a|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    /// Elementwise `max(0, a)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() || x.is_nan() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, GraphError> {
        self.unary(a, Op::Clamp { a, lo, hi }, |x| if x.is_nan() { x } else { x.max(lo).min(hi) })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Forward difference `a[i + 1] - a[i]` along spatial axis `axis`
    /// (0 = x, 1 = y, 2 = z) of a `[N, C, X, Y, Z]` tensor, valid positions
    /// only.
    pub fn diff(&mut self, a: Var, axis: usize) -> Result<Var, GraphError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 || axis > 2 || shape[2 + axis] < 2 {
            return Err(GraphError::Shape {
                op: "diff",
                detail: format!("need a [N,C,X,Y,Z] tensor with axis {axis} of length >= 2, got {shape:?}"),
            });
        }
        let dims = spatial(&shape);
        let mut od = dims;
        od[axis] -= 1;
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let src = self.value(a).data();
        let planes = shape[0] * shape[1];
        let ivox: usize = dims.iter().product();
        let mut data = Vec::with_capacity(planes * od.iter().product::<usize>());
        for p in 0..planes {
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let row = p * ivox + dims[0] * (y + dims[1] * z);
                    for x in 0..od[0] {
                        data.push(src[row + x + stride] - src[row + x]);
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape[2 + axis] -= 1;
        let rg = self.rg(a);
        self.push(Tensor { shape: oshape, data }, Op::Diff { a, axis }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GraphError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(GraphError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", t.shape()),
            });
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Elementwise map with a caller-supplied backward rule
    /// `rule(input, output, grad_output) -> grad_input`.
    pub fn map_unary(
        &mut self,
        a: Var,
        forward: impl Fn(T) -> T,
        rule: impl Fn(&[T], &[T], &[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Result<Var, GraphError> {
        self.unary(a, Op::Custom { a, rule: Box::new(rule) }, forward)
    }

    /// Stride-1 3D cross-correlation. `x: [N, Cin, X, Y, Z]`,
    /// `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var, GraphError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let shape_err = |detail: String| GraphError::Shape { op: "conv3d", detail };
        if xs.len() != 5 || ws.len() != 5 {
            return Err(shape_err(format!("input {xs:?}, weights {ws:?}")));
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if ws[3] != k || ws[4] != k || xs[1] != cin || bs != [cout] {
            return Err(shape_err(format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        }
        let pad = padding.amount(k)?;
        let geom = ConvGeom::new(cin, cout, k, pad, spatial(&xs))?;
        let n = xs[0];
        let in_len = cin * geom.in_dims.iter().product::<usize>();
        let od = geom.out_dims();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let per_sample = exec::map(n, |i| conv::forward_sample(&geom, &xv[i * in_len..(i + 1) * in_len], wv, Some(bv)));
        let data: Vec<T> = per_sample.concat();
        let value = Tensor::new(vec![n, cout, od[0], od[1], od[2]], data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    /// Batch normalization over all axes except the channel axis 1.
    /// In train mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats>), GraphError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(GraphError::Shape {
                op: "batchnorm3d",
                detail: format!("input {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            });
        }
        if let BnMode::Infer { running_mean, running_var, .. } = mode {
            if running_mean.len() != xs[1] || running_var.len() != xs[1] {
                return Err(GraphError::Shape { op: "batchnorm3d", detail: "running stats length".into() });
            }
        }
        let (n, c) = (xs[0], xs[1]);
        let s = xs[2..].iter().product::<usize>();
        let (y, saved, stats) = layers::bn_forward(
            self.value(x).data(),
            n,
            c,
            s,
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Tensor::new(xs, y)?, Op::BatchNorm { x, gamma, beta, saved }, rg)?;
        Ok((v, stats))
    }

    /// 2×2×2 max pooling with stride 2 over a `[N, C, X, Y, Z]` tensor.
    pub fn max_pool(&mut self, x: Var) -> Result<Var, GraphError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(GraphError::Shape { op: "maxpool3d", detail: format!("{xs:?}") });
        }
        let dims = spatial(&xs);
        if dims.iter().any(|d| d % 2 != 0) {
            return Err(GraphError::OddPoolDims(dims));
        }
        let (y, arg) = layers::maxpool_forward(self.value(x).data(), xs[0] * xs[1], dims);
        let shape = vec![xs[0], xs[1], dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y)?, Op::MaxPool { x, arg }, rg)
    }

    /// Affine layer: `x: [N, F]`, `w: [O, F]`, `b: [O]` → `[N, O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GraphError> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(GraphError::Shape {
                op: "dense",
                detail: format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            });
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let y = layers::dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, f, o);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, o], y)?, Op::Dense { x, w, b }, rg)
    }

    /// Fingerprint of every non-smooth branch taken by the forward pass:
    /// relu and abs signs, clamp saturation and max-pool winners. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &v in self.value(*a).data() {
                        (v > T::zero(), v < T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    for &v in self.value(*a).data() {
                        (v < *lo, v > *hi).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, GraphError> {
        let rshape = self.shape(root);
        if rshape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarRoot(rshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault.as_deref() == Some(self.nodes[i].op.name()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(i, g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_ref().map(|p| (i, p.clone())))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) -> Result<(), GraphError> {
        if !self.rg(v) {
            return Ok(());
        }
        if self.check_finite && g.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::NonFinite(self.nodes[v.0].op.name()));
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<(), GraphError> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { a.iter().zip(&g).map(|(&x, &d)| f(x, d)).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.clone())?;
                }
                self.acc(grads, *a, g)?;
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.acc(grads, *b, g.iter().map(|&d| -d).collect())?;
                }
                self.acc(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, zip(val(*b), &|y, d| y * d))?;
                }
                if self.rg(*b) {
                    self.acc(grads, *b, zip(val(*a), &|x, d| x * d))?;
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|&d| d * *s).collect())?,
            Op::Square(a) => {
                let two = T::of(2.0);
                self.acc(grads, *a, zip(val(*a), &|x, d| two * x * d))?
            }
            Op::Abs(a) => self.acc(
                grads,
                *a,
                zip(val(*a), &|x, d| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                }),
            )?,
            Op::Ln(a) => self.acc(grads, *a, zip(val(*a), &|x, d| d / x))?,
            Op::Relu(a) => self.acc(grads, *a, zip(val(*a), &|x, d| if x > T::zero() { d } else { T::zero() }))?,
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, zip(y, &|s, d| d * s * (T::one() - s)))?
            }
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.acc(grads, *a, zip(val(*a), &|x, d| if x >= lo && x <= hi { d } else { T::zero() }))?
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.acc(grads, *a, vec![g[0]; n])?
            }
            Op::Diff { a, axis } => {
                let shape = self.shape(*a);
                let dims = spatial(shape);
                let mut od = dims;
                od[*axis] -= 1;
                let stride = [1, dims[0], dims[0] * dims[1]][*axis];
                let ivox: usize = dims.iter().product();
                let mut da = vec![T::zero(); self.nodes[a.0].value.len()];
                let mut it = g.iter();
                for p in 0..shape[0] * shape[1] {
                    for z in 0..od[2] {
                        for y in 0..od[1] {
                            let row = p * ivox + dims[0] * (y + dims[1] * z);
                            for x in 0..od[0] {
                                let d = *it.next().unwrap();
                                da[row + x + stride] += d;
                                da[row + x] -= d;
                            }
                        }
                    }
                }
                self.acc(grads, *a, da)?
            }
            Op::Reshape(a) => self.acc(grads, *a, g)?,
            Op::Conv { x, w, b, geom } => {
                let (want_dx, want_dw) = (self.rg(*x), self.rg(*w));
                let n = self.shape(*x)[0];
                let in_len = geom.cin * geom.in_dims.iter().product::<usize>();
                let out_len = geom.cout * geom.out_dims().iter().product::<usize>();
                let (xv, wv) = (val(*x), val(*w));
                let parts = exec::map(n, |s| {
                    conv::backward_sample(
                        geom,
                        &xv[s * in_len..(s + 1) * in_len],
                        wv,
                        &g[s * out_len..(s + 1) * out_len],
                        want_dx,
                        want_dw,
                    )
                });
                let mut dx = Vec::with_capacity(if want_dx { n * in_len } else { 0 });
                let mut dw = vec![T::zero(); if want_dw { wv.len() } else { 0 }];
                let mut db = vec![T::zero(); geom.cout];
                for (sx, sw, sb) in parts {
                    if let Some(sx) = sx {
                        dx.extend(sx);
                    }
                    if let Some(sw) = sw {
                        dw.iter_mut().zip(&sw).for_each(|(a, &v)| *a += v);
                    }
                    db.iter_mut().zip(&sb).for_each(|(a, &v)| *a += v);
                }
                if want_dx {
                    self.acc(grads, *x, dx)?;
                }
                if want_dw {
                    self.acc(grads, *w, dw)?;
                }
                self.acc(grads, *b, db)?;
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let s = xs[2..].iter().product::<usize>();
                let (dx, dgamma, dbeta) = layers::bn_backward(&g, saved, val(*gamma), n, c, s);
                self.acc(grads, *x, dx)?;
                self.acc(grads, *gamma, dgamma)?;
                self.acc(grads, *beta, dbeta)?;
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&j, &d) in arg.iter().zip(&g) {
                    dx[j] += d;
                }
                self.acc(grads, *x, dx)?
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, f, o) = (xs[0], xs[1], self.shape(*w)[0]);
                let (dx, dw, db) = layers::dense_backward(&g, val(*x), val(*w), n, f, o);
                self.acc(grads, *x, dx)?;
                self.acc(grads, *w, dw)?;
                self.acc(grads, *b, db)?;
            }
            Op::Custom { a, rule } => {
                let da = rule(val(*a), node.value.data(), &g);
                self.acc(grads, *a, da)?
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep, retained for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, String)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter name, summed over every leaf bound to that
    /// parameter, in recording order.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
        for (i, name) in &self.params {
            let Some(g) = &self.grads[*i] else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}
