//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of the tape is a valid topological order for [`Graph::backward`].
//! Parameter values are shared with the [`ParamSet`] through `Arc`, and
//! gradients are accumulated into it: calling `backward` twice without
//! [`ParamSet::zero_grads`] doubles the stored gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, NnError, Result};
use crate::kernels;
use crate::param::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomOp<T: Scalar>: Send + Sync {
    /// Gradients for each input, `None` where the input is not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;

    /// Hash of the discrete choices (argmax, clamps) made in the forward pass.
    fn branch_signature(&self) -> u64 {
        0
    }
}

enum Op<T: Scalar> {
    Const,
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Softplus(Var),
    Add(Var, Var),
    MulConst(Var, T),
    Scale { x: Var, s: Var },
    PowBy { base: Arc<Tensor<T>>, s: Var },
    Concat(Vec<Var>),
    Select { x: Var, idx: Vec<usize> },
    L1Mean { x: Var, target: Arc<Tensor<T>> },
    AbsSum(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of grad-requiring inputs created with [`Graph::input`].
#[derive(Debug, Default)]
pub struct InputGrads<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> InputGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    track_branches: bool,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_branches: false,
            branch_hash: FNV_OFFSET,
        }
    }

    /// Records a hash of every non-smooth decision (relu masks, abs signs,
    /// custom-op argmaxes). Used by the finite-difference checker to drop
    /// probes that straddle a kink.
    pub fn with_branch_tracking() -> Self {
        Graph {
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn mix(&mut self, bits: impl Iterator<Item = bool>) {
        if !self.track_branches {
            return;
        }
        let mut h = self.branch_hash;
        for b in bits {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_arc(t, Op::Const, false)
    }

    /// A leaf whose gradient is returned by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_arc(ps.get(id).value.clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv_transpose2x2(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(y, Op::ConvT2 { x, w, b }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        self.mix(xv.data().iter().map(|&v| v > T::zero()));
        let y = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(y, Op::Softplus(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(y, Op::MulConst(x, c), ng)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("scale", format!("factor shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(y, Op::Scale { x, s }, ng))
    }

    /// Elementwise `base^s` for a constant non-negative base and scalar exponent.
    pub fn pow_by(&mut self, base: Arc<Tensor<T>>, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("pow_by", format!("exponent shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let y = base.map(|v| if v > T::zero() { v.powf(sv) } else { T::zero() });
        let ng = self.ng(s);
        Ok(self.push(y, Op::PowBy { base, s }, ng))
    }

    /// Concatenates `[h, w, c_i]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).hwc()?;
        let mut total = 0;
        for &x in xs {
            let (h, w, c) = self.value(x).hwc()?;
            if (h, w) != (first.0, first.1) {
                return Err(shape_err(
                    "concat",
                    format!("{h}x{w} vs {}x{}", first.0, first.1),
                ));
            }
            total += c;
        }
        let (h, w) = (first.0, first.1);
        let mut out = Vec::with_capacity(h * w * total);
        for p in 0..h * w {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape()[2];
                out.extend_from_slice(&v.data()[p * c..(p + 1) * c]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new([h, w, total], out)?, Op::Concat(xs.to_vec()), ng))
    }

    /// Gathers channels `idx` (repeats allowed) of an `[h, w, c]` tensor.
    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(shape_err("select_channels", format!("channel {bad} of {c}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(h * w * idx.len());
        for p in 0..h * w {
            let px = &xv.data()[p * c..(p + 1) * c];
            out.extend(idx.iter().map(|&i| px[i]));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new([h, w, idx.len()], out)?,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Mean absolute deviation from a constant target.
    pub fn l1_mean(&mut self, x: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let xv = self.nodes[x.0].value.clone();
        if xv.shape() != target.shape() {
            return Err(shape_err(
                "l1",
                format!("{:?} vs {:?}", xv.shape(), target.shape()),
            ));
        }
        self.mix(xv.data().iter().zip(target.data()).map(|(&a, &b)| a > b));
        let n = T::of(xv.len() as f64);
        let s: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Mean { x, target }, ng))
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        self.mix(xv.data().iter().map(|&a| a > T::zero()));
        let s: T = xv.data().iter().map(|a| a.abs()).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::AbsSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Adds a node computed outside the engine.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let sig = op.branch_signature();
        self.mix((0..64).map(|i| sig >> i & 1 == 1));
        let ng = inputs.iter().any(|&x| self.ng(x));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar root. Parameter gradients are added to
    /// `params`; gradients of [`Graph::input`] leaves are returned.
    pub fn backward(&self, root: Var, params: &mut ParamSet<T>) -> Result<InputGrads<T>> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(NnError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        let mut out = InputGrads::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let want = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Const => {}
                Op::Input => {
                    out.grads.insert(Var(i), dy);
                }
                Op::Param(id) => params.accumulate_grad(*id, &dy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        *stride,
                        *pad,
                        &dy,
                        want(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc_if(&mut grads, want(*w), *w, dw);
                    acc_if(&mut grads, want(*b), *b, db);
                }
                Op::ConvT2 { x, w, b } => {
                    let (dx, dw, db) = kernels::conv_transpose2x2_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        &dy,
                        want(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc_if(&mut grads, want(*w), *w, dw);
                    acc_if(&mut grads, want(*b), *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc_if(&mut grads, want(*x), *x, dx);
                    acc_if(&mut grads, want(*w), *w, dw);
                    acc_if(&mut grads, want(*b), *b, db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = dy;
                    for (g, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let mut d = dy;
                    for (g, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        *g *= sigmoid(v);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    if want(*b) {
                        acc(&mut grads, *b, dy.clone());
                    }
                    acc_if(&mut grads, want(*a), *a, dy);
                }
                Op::MulConst(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, dy.map(|g| g * c));
                }
                Op::Scale { x, s } => {
                    let sv = self.value(*s).item();
                    if want(*s) {
                        let ds: T = dy
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(&g, &v)| g * v)
                            .sum();
                        let shape = self.shape(*s).to_vec();
                        acc(&mut grads, *s, Tensor::full(shape, ds));
                    }
                    if want(*x) {
                        acc(&mut grads, *x, dy.map(|g| g * sv));
                    }
                }
                Op::PowBy { base, s } => {
                    let y = &node.value;
                    let ds: T = dy
                        .data()
                        .iter()
                        .zip(base.data())
                        .zip(y.data())
                        .map(|((&g, &b), &yv)| if b > T::zero() { g * yv * b.ln() } else { T::zero() })
                        .sum();
                    let shape = self.shape(*s).to_vec();
                    acc(&mut grads, *s, Tensor::full(shape, ds));
                }
                Op::Concat(xs) => {
                    let (h, w, total) = dy.hwc()?;
                    let mut off = 0;
                    for &x in xs {
                        let c = self.shape(x)[2];
                        if want(x) {
                            let mut d = Vec::with_capacity(h * w * c);
                            for p in 0..h * w {
                                d.extend_from_slice(&dy.data()[p * total + off..][..c]);
                            }
                            acc(&mut grads, x, Tensor::new([h, w, c], d)?);
                        }
                        off += c;
                    }
                }
                Op::Select { x, idx } => {
                    let (h, w, c) = self.value(*x).hwc()?;
                    let k = idx.len();
                    let mut d = Tensor::zeros([h, w, c]);
                    let dd = d.data_mut();
                    for p in 0..h * w {
                        for (j, &i) in idx.iter().enumerate() {
                            dd[p * c + i] += dy.data()[p * k + j];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::L1Mean { x, target } => {
                    let g = dy.item();
                    let xv = self.value(*x);
                    let scale = g / T::of(xv.len() as f64);
                    let d = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&a, &b)| sign(a - b) * scale)
                            .collect(),
                    )?;
                    acc(&mut grads, *x, d);
                }
                Op::AbsSum(x) => {
                    let g = dy.item();
                    acc(&mut grads, *x, self.value(*x).map(|v| sign(v) * g));
                }
                Op::Sum(x) => {
                    let g = dy.item();
                    acc(&mut grads, *x, Tensor::full(self.shape(*x).to_vec(), g));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&ins, &node.value, &dy);
                    for (&v, g) in inputs.iter().zip(gs) {
                        if let Some(g) = g {
                            if g.shape() != self.shape(v) {
                                return Err(shape_err(
                                    "custom backward",
                                    format!("{:?} vs {:?}", g.shape(), self.shape(v)),
                                ));
                            }
                            acc_if(&mut grads, want(v), v, g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn acc_if<T: Scalar>(grads: &mut [Option<Tensor<T>>], want: bool, v: Var, g: Tensor<T>) {
    if want {
        acc(grads, v, g);
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
