//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, records a backward closure on the tape. [`Graph::backward`]
//! walks the tape in reverse creation order, which is a valid topological
//! order because a node can only reference nodes created before it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParameterStore};
use super::real::{normal_cdf, normal_pdf, sigmoid, softplus, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Accumulates gradient contributions for parents during the reverse sweep.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
    wants: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    /// Zero-initialised gradient buffer of `v`, or `None` if `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.wants[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, in the order parameters entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

/// A recording tape. Interior mutability lets ops be chained through `&self`.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    param_order: RefCell<Vec<(ParamId, Var)>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            param_order: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: nothing is recorded for the reverse pass.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&[T], &mut GradSink<T>) + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Input leaf that collects a gradient (queried via [`Gradients::wrt`]).
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    pub fn scalar(&self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value_arc(id), store.is_trainable(id));
        self.params.borrow_mut().insert(id, v);
        self.param_order.borrow_mut().push((id, v));
        v
    }

    /// Looks a parameter up by name and brings it onto the tape.
    pub fn named(&self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_leaf(value, false)
    }

    /// Reverse sweep from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut sink = GradSink {
            grads: vec![None; n],
            lens: nodes.iter().map(|nd| nd.value.len()).collect(),
            wants: nodes.iter().map(|nd| nd.requires_grad).collect(),
        };
        if nodes[loss.0].requires_grad {
            sink.grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if let Some(bw) = &nodes[i].backward {
                if let Some(g) = sink.grads[i].take() {
                    bw(&g, &mut sink);
                }
            }
        }
        Ok(Gradients {
            grads: sink.grads,
            params: self.param_order.borrow().clone(),
        })
    }

    // ---------------------------------------------------------------------
    // Elementwise arithmetic
    // ---------------------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "add")?;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.push(out, &[a, b], move |g, s| {
            for p in [a, b] {
                if let Some(d) = s.slot(p) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "sub")?;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect(),
        )?;
        Ok(self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = s.slot(b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "mul")?;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d = *d + g * y;
                }
            }
            if let Some(d) = s.slot(b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d = *d + g * x;
                }
            }
        }))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * c);
            }
        })
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        })
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let av = self.value(a);
        let out = av.map(f);
        let ov = Arc::new(out.clone());
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(av.data()).zip(ov.data()) {
                    *d = *d + g * df(x, y);
                }
            }
        })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Exact-erf GELU: `x·Φ(x)`.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x * normal_cdf(x), |x, _| normal_cdf(x) + x * normal_pdf(x))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Round half away from zero in the forward pass, identity gradient backward.
    pub fn round_ste(&self, a: Var) -> Var {
        self.unary(a, |x| x.round(), |_, _| T::one())
    }

    /// Round half away from zero; blocks gradients. Zero is always `+0`, so
    /// values match those rebuilt from integer symbols bit for bit.
    pub fn round(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.round() + T::zero());
        self.constant(out)
    }

    /// Hard threshold of `sigmoid(x)` at `tau` forward; sigmoid gradient backward.
    pub fn threshold_ste(&self, a: Var, tau: T) -> Var {
        self.unary(
            a,
            move |x| {
                if sigmoid(x) > tau {
                    T::one()
                } else {
                    T::zero()
                }
            },
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() - s)
            },
        )
    }

    // ---------------------------------------------------------------------
    // Reductions and reshaping
    // ---------------------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum());
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let sum = self.sum(a);
        self.scale(sum, T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }))
    }

    /// Channels `[start, end)` of the trailing axis.
    pub fn slice_channels(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.channels();
        if start >= end || end > c {
            return Err(Error::dim(format!("channel slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(av.rows() * w);
        for row in av.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = w;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                    for (d, &g) in drow[start..end].iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                }
            }
        }))
    }

    /// Row `r` of a `[R, C]` table as a `[C]` vector.
    pub fn take_row(&self, a: Var, r: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = match av.shape() {
            &[rows, c] => (rows, c),
            s => return Err(Error::dim(format!("take_row: table must be 2-D, got {s:?}"))),
        };
        if r >= rows {
            return Err(Error::dim(format!("take_row: row {r} of {rows}")));
        }
        let out = Tensor::new(vec![c], av.data()[r * c..(r + 1) * c].to_vec())?;
        Ok(self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                d[r * c..(r + 1) * c].iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.channels(), bv.channels());
        if av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1] {
            return Err(Error::dim(format!(
                "concat: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let out = Tensor::new(shape, data)?;
        let c = ca + cb;
        Ok(self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                for (drow, grow) in d.chunks_exact_mut(ca).zip(g.chunks_exact(c)) {
                    drow.iter_mut().zip(&grow[..ca]).for_each(|(d, &g)| *d = *d + g);
                }
            }
            if let Some(d) = s.slot(b) {
                for (drow, grow) in d.chunks_exact_mut(cb).zip(g.chunks_exact(c)) {
                    drow.iter_mut().zip(&grow[ca..]).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }))
    }

    /// Global mean over all positions, per channel: `[..., C] -> [C]`.
    pub fn mean_positions(&self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.channels();
        let n = av.rows();
        let inv = T::one() / T::of(n as f64);
        let mut acc = vec![T::zero(); c];
        for row in av.data().chunks_exact(c) {
            acc.iter_mut().zip(row).for_each(|(s, &x)| *s = *s + x);
        }
        acc.iter_mut().for_each(|s| *s = *s * inv);
        let out = Tensor::new(vec![c], acc).expect("channel vector");
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                for drow in d.chunks_exact_mut(c) {
                    drow.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * inv);
                }
            }
        })
    }

    /// Keeps the first half of the channels per position and replaces the
    /// second half (0-based channel index `c >= C/2`) by its global spatial mean.
    pub fn partial_average(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.channels();
        if c < 2 || c % 2 != 0 {
            return Err(Error::config(format!(
                "partial average needs an even channel count >= 2, got {c}"
            )));
        }
        let half = c / 2;
        let n = av.rows();
        let inv = T::one() / T::of(n as f64);
        let mut means = vec![T::zero(); c - half];
        for row in av.data().chunks_exact(c) {
            means.iter_mut().zip(&row[half..]).for_each(|(m, &x)| *m = *m + x);
        }
        means.iter_mut().for_each(|m| *m = *m * inv);
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row[half..].copy_from_slice(&means);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                let mut gsum = vec![T::zero(); c - half];
                for grow in g.chunks_exact(c) {
                    gsum.iter_mut().zip(&grow[half..]).for_each(|(s, &g)| *s = *s + g);
                }
                for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for (d, &g) in drow[..half].iter_mut().zip(&grow[..half]) {
                        *d = *d + g;
                    }
                    for (d, &gs) in drow[half..].iter_mut().zip(&gsum) {
                        *d = *d + gs * inv;
                    }
                }
            }
        }))
    }

    // ---------------------------------------------------------------------
    // Channel broadcasting and masking
    // ---------------------------------------------------------------------

    fn check_channel_vec(&self, x: &Tensor<T>, v: &Tensor<T>, op: &str) -> Result<usize> {
        let c = x.channels();
        if v.len() != c {
            return Err(Error::dim(format!(
                "{op}: {} channels vs vector of {}",
                c,
                v.len()
            )));
        }
        Ok(c)
    }

    /// `x ⊙ s` with `s` broadcast over positions.
    pub fn mul_channels(&self, x: Var, sv: Var) -> Result<Var> {
        let (xv, s_) = (self.value(x), self.value(sv));
        let c = self.check_channel_vec(&xv, &s_, "mul_channels")?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(s_.data()).for_each(|(x, &s)| *x = *x * s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, sv], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for ((d, &g), &s) in drow.iter_mut().zip(grow).zip(s_.data()) {
                        *d = *d + g * s;
                    }
                }
            }
            if let Some(d) = sink.slot(sv) {
                for (xrow, grow) in xv.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                        *d = *d + g * x;
                    }
                }
            }
        }))
    }

    /// `x ⊘ s` with `s` broadcast over positions.
    pub fn div_channels(&self, x: Var, sv: Var) -> Result<Var> {
        let inv = self.unary(sv, |s| T::one() / s, |_, y| -(y * y));
        self.mul_channels(x, inv)
    }

    /// `x + b` with `b` broadcast over positions.
    pub fn add_channels(&self, x: Var, bv: Var) -> Result<Var> {
        let (xv, b_) = (self.value(x), self.value(bv));
        let c = self.check_channel_vec(&xv, &b_, "add_channels")?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b_.data()).for_each(|(x, &b)| *x = *x + b);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, bv], move |g, sink| {
            if let Some(d) = sink.slot(x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = sink.slot(bv) {
                for grow in g.chunks_exact(c) {
                    d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }))
    }

    /// Per-position blend `m·a + (1 − m)·b`, where `m` has one value per position.
    /// For `m ∈ {0, 1}` the result equals the selected operand exactly.
    pub fn blend(&self, m: Var, a: Var, b: Var) -> Result<Var> {
        let (mv, av, bv) = (self.value(m), self.value(a), self.value(b));
        same_shape(&av, &bv, "blend")?;
        let c = av.channels();
        if mv.len() != av.rows() {
            return Err(Error::dim(format!(
                "blend: mask of {} positions vs features with {}",
                mv.len(),
                av.rows()
            )));
        }
        let mut data = Vec::with_capacity(av.len());
        for ((&mk, ra), rb) in mv
            .data()
            .iter()
            .zip(av.data().chunks_exact(c))
            .zip(bv.data().chunks_exact(c))
        {
            let keep = T::one() - mk;
            data.extend(ra.iter().zip(rb).map(|(&x, &y)| mk * x + keep * y));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[m, a, b], move |g, s| {
            if let Some(d) = s.slot(m) {
                for (((d, grow), ra), rb) in d
                    .iter_mut()
                    .zip(g.chunks_exact(c))
                    .zip(av.data().chunks_exact(c))
                    .zip(bv.data().chunks_exact(c))
                {
                    let mut acc = T::zero();
                    for ((&g, &x), &y) in grow.iter().zip(ra).zip(rb) {
                        acc = acc + g * (x - y);
                    }
                    *d = *d + acc;
                }
            }
            if let Some(d) = s.slot(a) {
                for ((drow, grow), &mk) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(mv.data()) {
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g * mk);
                }
            }
            if let Some(d) = s.slot(b) {
                for ((drow, grow), &mk) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(mv.data()) {
                    let w = T::one() - mk;
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g * w);
                }
            }
        }))
    }

    /// Rows `idx` of `x` viewed as `[positions, C]`: output `[idx.len(), C]`.
    pub fn gather_rows(&self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        let rows = xv.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather: row {bad} of {rows}")));
        }
        if idx.is_empty() {
            return Err(Error::dim("gather: empty index set"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &g) in d[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d = *d + g;
                    }
                }
            }
        }))
    }

    /// Inverse of [`Graph::gather_rows`] over a partition of positions:
    /// row `k` of part `j` lands at position `parts[j].1[k]` of a `shape` map.
    pub fn scatter_rows(&self, shape: &[usize], parts: &[(Var, Arc<Vec<usize>>)]) -> Result<Var> {
        let c = *shape.last().ok_or_else(|| Error::dim("scatter: empty shape"))?;
        let total: usize = shape.iter().product();
        let rows = total / c;
        let mut data = vec![T::zero(); total];
        for (v, idx) in parts {
            let pv = self.value(*v);
            if pv.len() != idx.len() * c {
                return Err(Error::dim(format!(
                    "scatter: part of {} values for {} rows of {c}",
                    pv.len(),
                    idx.len()
                )));
            }
            for (k, &i) in idx.iter().enumerate() {
                if i >= rows {
                    return Err(Error::dim(format!("scatter: row {i} of {rows}")));
                }
                data[i * c..(i + 1) * c].copy_from_slice(&pv.data()[k * c..(k + 1) * c]);
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        let parents: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let parts: Vec<(Var, Arc<Vec<usize>>)> = parts.to_vec();
        Ok(self.push(out, &parents, move |g, s| {
            for (v, idx) in &parts {
                if let Some(d) = s.slot(*v) {
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &g) in d[k * c..(k + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }))
    }

    /// Nearest-neighbour spatial upsampling of `[H, W, C]` by `f`.
    pub fn upsample_nearest(&self, x: Var, f: usize) -> Result<Var> {
        let xv = self.value(x);
        let (h, w, c) = xv.hwc()?;
        let (ho, wo) = (h * f, w * f);
        let mut data = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                let i = ((oy / f) * w + ox / f) * c;
                data.extend_from_slice(&xv.data()[i..i + c]);
            }
        }
        let out = Tensor::new(vec![ho, wo, c], data)?;
        Ok(self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i = ((oy / f) * w + ox / f) * c;
                        let o = (oy * wo + ox) * c;
                        for (d, &g) in d[i..i + c].iter_mut().zip(&g[o..o + c]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }))
    }

    // ---------------------------------------------------------------------
    // Dense layers
    // ---------------------------------------------------------------------

    /// `y[..., j] = Σ_i x[..., i]·W[i, j] + b[j]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = match wv.shape() {
            &[i, o] => (i, o),
            s => return Err(Error::dim(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        if xv.channels() != cin {
            return Err(Error::dim(format!(
                "linear: input has {} channels, weight expects {cin}",
                xv.channels()
            )));
        }
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != cout {
                    return Err(Error::dim(format!(
                        "linear: bias of {} for {cout} outputs",
                        bv.len()
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = xv.rows();
        let mut data = vec![T::zero(); rows * cout];
        let wd = wv.data();
        for (xrow, orow) in xv.data().chunks_exact(cin).zip(data.chunks_exact_mut(cout)) {
            if let Some(bv) = &bv {
                orow.copy_from_slice(bv.data());
            }
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &wd[i * cout..(i + 1) * cout];
                for (o, &wij) in orow.iter_mut().zip(wrow) {
                    *o = *o + xi * wij;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = cout;
        let out = Tensor::new(shape, data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, move |g, s| {
            if let Some(d) = s.slot(x) {
                let wd = wv.data();
                for (drow, grow) in d.chunks_exact_mut(cin).zip(g.chunks_exact(cout)) {
                    for (i, dx) in drow.iter_mut().enumerate() {
                        let wrow = &wd[i * cout..(i + 1) * cout];
                        let mut acc = T::zero();
                        for (&gj, &wij) in grow.iter().zip(wrow) {
                            acc = acc + gj * wij;
                        }
                        *dx = *dx + acc;
                    }
                }
            }
            if let Some(d) = s.slot(w) {
                for (xrow, grow) in xv.data().chunks_exact(cin).zip(g.chunks_exact(cout)) {
                    for (i, &xi) in xrow.iter().enumerate() {
                        let drow = &mut d[i * cout..(i + 1) * cout];
                        for (dw, &gj) in drow.iter_mut().zip(grow) {
                            *dw = *dw + xi * gj;
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(d) = s.slot(b) {
                    for grow in g.chunks_exact(cout) {
                        d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }))
    }

    /// Normalises each position over its channels (ε = 1e-6), then applies `γ`, `β`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = self.check_channel_vec(&xv, &gv, "layer_norm")?;
        self.check_channel_vec(&xv, &bv, "layer_norm")?;
        let eps = T::of(LAYER_NORM_EPS);
        let inv_c = T::one() / T::of(c as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.len()];
        for (r, xrow) in xv.data().chunks_exact(c).enumerate() {
            let mean = xrow.iter().copied().sum::<T>() * inv_c;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let h = (xrow[k] - mean) * inv;
                xhat[r * c + k] = h;
                data[r * c + k] = gv.data()[k] * h + bv.data()[k];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, gamma, beta], move |g, s| {
            if let Some(d) = s.slot(gamma) {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((d, &g), &h) in d.iter_mut().zip(grow).zip(hrow) {
                        *d = *d + g * h;
                    }
                }
            }
            if let Some(d) = s.slot(beta) {
                for grow in g.chunks_exact(c) {
                    d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                }
            }
            if let Some(d) = s.slot(x) {
                let gam = gv.data();
                for (r, (drow, grow)) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for k in 0..c {
                        let gh = grow[k] * gam[k];
                        m1 = m1 + gh;
                        m2 = m2 + gh * hrow[k];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    let inv = inv_std[r];
                    for k in 0..c {
                        let gh = grow[k] * gam[k];
                        drow[k] = drow[k] + inv * (gh - m1 - hrow[k] * m2);
                    }
                }
            }
        }))
    }

    // ---------------------------------------------------------------------
    // Convolutions (HWC layout, kernels `[K, K, C_in, C_out]`)
    // ---------------------------------------------------------------------

    /// Cross-correlation with zero padding `(K−1)/2` and stride `s`; output `[H/s, W/s, C_out]`.
    pub fn conv2d(&self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (h, w, cin) = xv.hwc()?;
        let geom = ConvGeom::new(kv.shape(), cin, stride, "conv2d")?;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::dim(format!(
                "conv2d: {h}x{w} not divisible by stride {stride}"
            )));
        }
        let (ho, wo) = (h / stride, w / stride);
        let cout = geom.cout;
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            if bv.len() != cout {
                return Err(Error::dim("conv2d: bias length mismatch"));
            }
        }
        let mut data = vec![T::zero(); ho * wo * cout];
        let kd = kv.data();
        let xd = xv.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut data[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                if let Some(bv) = &bv {
                    orow.copy_from_slice(bv.data());
                }
                for ky in 0..geom.k {
                    let Some(iy) = geom.src(oy, ky, h) else { continue };
                    for kx in 0..geom.k {
                        let Some(ix) = geom.src(ox, kx, w) else { continue };
                        let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (ky * geom.k + kx) * cin * cout;
                        for (ci, &xv_) in xrow.iter().enumerate() {
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, &kw) in orow.iter_mut().zip(krow) {
                                *o = *o + xv_ * kw;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![ho, wo, cout], data)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(out, &parents, move |g, s| {
            let kd = kv.data();
            let xd = xv.data();
            if let Some(d) = s.slot(x) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                        for ky in 0..geom.k {
                            let Some(iy) = geom.src(oy, ky, h) else { continue };
                            for kx in 0..geom.k {
                                let Some(ix) = geom.src(ox, kx, w) else { continue };
                                let drow = &mut d[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                                let kbase = (ky * geom.k + kx) * cin * cout;
                                for (ci, dx) in drow.iter_mut().enumerate() {
                                    let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    let mut acc = T::zero();
                                    for (&gj, &kw) in grow.iter().zip(krow) {
                                        acc = acc + gj * kw;
                                    }
                                    *dx = *dx + acc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(d) = s.slot(k) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                        for ky in 0..geom.k {
                            let Some(iy) = geom.src(oy, ky, h) else { continue };
                            for kx in 0..geom.k {
                                let Some(ix) = geom.src(ox, kx, w) else { continue };
                                let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                                let kbase = (ky * geom.k + kx) * cin * cout;
                                for (ci, &xv_) in xrow.iter().enumerate() {
                                    let drow = &mut d[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (dk, &gj) in drow.iter_mut().zip(grow) {
                                        *dk = *dk + xv_ * gj;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(d) = s.slot(b) {
                    for grow in g.chunks_exact(cout) {
                        d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }))
    }

    /// Transpose of [`Graph::conv2d`] with respect to its input: `[h, w, C_in] -> [h·s, w·s, C_out]`.
    pub fn conv_transpose2d(&self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (h, w, cin) = xv.hwc()?;
        let geom = ConvGeom::new(kv.shape(), cin, stride, "conv_transpose2d")?;
        let (ho, wo) = (h * stride, w * stride);
        let cout = geom.cout;
        let bv = b.map(|b| self.value(b));
        let mut data = vec![T::zero(); ho * wo * cout];
        if let Some(bv) = &bv {
            if bv.len() != cout {
                return Err(Error::dim("conv_transpose2d: bias length mismatch"));
            }
            for row in data.chunks_exact_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let kd = kv.data();
        let xd = xv.data();
        for iy in 0..h {
            for ix in 0..w {
                let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                for ky in 0..geom.k {
                    let Some(oy) = geom.src(iy, ky, ho) else { continue };
                    for kx in 0..geom.k {
                        let Some(ox) = geom.src(ix, kx, wo) else { continue };
                        let orow = &mut data[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                        let kbase = (ky * geom.k + kx) * cin * cout;
                        for (ci, &xv_) in xrow.iter().enumerate() {
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, &kw) in orow.iter_mut().zip(krow) {
                                *o = *o + xv_ * kw;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![ho, wo, cout], data)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(out, &parents, move |g, s| {
            let kd = kv.data();
            let xd = xv.data();
            if let Some(d) = s.slot(x) {
                for iy in 0..h {
                    for ix in 0..w {
                        let drow = &mut d[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for ky in 0..geom.k {
                            let Some(oy) = geom.src(iy, ky, ho) else { continue };
                            for kx in 0..geom.k {
                                let Some(ox) = geom.src(ix, kx, wo) else { continue };
                                let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                                let kbase = (ky * geom.k + kx) * cin * cout;
                                for (ci, dx) in drow.iter_mut().enumerate() {
                                    let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    let mut acc = T::zero();
                                    for (&gj, &kw) in grow.iter().zip(krow) {
                                        acc = acc + gj * kw;
                                    }
                                    *dx = *dx + acc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(d) = s.slot(k) {
                for iy in 0..h {
                    for ix in 0..w {
                        let xrow = &xd[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for ky in 0..geom.k {
                            let Some(oy) = geom.src(iy, ky, ho) else { continue };
                            for kx in 0..geom.k {
                                let Some(ox) = geom.src(ix, kx, wo) else { continue };
                                let grow = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                                let kbase = (ky * geom.k + kx) * cin * cout;
                                for (ci, &xv_) in xrow.iter().enumerate() {
                                    let drow = &mut d[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (dk, &gj) in drow.iter_mut().zip(grow) {
                                        *dk = *dk + xv_ * gj;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                if let Some(d) = s.slot(b) {
                    for grow in g.chunks_exact(cout) {
                        d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }))
    }

    /// Depthwise stride-1 convolution, kernel `[K, K, C]`, zero padding `(K−1)/2`.
    pub fn depthwise_conv2d(&self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (h, w, c) = xv.hwc()?;
        let ks = match kv.shape() {
            &[a, bb, cc] if a == bb && cc == c => a,
            s => {
                return Err(Error::dim(format!(
                    "depthwise_conv2d: kernel {s:?} for {c} channels"
                )))
            }
        };
        let pad = (ks - 1) / 2;
        let bv = b.map(|b| self.value(b));
        let mut data = vec![T::zero(); h * w * c];
        if let Some(bv) = &bv {
            if bv.len() != c {
                return Err(Error::dim("depthwise_conv2d: bias length mismatch"));
            }
            for row in data.chunks_exact_mut(c) {
                row.copy_from_slice(bv.data());
            }
        }
        let src = move |o: usize, kk: usize, n: usize| -> Option<usize> {
            let i = (o + kk).checked_sub(pad)?;
            (i < n).then_some(i)
        };
        let kd = kv.data();
        let xd = xv.data();
        for oy in 0..h {
            for ox in 0..w {
                let orow = &mut data[(oy * w + ox) * c..(oy * w + ox + 1) * c];
                for ky in 0..ks {
                    let Some(iy) = src(oy, ky, h) else { continue };
                    for kx in 0..ks {
                        let Some(ix) = src(ox, kx, w) else { continue };
                        let xrow = &xd[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        let krow = &kd[(ky * ks + kx) * c..(ky * ks + kx + 1) * c];
                        for ((o, &xv_), &kw) in orow.iter_mut().zip(xrow).zip(krow) {
                            *o = *o + xv_ * kw;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![h, w, c], data)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(out, &parents, move |g, s| {
            let kd = kv.data();
            let xd = xv.data();
            let want_x = s.wants[x.0];
            let want_k = s.wants[k.0];
            let mut dx = want_x.then(|| vec![T::zero(); h * w * c]);
            let mut dk = want_k.then(|| vec![T::zero(); ks * ks * c]);
            for oy in 0..h {
                for ox in 0..w {
                    let grow = &g[(oy * w + ox) * c..(oy * w + ox + 1) * c];
                    for ky in 0..ks {
                        let Some(iy) = src(oy, ky, h) else { continue };
                        for kx in 0..ks {
                            let Some(ix) = src(ox, kx, w) else { continue };
                            let xi = (iy * w + ix) * c;
                            let ki = (ky * ks + kx) * c;
                            if let Some(dx) = dx.as_mut() {
                                for j in 0..c {
                                    dx[xi + j] = dx[xi + j] + grow[j] * kd[ki + j];
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                for j in 0..c {
                                    dk[ki + j] = dk[ki + j] + grow[j] * xd[xi + j];
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(src_g), Some(d)) = (dx, s.slot(x)) {
                d.iter_mut().zip(src_g).for_each(|(d, v)| *d = *d + v);
            }
            if let (Some(src_g), Some(d)) = (dk, s.slot(k)) {
                d.iter_mut().zip(src_g).for_each(|(d, v)| *d = *d + v);
            }
            if let Some(b) = b {
                if let Some(d) = s.slot(b) {
                    for grow in g.chunks_exact(c) {
                        d.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
        }))
    }

    // ---------------------------------------------------------------------
    // Probability models and losses
    // ---------------------------------------------------------------------

    /// Mass of the unit bin centred on `y` under `N(μ, σ²)`, elementwise.
    pub fn gaussian_likelihood(&self, y: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (yv, mv, sv) = (self.value(y), self.value(mu), self.value(sigma));
        same_shape(&yv, &mv, "gaussian_likelihood")?;
        same_shape(&yv, &sv, "gaussian_likelihood")?;
        let half = T::of(0.5);
        let data: Vec<T> = yv
            .data()
            .iter()
            .zip(mv.data())
            .zip(sv.data())
            .map(|((&y, &m), &s)| {
                let v = (y - m).abs();
                normal_cdf((half - v) / s) - normal_cdf((-half - v) / s)
            })
            .collect();
        let out = Tensor::new(yv.shape().to_vec(), data)?;
        Ok(self.push(out, &[y, mu, sigma], move |g, sink| {
            let n = g.len();
            let mut dy = vec![T::zero(); n];
            let mut ds = vec![T::zero(); n];
            for i in 0..n {
                let diff = yv.data()[i] - mv.data()[i];
                let s = sv.data()[i];
                let v = diff.abs();
                let a = (half - v) / s;
                let c = (-half - v) / s;
                let (pa, pc) = (normal_pdf(a), normal_pdf(c));
                let dv = (pc - pa) / s;
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                dy[i] = g[i] * sign * dv;
                ds[i] = -g[i] * (a * pa - c * pc) / s;
            }
            if let Some(d) = sink.slot(y) {
                d.iter_mut().zip(&dy).for_each(|(d, &v)| *d = *d + v);
            }
            if let Some(d) = sink.slot(mu) {
                d.iter_mut().zip(&dy).for_each(|(d, &v)| *d = *d - v);
            }
            if let Some(d) = sink.slot(sigma) {
                d.iter_mut().zip(&ds).for_each(|(d, &v)| *d = *d + v);
            }
        }))
    }

    /// Mass of the unit bin centred on `z` under a per-channel logistic with
    /// location `loc[C]` and scale `exp(log_scale[C])`.
    pub fn logistic_likelihood(&self, z: Var, loc: Var, log_scale: Var) -> Result<Var> {
        let (zv, lv, sv) = (self.value(z), self.value(loc), self.value(log_scale));
        let c = self.check_channel_vec(&zv, &lv, "logistic_likelihood")?;
        self.check_channel_vec(&zv, &sv, "logistic_likelihood")?;
        let half = T::of(0.5);
        let scales: Vec<T> = sv.data().iter().map(|&l| l.exp()).collect();
        let mut data = Vec::with_capacity(zv.len());
        for row in zv.data().chunks_exact(c) {
            for k in 0..c {
                let v = (row[k] - lv.data()[k]).abs();
                let s = scales[k];
                data.push(sigmoid((half - v) / s) - sigmoid((-half - v) / s));
            }
        }
        let out = Tensor::new(zv.shape().to_vec(), data)?;
        Ok(self.push(out, &[z, loc, log_scale], move |g, sink| {
            let dsig = |t: T| {
                let s = sigmoid(t);
                s * (T::one() - s)
            };
            let n = g.len();
            let mut dz = vec![T::zero(); n];
            let mut dls = vec![T::zero(); c];
            for (r, row) in zv.data().chunks_exact(c).enumerate() {
                for k in 0..c {
                    let i = r * c + k;
                    let diff = row[k] - lv.data()[k];
                    let v = diff.abs();
                    let s = scales[k];
                    let a = (half - v) / s;
                    let cc = (-half - v) / s;
                    let (pa, pc) = (dsig(a), dsig(cc));
                    let dv = (pc - pa) / s;
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    dz[i] = g[i] * sign * dv;
                    // d/ds then chain through s = exp(log_scale)
                    dls[k] = dls[k] - g[i] * (a * pa - cc * pc);
                }
            }
            if let Some(d) = sink.slot(z) {
                d.iter_mut().zip(&dz).for_each(|(d, &v)| *d = *d + v);
            }
            if let Some(d) = sink.slot(loc) {
                for row in dz.chunks_exact(c) {
                    d.iter_mut().zip(row).for_each(|(d, &v)| *d = *d - v);
                }
            }
            if let Some(d) = sink.slot(log_scale) {
                d.iter_mut().zip(&dls).for_each(|(d, &v)| *d = *d + v);
            }
        }))
    }

    /// Mean cross-entropy of `logits[N, K]` against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.channels();
        let n = lv.rows();
        if labels.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::domain(format!("class {bad} out of {k}")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, row) in lv.data().chunks_exact(k).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total = total + lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let inv_n = T::one() / T::of(n as f64);
        let out = Tensor::scalar(total * inv_n);
        let labels = labels.to_vec();
        Ok(self.push(out, &[logits], move |g, s| {
            if let Some(d) = s.slot(logits) {
                for r in 0..n {
                    for j in 0..k {
                        let onehot = if labels[r] == j { T::one() } else { T::zero() };
                        d[r * k + j] = d[r * k + j] + g[0] * (probs[r * k + j] - onehot) * inv_n;
                    }
                }
            }
        }))
    }
}

/// LayerNorm stabiliser.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy)]
struct ConvGeom {
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(kshape: &[usize], cin: usize, stride: usize, op: &str) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim(format!("{op}: zero stride")));
        }
        match *kshape {
            [a, b, ci, co] if a == b && ci == cin => Ok(Self {
                k: a,
                cout: co,
                stride,
                pad: (a - 1) / 2,
            }),
            _ => Err(Error::dim(format!(
                "{op}: kernel {kshape:?} incompatible with {cin} input channels"
            ))),
        }
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `kk`.
    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + kk).checked_sub(self.pad)?;
        (i < n).then_some(i)
    }
}
