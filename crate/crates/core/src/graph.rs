//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameters are borrowed from a [`ParamStore`] rather than copied; the
//! backward pass returns [`Gradients`] that the caller folds back into the
//! store once the graph is dropped.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Normalization momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside the normalization square root.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    HardSwish,
    Sigmoid,
}

impl Activation {
    pub fn apply<F: Real>(self, t: F) -> F {
        match self {
            Activation::Relu => t.max(F::zero()),
            Activation::HardSwish => {
                let three = F::lit(3.0);
                t * (t + three).max(F::zero()).min(F::lit(6.0)) / F::lit(6.0)
            }
            Activation::Sigmoid => sigmoid(t),
        }
    }

    /// Derivative at input `t` given the forward output `y`.
    fn derivative<F: Real>(self, t: F, y: F) -> F {
        match self {
            Activation::Relu => {
                if t > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::HardSwish => {
                let three = F::lit(3.0);
                if t <= -three {
                    F::zero()
                } else if t >= three {
                    F::one()
                } else {
                    (t + t + three) / F::lit(6.0)
                }
            }
            Activation::Sigmoid => y * (F::one() - y),
        }
    }
}

#[inline]
pub fn sigmoid<F: Real>(t: F) -> F {
    if t >= F::zero() {
        F::one() / (F::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (F::one() + e)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Running-statistics buffers of one normalization layer.
#[derive(Debug, Clone, Copy)]
pub struct BnStats {
    pub mean: ParamId,
    pub var: ParamId,
    /// Single-element counter of recorded batches.
    pub count: ParamId,
}

/// Pending running-statistics update produced by a training-mode forward.
#[derive(Debug, Clone)]
pub struct StatUpdate<F> {
    pub stats: BnStats,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Dense { x: Var, w: Var, b: Option<Var> },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulChannel { x: Var, gate: Var },
    Upsample2x { x: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    BatchNorm { x: Var, scale: Var, shift: Var, mean: Vec<F>, inv_std: Vec<F> },
    Sum { x: Var },
    Scale { x: Var, factor: F },
    Custom { inputs: Vec<Var>, grads: Vec<Vec<F>> },
}

#[derive(Debug)]
struct Node<F> {
    /// `None` for parameters, which are read from the store.
    value: Option<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    training: bool,
    stat_updates: Vec<StatUpdate<F>>,
}

/// Result of a backward pass: parameter gradients (one entry per distinct
/// tracked parameter) and gradients of tracked inputs.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    pub params: Vec<(ParamId, Vec<F>)>,
    pub inputs: Vec<(Var, Vec<F>)>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn input(&self, var: Var) -> Option<&[F]> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, g)| g.as_slice())
    }

    /// Adds every parameter gradient into the store's grad buffers.
    /// Untracked tensors are skipped by [`Tensor::accumulate_grad`].
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>, training: bool) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0] {
            Node { value: Some(t), .. } => t,
            Node { op: Op::Param(id), .. } => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Constant input; no gradient is reported for it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported in [`Gradients::inputs`].
    pub fn input_tracked(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.store.get(id).requires_grad();
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        let bshape = b.map(|b| self.shape(b));
        let (n, h, wd, ho, wo) = conv::check_shapes(spec, xs.shape(), ws.shape(), bshape)?;
        let out = conv::forward(
            spec,
            xs.data(),
            (n, h, wd),
            ws.data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[n, spec.out_channels, ho, wo], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(t, Op::Conv { x, w, b, spec: *spec }, ng))
    }

    /// `y = x W^T + b` for `x: [N, Cin]`, `W: [Cout, Cin]`, `b: [Cout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        let (n, cin) = match *xs.shape() {
            [n, c] => (n, c),
            ref s => return Err(Error::shape("dense", format!("input must be [N, Cin], got {s:?}"))),
        };
        let cout = match *ws.shape() {
            [o, i] if i == cin => o,
            ref s => {
                return Err(Error::shape(
                    "dense",
                    format!("weight must be [Cout, {cin}], got {s:?}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "dense",
                    format!("bias must be [{cout}], got {:?}", self.shape(b)),
                ));
            }
        }
        let mut out = vec![F::zero(); n * cout];
        gemm(
            MatRef::row_major(xs.data(), n, cin),
            MatRef::row_major(ws.data(), cout, cin).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                add_into(row, bias);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[n, cout], out)?;
        Ok(self.push(t, Op::Dense { x, w, b }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xs = self.value(x);
        let data = xs.data().iter().map(|&t| kind.apply(t)).collect();
        let t = Tensor::new(xs.shape(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::Act { x, kind }, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    /// `x[n,c,h,w] * gate[n,c]`; `gate` is `[N,C,1,1]` or `[N,C]`.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let gs = self.shape(gate);
        if gs != [n, c, 1, 1] && gs != [n, c] {
            return Err(Error::shape(
                "mul_broadcast_channel",
                format!("gate must be [{n}, {c}, 1, 1], got {gs:?}"),
            ));
        }
        let (xv, gv) = (self.value(x).data(), self.value(gate).data());
        let p = h * w;
        let mut data = Vec::with_capacity(xv.len());
        for (plane, s) in xv.chunks(p).zip(gv) {
            data.extend(plane.iter().map(|v| *v * *s));
        }
        let t = Tensor::new(&[n, c, h, w], data)?;
        let ng = self.needs(x) || self.needs(gate);
        Ok(self.push(t, Op::MulChannel { x, gate }, ng))
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![F::zero(); n * c * h2 * w2];
        for (plane, dst) in src.chunks(h * w).zip(data.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                let row = &plane[(y / 2) * w..][..w];
                for (xo, d) in dst[y * w2..][..w2].iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Upsample2x { x }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = F::one() / F::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::GlobalAvgPool { x }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Per-channel normalization. Training graphs use batch statistics and
    /// queue a running-statistics update; inference graphs use the stored
    /// running statistics.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, stats: BnStats) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for v in [scale, shift] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_affine",
                    format!("scale/shift must be [{c}], got {:?}", self.shape(v)),
                ));
            }
        }
        let eps = F::lit(BN_EPS);
        let p = h * w;
        let count = n * p;
        let xv = self.value(x).data();
        let mut pending = None;
        let (mean, var) = if self.training {
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ch in 0..c {
                let mut s = F::zero();
                for img in 0..n {
                    s += xv[(img * c + ch) * p..][..p].iter().copied().sum::<F>();
                }
                let m = s / F::lit(count as f64);
                let mut q = F::zero();
                for img in 0..n {
                    q += xv[(img * c + ch) * p..][..p].iter().map(|v| (*v - m) * (*v - m)).sum::<F>();
                }
                mean[ch] = m;
                var[ch] = q / F::lit(count as f64);
            }
            let unbias = if count > 1 {
                F::lit(count as f64 / (count - 1) as f64)
            } else {
                F::one()
            };
            pending = Some(StatUpdate {
                stats,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|v| *v * unbias).collect(),
            });
            (mean, var)
        } else {
            if self.store.get(stats.count).data()[0] <= F::zero() {
                return Err(Error::StatsNotRecorded(String::from(self.store.name(stats.mean))));
            }
            (
                self.store.get(stats.mean).data().to_vec(),
                self.store.get(stats.var).data().to_vec(),
            )
        };
        let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut data = Vec::with_capacity(xv.len());
        for img in 0..n {
            for ch in 0..c {
                let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                data.extend(xv[(img * c + ch) * p..][..p].iter().map(|v| (*v - m) * s * g + b));
            }
        }
        let t = Tensor::new(&[n, c, h, w], data)?;
        self.stat_updates.extend(pending);
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let xs = self.value(x);
        let t = Tensor::new(xs.shape(), xs.data().iter().map(|v| *v * factor).collect()).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::Scale { x, factor }, ng)
    }

    /// Scalar node whose local gradient w.r.t. each input is precomputed by
    /// the caller (used by the fused detection loss).
    pub fn custom_scalar(&mut self, inputs: &[Var], value: F, grads: Vec<Vec<F>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape("custom", "one gradient per input"));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).numel() != g.len() {
                return Err(Error::shape(
                    "custom",
                    format!("gradient of length {} for input of {:?}", g.len(), self.shape(*v)),
                ));
            }
        }
        let ng = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        ))
    }

    /// Running-statistics updates queued by training-mode normalization.
    pub fn into_stat_updates(self) -> Vec<StatUpdate<F>> {
        self.stat_updates
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => out.inputs.push((Var(i), g)),
                Op::Param(id) => match out.params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => add_into(acc, &g),
                    None => out.params.push((*id, g)),
                },
                op => self.propagate(op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => add_into(acc, &delta),
            None => grads[v.0] = Some(delta),
        }
    }

    /// Zeroed buffer for `v` if it needs a gradient.
    fn zeros_for(&self, v: Var) -> Option<Vec<F>> {
        self.needs(v).then(|| vec![F::zero(); self.value(v).numel()])
    }

    fn propagate(&self, op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, spec } => {
                let xs = self.value(*x);
                let (n, _, h, wd) = xs.dims4().expect("validated");
                let mut dx = self.zeros_for(*x);
                let mut dw = self.zeros_for(*w);
                let mut db = b.and_then(|b| self.zeros_for(b));
                conv::backward(
                    spec,
                    xs.data(),
                    (n, h, wd),
                    self.value(*w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, cin) = (xs.shape()[0], xs.shape()[1]);
                let cout = ws.shape()[0];
                let dy = MatRef::row_major(g, n, cout);
                if let Some(mut dx) = self.zeros_for(*x) {
                    gemm(dy, MatRef::row_major(ws.data(), cout, cin), &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if let Some(mut dw) = self.zeros_for(*w) {
                    gemm(dy.t(), MatRef::row_major(xs.data(), n, cin), &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if let Some(mut db) = self.zeros_for(*b) {
                        for row in g.chunks(cout) {
                            add_into(&mut db, row);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Act { x, kind } => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(g)
                    .map(|(&t, &gv)| gv * kind.derivative(t, kind.apply(t)))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| *g * *b).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::MulChannel { x, gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate).data());
                let (_, _, h, w) = xv.dims4().expect("validated");
                let p = h * w;
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for (plane, s) in g.chunks(p).zip(gv) {
                        dx.extend(plane.iter().map(|v| *v * *s));
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gate) {
                    let ds = g
                        .chunks(p)
                        .zip(xv.data().chunks(p))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| *a * *b).sum())
                        .collect();
                    self.accumulate(grads, *gate, ds);
                }
            }
            Op::Upsample2x { x } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("validated");
                let w2 = 2 * w;
                let mut dx = vec![F::zero(); self.value(*x).numel()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xo in 0..w2 {
                            dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("validated");
                let inv = F::one() / F::lit((h * w) as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for gv in g {
                    dx.extend(std::iter::repeat_n(*gv * inv, h * w));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => self.batch_norm_backward(*x, *scale, *shift, mean, inv_std, g, grads),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| *v * *factor).collect());
            }
            Op::Custom { inputs, grads: local } => {
                for (v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, lg.iter().map(|d| *d * g[0]).collect());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[F],
        inv_std: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (n, c, h, w) = self.value(x).dims4().expect("validated");
        let p = h * w;
        let xv = self.value(x).data();
        let gamma = self.value(scale).data();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * p;
                for (xv, gv) in xv[off..][..p].iter().zip(&g[off..][..p]) {
                    dgamma[ch] += *gv * (*xv - mean[ch]) * inv_std[ch];
                    dbeta[ch] += *gv;
                }
            }
        }
        if self.needs(x) {
            let mut dx = vec![F::zero(); xv.len()];
            let count = F::lit((n * p) as f64);
            for ch in 0..c {
                let k = gamma[ch] * inv_std[ch];
                // With batch statistics the mean and variance depend on x too.
                let (sum_g, sum_gx) = if self.training {
                    (dbeta[ch] / count, dgamma[ch] / count)
                } else {
                    (F::zero(), F::zero())
                };
                for img in 0..n {
                    let off = (img * c + ch) * p;
                    for ((d, xv), gv) in dx[off..][..p].iter_mut().zip(&xv[off..][..p]).zip(&g[off..][..p]) {
                        let xhat = (*xv - mean[ch]) * inv_std[ch];
                        *d = k * (*gv - sum_g - xhat * sum_gx);
                    }
                }
            }
            self.accumulate(grads, x, dx);
        }
        self.accumulate(grads, scale, dgamma);
        self.accumulate(grads, shift, dbeta);
    }
}

impl<F: Real> ParamStore<F> {
    /// Folds queued training-mode statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<F>]) {
        let m = F::lit(BN_MOMENTUM);
        for u in updates {
            for (dst, src) in [(u.stats.mean, &u.batch_mean), (u.stats.var, &u.batch_var)] {
                for (r, b) in self.get_mut(dst).data_mut().iter_mut().zip(src) {
                    *r = (F::one() - m) * *r + m * *b;
                }
            }
            self.get_mut(u.stats.count).data_mut()[0] += F::one();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(3.0f64), 3.0);
        assert_eq!(Activation::HardSwish.apply(3.0f64), 3.0);
        assert_eq!(Activation::HardSwish.apply(-3.0f64), 0.0);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300 && sigmoid(800.0f64) == 1.0);
    }

    #[test]
    fn linear_loss_gradient_is_the_input() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(), ParamKind::Trainable);
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let wv = g.param(w);
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap(), &[1.0, 2.0, 3.0]);
        drop(g);
        grads.accumulate_into(&mut store);
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_a_quarter() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input_tracked(Tensor::scalar(0.0));
        let s = g.activation(x, Activation::Sigmoid);
        let loss = g.scale(s, 3.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.input(x).unwrap(), &[0.75]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input_tracked(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input_tracked(Tensor::full(&[1, 1, 2, 3], 5.0));
        let up = g.upsample_nearest_2x(x).unwrap();
        assert_eq!(g.shape(up), &[1, 1, 4, 6]);
        assert!(g.value(up).data().iter().all(|v| *v == 5.0));
        let loss = g.sum(up);
        let grads = g.backward(loss).unwrap();
        assert!(grads.input(x).unwrap().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn global_avg_pool_means() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let z = g.input(Tensor::zeros(&[2, 3, 4, 5]));
        let pz = g.global_avg_pool(z).unwrap();
        assert_eq!(g.shape(pz), &[2, 3, 1, 1]);
        assert!(g.value(pz).data().iter().all(|v| *v == 0.0));
        let c = g.input(Tensor::full(&[1, 2, 3, 3], 7.25));
        let pc = g.global_avg_pool(c).unwrap();
        assert!(g.value(pc).data().iter().all(|v| (*v - 7.25).abs() < 1e-12));
    }

    #[test]
    fn dense_hand_case() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap(), ParamKind::Trainable);
        let b = store.add("b", Tensor::zeros(&[2]), ParamKind::Trainable);
        let z = store.add("z", Tensor::zeros(&[2, 2]), ParamKind::Trainable);
        let b2 = store.add("b2", Tensor::new(&[2], vec![0.5, -0.5]).unwrap(), ParamKind::Trainable);
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let (wv, bv, zv, b2v) = (g.param(w), g.param(b), g.param(z), g.param(b2));
        let y = g.dense(x, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
        let y0 = g.dense(x, zv, Some(b2v)).unwrap();
        assert_eq!(g.value(y0).data(), &[0.5, -0.5]);
        let bad = g.input(Tensor::zeros(&[1, 3]));
        assert!(g.dense(bad, wv, None).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let a = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0));
        let neg = g.scale(a, -1.0);
        let s = g.add(a, neg).unwrap();
        assert!(g.value(s).data().iter().all(|v| *v == 0.0));
        let ones = g.input(Tensor::full(&[1, 2, 1, 1], 1.0));
        let m1 = g.mul_channel(a, ones).unwrap();
        assert_eq!(g.value(m1), g.value(a));
        let zeros = g.input(Tensor::zeros(&[1, 2, 1, 1]));
        let m0 = g.mul_channel(a, zeros).unwrap();
        assert!(g.value(m0).data().iter().all(|v| *v == 0.0));
        let wrong = g.input(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(g.mul_channel(a, wrong).is_err());
        let other = g.input(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(g.add(a, other).is_err());
    }

    fn bn_store() -> (ParamStore<f64>, ParamId, ParamId, BnStats) {
        let mut s = ParamStore::new();
        let scale = s.add("bn.weight", Tensor::full(&[1], 1.0), ParamKind::Trainable);
        let shift = s.add("bn.bias", Tensor::zeros(&[1]), ParamKind::Trainable);
        let stats = BnStats {
            mean: s.add("bn.running_mean", Tensor::zeros(&[1]), ParamKind::Buffer),
            var: s.add("bn.running_var", Tensor::full(&[1], 1.0), ParamKind::Buffer),
            count: s.add("bn.count", Tensor::zeros(&[1]), ParamKind::Buffer),
        };
        (s, scale, shift, stats)
    }

    #[test]
    fn batch_affine_train_and_infer() {
        let (mut store, scale, shift, stats) = bn_store();
        {
            let mut g = Graph::new(&store, false);
            let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
            let (a, b) = (g.param(scale), g.param(shift));
            assert!(matches!(g.batch_norm(x, a, b, stats), Err(Error::StatsNotRecorded(_))));
        }
        // zero-mean, unit-variance batch passes through
        let xs = [-1.0, 1.0, -1.0, 1.0];
        let updates = {
            let mut g = Graph::new(&store, true);
            let x = g.input(Tensor::new(&[1, 1, 2, 2], xs.to_vec()).unwrap());
            let (a, b) = (g.param(scale), g.param(shift));
            let y = g.batch_norm(x, a, b, stats).unwrap();
            for (o, i) in g.value(y).data().iter().zip(xs) {
                assert!((o - i).abs() < 1e-5);
            }
            let c = g.input(Tensor::full(&[2, 1, 2, 2], 3.0));
            let yc = g.batch_norm(c, a, b, stats).unwrap();
            assert!(g.value(yc).data().iter().all(|v| v.abs() < 1e-12));
            g.into_stat_updates()
        };
        store.apply_stat_updates(&updates[..1]);
        // running mean 0, var 0.9 + 0.1 * 4/3
        let rv = store.get(stats.var).data()[0];
        assert!((rv - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
        store.get_mut(stats.mean).data_mut()[0] = 2.0;
        store.get_mut(stats.var).data_mut()[0] = 4.0;
        store.get_mut(scale).data_mut()[0] = 3.0;
        store.get_mut(shift).data_mut()[0] = 0.5;
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::new(&[1, 1, 1, 1], vec![6.0]).unwrap());
        let (a, b) = (g.param(scale), g.param(shift));
        let y = g.batch_norm(x, a, b, stats).unwrap();
        let expect = (6.0 - 2.0) / (4.0f64 + BN_EPS).sqrt() * 3.0 + 0.5;
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    }
}
