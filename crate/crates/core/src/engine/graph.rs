//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether ops keep what backward needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recording {
    On,
    Off,
}

/// Gather table over channel planes: output cell `i` copies input cell
/// `index[i]`, or is zero when `index[i] < 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGather {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub index: Arc<[isize]>,
}

enum Op<T: Real> {
    Leaf,
    Param,
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { x: Var, c: T },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    GlobalAvgPool(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { x: Var, table: Arc<PlaneGather> },
    Conv { x: Var, w: Var, b: Option<Var>, groups: usize },
    Linear { x: Var, w: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var, weights: Option<Arc<[T]>>, denom: T },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse { .. } => "mse",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Param => vec![],
            Op::Add { a, b, .. } | Op::Sub { a, b } | Op::Mul { a, b, .. } => vec![a, b],
            Op::Scale { x, .. }
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Gather { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Mse { pred, target, .. } => vec![pred, target],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.by_node[v.0].as_ref().map(|g| (id, g)))
    }

    /// Adds every reached parameter gradient into `store`; unreached ones are untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }
}

/// A single recording of a forward computation.
pub struct Graph<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    recording: Recording,
    backward_done: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph without parameters (inputs only).
    pub fn new(recording: Recording) -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            recording,
            backward_done: false,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>, recording: Recording) -> Self {
        Self {
            store: Some(store),
            ..Self::new(recording)
        }
    }

    pub fn recording(&self) -> Recording {
        self.recording
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = self.recording == Recording::On
            && match op {
                Op::Param => true,
                _ => op.inputs().iter().any(|&i| self.needs(i)),
            };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant or input tensor. With `requires_grad` its gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].needs_grad = requires_grad && self.recording == Recording::On;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && !sa.is_empty() && sa[0] == sb[0] {
            Ok(true)
        } else {
            Err(Error::shape(
                op,
                format!("cannot combine {sa:?} with {sb:?} (equal shapes or per-channel [C] required)"),
            ))
        }
    }

    /// `a + b`; `b` may be a per-channel vector broadcast over axis 0.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let out = binary(self.value(a), self.value(b), broadcast, |x, y| x + y);
        self.push(out, Op::Add { a, b, broadcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = binary(self.value(a), self.value(b), false, |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    /// `a * b`; `b` may be a per-channel vector broadcast over axis 0.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let out = binary(self.value(a), self.value(b), broadcast, |x, y| x * y);
        self.push(out, Op::Mul { a, b, broadcast })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    /// Per-channel spatial mean, `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "zero spatial extent"));
        }
        let n = T::cast((h * w) as f64);
        let out: Vec<T> = (0..c)
            .map(|ch| t.channel(ch).iter().copied().sum::<T>() / n)
            .collect();
        self.push(Tensor::from_vec(out), Op::GlobalAvgPool(x))
    }

    /// Normalizes the channel vector at every spatial point, then applies `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer norm eps must be positive"));
        }
        let xt = self.value(x);
        if xt.rank() == 0 {
            return Err(Error::shape("layer_norm", "rank-0 input"));
        }
        let c = xt.shape()[0];
        if c == 0 {
            return Err(Error::shape("layer_norm", "zero channels"));
        }
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{what} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        let n = xt.numel() / c;
        let cf = T::cast(c as f64);
        let xd = xt.data();
        let mut mean = vec![T::zero(); n];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / cf);
        let mut var = vec![T::zero(); n];
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xd[ch * n..(ch + 1) * n]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let eps = T::cast(eps);
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s / cf + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        for ch in 0..c {
            let dst = &mut xhat[ch * n..(ch + 1) * n];
            for (((o, &v), &m), &r) in dst.iter_mut().zip(&xd[ch * n..]).zip(&mean).zip(&rstd) {
                *o = (v - m) * r;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            for (o, &xh) in out[ch * n..(ch + 1) * n].iter_mut().zip(&xhat[ch * n..]) {
                *o = xh * g[ch] + b[ch];
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        let (xhat, rstd) = match self.recording {
            Recording::On => (xhat, rstd),
            Recording::Off => (Vec::new(), Vec::new()),
        };
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Per-channel gather through a precomputed index table.
    pub fn gather_planes(&mut self, x: Var, table: Arc<PlaneGather>) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        if (h, w) != table.in_hw {
            return Err(Error::shape(
                "gather",
                format!("input plane {h}x{w}, table expects {:?}", table.in_hw),
            ));
        }
        let (ho, wo) = table.out_hw;
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let plane = t.channel(ch);
            out.extend(table.index.iter().map(|&i| {
                if i < 0 {
                    T::zero()
                } else {
                    plane[i as usize]
                }
            }));
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        self.push(out, Op::Gather { x, table })
    }

    /// Valid (unpadded) stride-1 cross-correlation.
    ///
    /// `x: [Cin, Hp, Wp]`, `w: [Cout, Cin/groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d_valid(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (cin, hp, wp) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let [cout, cin_g, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin}, groups {groups}, weight {ws:?}"),
            ));
        }
        if kh > hp || kw > wp {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {hp}x{wp}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let (ho, wo) = (hp - kh + 1, wp - kw + 1);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let cout_g = cout / groups;
        let mut out = vec![T::zero(); cout * ho * wo];
        for co in 0..cout {
            let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            if let Some(b) = b {
                let bv = self.value(b).data()[co];
                oplane.iter_mut().for_each(|o| *o = bv);
            }
            let ci0 = (co / cout_g) * cin_g;
            for cg in 0..cin_g {
                let xplane = &xd[(ci0 + cg) * hp * wp..(ci0 + cg + 1) * hp * wp];
                let wk = &wd[(co * cin_g + cg) * kh * kw..(co * cin_g + cg + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wk[ky * kw + kx];
                        for y in 0..ho {
                            let src = &xplane[(y + ky) * wp + kx..(y + ky) * wp + kx + wo];
                            let dst = &mut oplane[y * wo..(y + 1) * wo];
                            for (o, &s) in dst.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(out, Op::Conv { x, w, b, groups })
    }

    /// Affine map on a vector: `w · x + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ok = xs.len() == 1
            && ws.len() == 2
            && ws[1] == xs[0]
            && self.shape(b) == [ws[0]];
        if !ok {
            return Err(Error::shape(
                "linear",
                format!("x {xs:?}, w {ws:?}, b {:?}", self.shape(b)),
            ));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let out: Vec<T> = (0..n_out)
            .map(|o| {
                wd[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(xd)
                    .fold(bd[o], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        self.push(Tensor::from_vec(out), Op::Linear { x, w, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::cast(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `Σ w·(pred − target)² / Σ w`, or the plain mean square when `weights` is `None`.
    pub fn mse(&mut self, pred: Var, target: Var, weights: Option<Arc<[T]>>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
            ));
        }
        if p.numel() == 0 {
            return Err(Error::shape("mse", "empty tensor"));
        }
        let (num, denom) = match &weights {
            Some(w) => {
                if w.len() != p.numel() {
                    return Err(Error::shape(
                        "mse",
                        format!("{} weights for {} elements", w.len(), p.numel()),
                    ));
                }
                let num: T = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(w.iter())
                    .map(|((&a, &b), &w)| w * (a - b) * (a - b))
                    .sum();
                let denom: T = w.iter().copied().sum();
                if denom <= T::zero() {
                    return Err(Error::invalid("mse weights must have a positive sum"));
                }
                (num, denom)
            }
            None => {
                let num: T = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                (num, T::cast(p.numel() as f64))
            }
        };
        self.push(
            Tensor::scalar(num / denom),
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. A graph can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.recording == Recording::Off {
            return Err(Error::Backward("graph was built without recording".into()));
        }
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; build a new one".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::Add { a, b, broadcast } => {
                self.acc(grads, a, || g.clone());
                self.acc(grads, b, || {
                    if broadcast {
                        channel_sums(gd, self.shape(b)[0])
                    } else {
                        g.clone()
                    }
                });
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, || g.clone());
                self.acc(grads, b, || g.map(|v| -v));
            }
            &Op::Mul { a, b, broadcast } => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, || binary(g, bv, broadcast, |x, y| x * y));
                self.acc(grads, b, || {
                    let prod = binary(g, av, false, |x, y| x * y);
                    if broadcast {
                        channel_sums(prod.data(), bv.numel())
                    } else {
                        prod
                    }
                });
            }
            &Op::Scale { x, c } => self.acc(grads, x, || g.map(|v| v * c)),
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, || zip_map(g, xv, |gv, v| gv * gelu_grad(v)));
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, x, || zip_map(g, y, |gv, s| gv * s * (T::one() - s)));
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, || {
                    zip_map(g, xv, |gv, v| if v > T::zero() { gv } else { T::zero() })
                });
            }
            &Op::GlobalAvgPool(x) => {
                let shape = self.shape(x).to_vec();
                let plane = shape[1] * shape[2];
                let inv = T::one() / T::cast(plane as f64);
                self.acc(grads, x, || {
                    Tensor::from_fn(&shape, |k| gd[k / plane] * inv)
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.shape(x)[0];
                let n = gd.len() / c;
                let gam = self.value(gamma).data();
                if self.needs(gamma) {
                    let dg: Vec<T> = (0..c)
                        .map(|ch| {
                            gd[ch * n..(ch + 1) * n]
                                .iter()
                                .zip(&xhat[ch * n..(ch + 1) * n])
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    add_into(grads, gamma, Tensor::from_vec(dg));
                }
                self.acc(grads, beta, || channel_sums(gd, c));
                if self.needs(x) {
                    let cf = T::cast(c as f64);
                    let mut s1 = vec![T::zero(); n];
                    let mut s2 = vec![T::zero(); n];
                    for ch in 0..c {
                        for p in 0..n {
                            let dxh = gd[ch * n + p] * gam[ch];
                            s1[p] += dxh;
                            s2[p] += dxh * xhat[ch * n + p];
                        }
                    }
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        for p in 0..n {
                            let k = ch * n + p;
                            let dxh = gd[k] * gam[ch];
                            dx[k] = rstd[p] / cf * (cf * dxh - s1[p] - xhat[k] * s2[p]);
                        }
                    }
                    add_into(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?);
                }
            }
            Op::Gather { x, table } => {
                let x = *x;
                if self.needs(x) {
                    let shape = self.shape(x).to_vec();
                    let plane_in = shape[1] * shape[2];
                    let plane_out = table.out_hw.0 * table.out_hw.1;
                    let mut dx = vec![T::zero(); shape[0] * plane_in];
                    for ch in 0..shape[0] {
                        let dst = &mut dx[ch * plane_in..(ch + 1) * plane_in];
                        let src = &gd[ch * plane_out..(ch + 1) * plane_out];
                        for (&ix, &gv) in table.index.iter().zip(src) {
                            if ix >= 0 {
                                dst[ix as usize] += gv;
                            }
                        }
                    }
                    add_into(grads, x, Tensor::new(shape, dx)?);
                }
            }
            &Op::Conv { x, w, b, groups } => self.backprop_conv(g, x, w, b, groups, grads)?,
            &Op::Linear { x, w, b } => {
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let (n_out, n_in) = (gd.len(), xd.len());
                self.acc(grads, x, || {
                    Tensor::from_fn(&[n_in], |j| (0..n_out).map(|o| wd[o * n_in + j] * gd[o]).sum())
                });
                self.acc(grads, w, || {
                    Tensor::from_fn(&[n_out, n_in], |k| gd[k / n_in] * xd[k % n_in])
                });
                self.acc(grads, b, || g.clone());
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, x, || Tensor::full(self.shape(x), gv));
            }
            &Op::Mean(x) => {
                let gv = g.item() / T::cast(self.value(x).numel() as f64);
                self.acc(grads, x, || Tensor::full(self.shape(x), gv));
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let (pred, target) = (*pred, *target);
                let (p, t) = (self.value(pred), self.value(target));
                let two = T::cast(2.0) * g.item() / *denom;
                let dp = Tensor::from_fn(p.shape(), |k| {
                    let w = weights.as_ref().map_or(T::one(), |w| w[k]);
                    two * w * (p.data()[k] - t.data()[k])
                });
                if self.needs(target) {
                    add_into(grads, target, dp.map(|v| -v));
                }
                if self.needs(pred) {
                    add_into(grads, pred, dp);
                }
            }
        }
        Ok(())
    }

    fn backprop_conv(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (cin, hp, wp) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (ho, wo) = (hp - kh + 1, wp - kw + 1);
        let cout_g = cout / groups;
        let gd = g.data();
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        if let Some(b) = b {
            self.acc(grads, b, || channel_sums(gd, cout));
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); wd.len()];
            for co in 0..cout {
                let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
                let ci0 = (co / cout_g) * cin_g;
                for cg in 0..cin_g {
                    let xplane = &xd[(ci0 + cg) * hp * wp..(ci0 + cg + 1) * hp * wp];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = T::zero();
                            for y in 0..ho {
                                let src = &xplane[(y + ky) * wp + kx..(y + ky) * wp + kx + wo];
                                let gr = &gplane[y * wo..(y + 1) * wo];
                                acc += dot(gr, src);
                            }
                            dw[((co * cin_g + cg) * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            }
            add_into(grads, w, Tensor::new(ws.clone(), dw)?);
        }
        if self.needs(x) {
            let mut dx = vec![T::zero(); cin * hp * wp];
            for co in 0..cout {
                let gplane = &gd[co * ho * wo..(co + 1) * ho * wo];
                let ci0 = (co / cout_g) * cin_g;
                for cg in 0..cin_g {
                    let dplane = &mut dx[(ci0 + cg) * hp * wp..(ci0 + cg + 1) * hp * wp];
                    let wk = &wd[(co * cin_g + cg) * kh * kw..(co * cin_g + cg + 1) * kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wk[ky * kw + kx];
                            for y in 0..ho {
                                let dst = &mut dplane[(y + ky) * wp + kx..(y + ky) * wp + kx + wo];
                                for (d, &gv) in dst.iter_mut().zip(&gplane[y * wo..(y + 1) * wo]) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            add_into(grads, x, Tensor::new(vec![cin, hp, wp], dx)?);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.needs(v) {
            add_into(grads, v, f());
        }
    }
}

fn add_into<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, broadcast: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if broadcast {
        let c = b.numel();
        let inner = a.numel() / c;
        let bd = b.data();
        Tensor::from_fn(a.shape(), |k| f(a.data()[k], bd[k / inner]))
    } else {
        zip_map(a, b, f)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn channel_sums<T: Real>(data: &[T], c: usize) -> Tensor<T> {
    let inner = data.len() / c;
    Tensor::from_vec(
        data.chunks(inner)
            .map(|ch| ch.iter().copied().sum())
            .collect(),
    )
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::cast(0.5);
    half * x * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::cast(0.5) * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::cast(0.5)).exp() * T::cast(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
