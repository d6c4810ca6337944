use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{col2im_acc, im2col, matmul_abt_acc, matmul_acc, matmul_atb, matmul_atb_acc, ConvGeom};
use super::tensor::{Shape, Tensor};
use crate::error::shape_err;
use crate::{Error, Real, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding applied before (top/left) and after (bottom/right).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad {
    pub before: usize,
    pub after: usize,
}

impl Pad {
    pub const fn same(p: usize) -> Self {
        Self { before: p, after: p }
    }
    /// Padding that maps extent `h` to `h / stride` for kernel `k`
    /// (total `k - stride`, the odd pixel on the leading edge).
    pub const fn downsample(k: usize, stride: usize) -> Self {
        let total = k - stride;
        Self {
            before: total.div_ceil(2),
            after: total / 2,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: Pad },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    UpsampleNearest(Var, usize),
    Concat(Var, Var),
    ChannelMean(Var),
    ChannelStd(Var),
    BcastAdd(Var, Var),
    BcastSub(Var, Var),
    BcastMul(Var, Var),
    BcastDiv(Var, Var),
    Mse(Var, Var),
    WeightedL1 { a: Var, b: Var, weights: Vec<T> },
    KlDiag { mu_p: Var, logvar_p: Var, mu_q: Var, logvar_q: Var },
    Sum(Var),
    Mean(Var),
    LinComb(Vec<(Var, T)>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Which side of each non-smooth point every kinked op is on: the sign
    /// of leaky-ReLU inputs and weighted-L1 differences, and whether the
    /// channel-std floor is active. Two evaluations with equal patterns lie
    /// in the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) => out.extend(self.value(*x).data().iter().map(|&v| v > T::zero())),
                Op::WeightedL1 { a, b, .. } => out.extend(
                    self.value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x > y),
                ),
                Op::ChannelStd(x) => {
                    let s = self.shape(*x);
                    let floor = T::from_f64(crate::model::STD_FLOOR);
                    out.extend(self.value(*x).data().chunks(s.hw()).map(|p| population_std(p) > floor));
                }
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("{what}: {sa} vs {sb}"));
        }
        Ok(sa)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let shape = self.same_shape(a, b, what)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }
    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }
    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }
    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    // ---- spatial -----------------------------------------------------------

    /// Cross-correlation of `x` (N×Cin×H×W) with `w` (Cout×Cin×k×k) plus
    /// optional bias (1×Cout×1×1). The output extent
    /// `(H + pad.before + pad.after - k) / stride + 1` must divide exactly.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Pad) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return Err(shape_err!("conv2d: input has {} channels, weight expects {}", xs.c, ws.c));
        }
        if ws.h != ws.w || ws.h.is_multiple_of(2) {
            return Err(Error::InvalidArgument(alloc::format!("conv2d: kernel must be square and odd, got {}x{}", ws.h, ws.w)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let k = ws.h;
        let geom = conv_geom(xs, k, stride, pad)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != ws.n {
                return Err(shape_err!("conv2d: bias {bs} for {} output channels", ws.n));
            }
        }
        let cout = ws.n;
        let (kk, p) = (geom.rows(), geom.cols());
        let out_shape = Shape::new(xs.n, cout, geom.hout, geom.wout);
        let mut out = vec![T::zero(); out_shape.len()];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bias = b.map(|b| self.nodes[b.0].value.data());
        for n in 0..xs.n {
            let xn = &xv[n * xs.c * xs.hw()..(n + 1) * xs.c * xs.hw()];
            let on = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(bias) = bias {
                for (co, row) in on.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            if geom.is_pointwise() {
                matmul_acc(wv, xn, on, cout, kk, p);
            } else {
                im2col(xn, &geom, &mut cols);
                matmul_acc(wv, &cols, on, cout, kk, p);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(os.len());
        for plane in xv.chunks(s.hw()) {
            for oy in 0..os.h {
                let row = &plane[(oy / factor) * s.w..(oy / factor + 1) * s.w];
                for ox in 0..os.w {
                    out.push(row[ox / factor]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(os, out)?, Op::UpsampleNearest(x, factor), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(shape_err!("concat: {sa} vs {sb}"));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(os.len());
        let (la, lb) = (sa.c * sa.hw(), sb.c * sb.hw());
        for n in 0..sa.n {
            out.extend_from_slice(&av[n * la..(n + 1) * la]);
            out.extend_from_slice(&bv[n * lb..(n + 1) * lb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(os, out)?, Op::Concat(a, b), rg))
    }

    /// Per-sample, per-channel spatial mean (N×C×1×1). Also serves as global
    /// average pooling.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let data = self.nodes[x.0]
            .value
            .data()
            .chunks(s.hw())
            .map(plane_mean)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(Shape::new(s.n, s.c, 1, 1), data).unwrap(), Op::ChannelMean(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        self.channel_mean(x)
    }

    /// Per-sample, per-channel population standard deviation, floored at
    /// [`STD_FLOOR`](crate::model::STD_FLOOR).
    pub fn channel_std(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let floor = T::from_f64(crate::model::STD_FLOOR);
        let data = self.nodes[x.0]
            .value
            .data()
            .chunks(s.hw())
            .map(|p| population_std(p).max(floor))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(Shape::new(s.n, s.c, 1, 1), data).unwrap(), Op::ChannelStd(x), rg)
    }

    fn bcast(&mut self, x: Var, s: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss.n != xs.n || ss.c != xs.c || ss.hw() != 1 {
            return Err(shape_err!("broadcast: {ss} cannot broadcast over {xs}"));
        }
        let sv = self.nodes[s.0].value.data();
        let data = self.nodes[x.0]
            .value
            .data()
            .chunks(xs.hw())
            .zip(sv)
            .flat_map(|(p, &sc)| p.iter().map(move |&v| (v, sc)))
            .map(|(v, sc)| f(v, sc))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(xs, data)?, op, rg))
    }

    /// `x + s` with `s` (N×C×1×1) broadcast over space.
    pub fn bcast_add(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast(x, s, Op::BcastAdd(x, s), |v, c| v + c)
    }
    pub fn bcast_sub(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast(x, s, Op::BcastSub(x, s), |v, c| v - c)
    }
    pub fn bcast_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast(x, s, Op::BcastMul(x, s), |v, c| v * c)
    }
    pub fn bcast_div(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast(x, s, Op::BcastDiv(x, s), |v, c| v / c)
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_f64(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mse")?;
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let v = s / T::from_f64(shape.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Mean over all N·C·H·W elements of `|a - b| * weights[n, y, x]`, with
    /// `weights` holding N×H×W values broadcast across channels.
    pub fn weighted_l1(&mut self, a: Var, b: Var, weights: Vec<T>) -> Result<Var> {
        let shape = self.same_shape(a, b, "weighted_l1")?;
        if weights.len() != shape.n * shape.hw() {
            return Err(shape_err!("weighted_l1: {} weights for {shape}", weights.len()));
        }
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut s = T::zero();
        for (i, (&x, &y)) in av.iter().zip(bv).enumerate() {
            s = s + (x - y).abs() * weights[weight_index(i, shape)];
        }
        let v = s / T::from_f64(shape.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::WeightedL1 { a, b, weights }, rg))
    }

    /// Closed-form `KL(p || q)` between diagonal Gaussians given as
    /// (mean, log-variance) tensors of shape N×D×…; summed over D, averaged
    /// over N.
    pub fn kl_diag(&mut self, mu_p: Var, logvar_p: Var, mu_q: Var, logvar_q: Var) -> Result<Var> {
        let s = self.same_shape(mu_p, logvar_p, "kl")?;
        self.same_shape(mu_p, mu_q, "kl")?;
        self.same_shape(mu_p, logvar_q, "kl")?;
        let get = |v: Var| self.nodes[v.0].value.data();
        let (mp, lp, mq, lq) = (get(mu_p), get(logvar_p), get(mu_q), get(logvar_q));
        let half = T::from_f64(0.5);
        let mut acc = T::zero();
        for i in 0..s.len() {
            // expm1(r) - r >= 0 keeps rounding from pushing the sum below zero
            let (d, r) = (mp[i] - mq[i], lp[i] - lq[i]);
            acc = acc + half * (r.exp_m1() - r + d * d / lq[i].exp());
        }
        let v = acc / T::from_f64(s.n as f64);
        let rg = [mu_p, logvar_p, mu_q, logvar_q].iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::scalar(v), Op::KlDiag { mu_p, logvar_p, mu_q, logvar_q }, rg))
    }

    /// `Σ w_i · term_i` over scalar terms.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            if !self.shape(v).is_scalar() {
                return Err(shape_err!("lincomb: term {} is not scalar", self.shape(v)));
            }
            acc = acc + w * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::LinComb(terms.to_vec()), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.shape(loss).is_scalar() {
            return Err(shape_err!("backward needs a scalar loss, got {}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + g * x;
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s)
            }),
            Op::AddScalar(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + if v > T::zero() { g } else { g * *slope };
                    }
                })
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + g * y * (T::one() - y);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + g * y;
                }
            }),
            Op::Softplus(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + g * sigmoid(v);
                    }
                })
            }
            Op::UpsampleNearest(x, f) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                self.accumulate(grads, *x, |d| {
                    for (dp, gp) in d.chunks_mut(s.hw()).zip(g.chunks(os.hw())) {
                        for oy in 0..os.h {
                            for ox in 0..os.w {
                                let j = (oy / f) * s.w + ox / f;
                                dp[j] = dp[j] + gp[oy * os.w + ox];
                            }
                        }
                    }
                })
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.c * sa.hw(), sb.c * sb.hw());
                self.accumulate(grads, *a, |d| {
                    for n in 0..sa.n {
                        add_into(&mut d[n * la..(n + 1) * la], &g[n * (la + lb)..n * (la + lb) + la]);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for n in 0..sa.n {
                        add_into(&mut d[n * lb..(n + 1) * lb], &g[n * (la + lb) + la..(n + 1) * (la + lb)]);
                    }
                });
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x);
                let inv = T::one() / T::from_f64(s.hw() as f64);
                self.accumulate(grads, *x, |d| {
                    for (dp, &gv) in d.chunks_mut(s.hw()).zip(g) {
                        dp.iter_mut().for_each(|v| *v = *v + gv * inv);
                    }
                })
            }
            Op::ChannelStd(x) => {
                let s = self.shape(*x);
                let xv = val(*x);
                let floor = T::from_f64(crate::model::STD_FLOOR);
                let hw = T::from_f64(s.hw() as f64);
                self.accumulate(grads, *x, |d| {
                    for ((dp, xp), (&gv, &sd)) in d.chunks_mut(s.hw()).zip(xv.chunks(s.hw())).zip(g.iter().zip(out)) {
                        let raw = population_std(xp);
                        if raw < floor {
                            continue;
                        }
                        let mu = plane_mean(xp);
                        let c = gv / (hw * sd);
                        for (dv, &v) in dp.iter_mut().zip(xp) {
                            *dv = *dv + c * (v - mu);
                        }
                    }
                })
            }
            Op::BcastAdd(x, s) | Op::BcastSub(x, s) => {
                let sign = if matches!(node.op, Op::BcastSub(..)) { -T::one() } else { T::one() };
                let hw = self.shape(*x).hw();
                self.accumulate(grads, *x, |d| add_into(d, g));
                self.accumulate(grads, *s, |d| {
                    for (dv, gp) in d.iter_mut().zip(g.chunks(hw)) {
                        *dv = *dv + sign * gp.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
            }
            Op::BcastMul(x, s) => {
                let hw = self.shape(*x).hw();
                let (xv, sv) = (val(*x), val(*s));
                self.accumulate(grads, *x, |d| {
                    for ((dp, gp), &sc) in d.chunks_mut(hw).zip(g.chunks(hw)).zip(sv) {
                        dp.iter_mut().zip(gp).for_each(|(d, &g)| *d = *d + g * sc);
                    }
                });
                self.accumulate(grads, *s, |d| {
                    for ((dv, gp), xp) in d.iter_mut().zip(g.chunks(hw)).zip(xv.chunks(hw)) {
                        *dv = *dv + super::kernels::dot(gp, xp);
                    }
                });
            }
            Op::BcastDiv(x, s) => {
                let hw = self.shape(*x).hw();
                let (xv, sv) = (val(*x), val(*s));
                self.accumulate(grads, *x, |d| {
                    for ((dp, gp), &sc) in d.chunks_mut(hw).zip(g.chunks(hw)).zip(sv) {
                        dp.iter_mut().zip(gp).for_each(|(d, &g)| *d = *d + g / sc);
                    }
                });
                self.accumulate(grads, *s, |d| {
                    for (((dv, gp), xp), &sc) in d.iter_mut().zip(g.chunks(hw)).zip(xv.chunks(hw)).zip(sv) {
                        *dv = *dv - super::kernels::dot(gp, xp) / (sc * sc);
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::Mean(x) => {
                let c = g[0] / T::from_f64(self.shape(*x).len() as f64);
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + c))
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = g[0] * T::from_f64(2.0 / av.len() as f64);
                self.accumulate(grads, *a, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d = *d + c * (x - y);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *d = *d - c * (x - y);
                    }
                });
            }
            Op::WeightedL1 { a, b, weights } => {
                let shape = self.shape(*a);
                let (av, bv) = (val(*a), val(*b));
                let c = g[0] / T::from_f64(shape.len() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                self.accumulate(grads, *a, |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d = *d + c * sign(av[i], bv[i]) * weights[weight_index(i, shape)];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d = *d - c * sign(av[i], bv[i]) * weights[weight_index(i, shape)];
                    }
                });
            }
            Op::KlDiag { mu_p, logvar_p, mu_q, logvar_q } => {
                let n = T::from_f64(self.shape(*mu_p).n as f64);
                let (mp, lp, mq, lq) = (val(*mu_p), val(*logvar_p), val(*mu_q), val(*logvar_q));
                let c = g[0] / n;
                let half = T::from_f64(0.5);
                self.accumulate(grads, *mu_p, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + c * (mp[i] - mq[i]) / lq[i].exp();
                    }
                });
                self.accumulate(grads, *mu_q, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] - c * (mp[i] - mq[i]) / lq[i].exp();
                    }
                });
                self.accumulate(grads, *logvar_p, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + c * half * ((lp[i] - lq[i]).exp() - T::one());
                    }
                });
                self.accumulate(grads, *logvar_q, |d| {
                    for i in 0..d.len() {
                        let diff = mp[i] - mq[i];
                        d[i] = d[i] + c * half * (T::one() - (lp[i].exp() + diff * diff) / lq[i].exp());
                    }
                });
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, |d| d[0] = d[0] + g[0] * w);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Pad, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let geom = conv_geom(xs, ws.h, stride, pad).expect("validated in forward");
        let (cout, kk, p) = (ws.n, geom.rows(), geom.cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b {
            self.accumulate(grads, b, |d| {
                for gn in g.chunks(cout * p) {
                    for (co, row) in gn.chunks(p).enumerate() {
                        d[co] = d[co] + row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            });
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcols = if need_x && !pointwise { vec![T::zero(); kk * p] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); cout * kk] } else { Vec::new() };
        let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
        let xlen = xs.c * xs.hw();
        for n in 0..xs.n {
            let gn = &g[n * cout * p..(n + 1) * cout * p];
            if need_w {
                let xn = &xv[n * xlen..(n + 1) * xlen];
                if geom.is_pointwise() {
                    matmul_abt_acc(gn, xn, &mut dw, cout, kk, p);
                } else {
                    im2col(xn, &geom, &mut cols);
                    matmul_abt_acc(gn, &cols, &mut dw, cout, kk, p);
                }
            }
            if need_x {
                let dxn = &mut dx[n * xlen..(n + 1) * xlen];
                if geom.is_pointwise() {
                    matmul_atb_acc(wv, gn, dxn, cout, kk, p);
                } else {
                    matmul_atb(wv, gn, &mut dcols, cout, kk, p);
                    col2im_acc(&dcols, &geom, dxn);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, |d| add_into(d, &dw));
        }
        if need_x {
            self.accumulate(grads, x, |d| add_into(d, &dx));
        }
    }
}

fn conv_geom(xs: Shape, k: usize, stride: usize, pad: Pad) -> Result<ConvGeom> {
    let span = |n: usize| -> Result<usize> {
        let padded = n + pad.before + pad.after;
        if padded < k {
            return Err(shape_err!("conv2d: extent {n} with padding smaller than kernel {k}"));
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(Error::InvalidArgument(alloc::format!(
                "conv2d: non-integral output size ({padded} - {k}) / {stride}"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    Ok(ConvGeom {
        cin: xs.c,
        h: xs.h,
        w: xs.w,
        k,
        stride,
        pad_before: pad.before,
        hout: span(xs.h)?,
        wout: span(xs.w)?,
    })
}

#[inline]
fn weight_index(i: usize, s: Shape) -> usize {
    let hw = s.hw();
    let n = i / (s.c * hw);
    n * hw + i % hw
}

#[inline]
fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Mean accumulated in double precision.
fn plane_mean<T: Real>(p: &[T]) -> T {
    T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / p.len() as f64)
}

/// Two-pass population standard deviation, accumulated in double precision.
fn population_std<T: Real>(p: &[T]) -> T {
    let n = p.len() as f64;
    let mu = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = p.iter().map(|v| (v.as_f64() - mu) * (v.as_f64() - mu)).sum::<f64>() / n;
    T::from_f64(num_traits::Float::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(Shape::new(1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(Shape::new(1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);
        // a second pass accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0, 12.0, 2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn identity_and_zero_convolutions() {
        let mut g = Graph::<f64>::new();
        let xs = Shape::new(2, 3, 4, 5);
        let x = g.constant(Tensor::from_fn(xs, |i| i as f64 * 0.1));
        let w = g.constant(Tensor::from_fn(Shape::new(3, 3, 1, 1), |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, w, None, 1, Pad::same(0)).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let wz = g.constant(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        let b = g.constant(t(Shape::new(1, 4, 1, 1), &[0.0, 1.0, 2.0, 3.0]));
        let y = g.conv2d(x, wz, None, 1, Pad::same(1)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let y = g.conv2d(x, wz, Some(b), 1, Pad::same(1)).unwrap();
        assert_eq!(g.value(y).at(1, 3, 2, 2), 3.0);
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        let mut g = Graph::<f64>::new();
        let mut d = vec![0.0; 25];
        d[2 * 5 + 2] = 1.0;
        let x = g.constant(t(Shape::new(1, 1, 5, 5), &d));
        let w = g.constant(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(x, w, None, 1, Pad::same(1)).unwrap();
        // direct loop oracle
        for oy in 0..5 {
            for ox in 0..5 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky - 1, ox as isize + kx - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            s += d[iy as usize * 5 + ix as usize];
                        }
                    }
                }
                assert_eq!(g.value(y).at(0, 0, oy, ox), s);
            }
        }
        let plateau = g.value(y).data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(plateau, 9);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(g.conv2d(x, w, None, 1, Pad::same(1)).is_err());
        let w = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        assert!(g.conv2d(x, w, None, 2, Pad::same(1)).is_err());
        let y = g.conv2d(x, w, None, 2, Pad::downsample(3, 2)).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
        let w2 = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(g.conv2d(x, w2, None, 1, Pad::same(0)).is_err());
    }

    #[test]
    fn simple_ops() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(Shape::new(1, 1, 1, 2), &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let u = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(u), g.value(x));
        let c = g.constant(Tensor::filled(Shape::new(2, 3, 4, 4), 0.7));
        let m = g.global_avg_pool(c);
        assert!(g.value(m).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let s = g.channel_std(c);
        assert!(g.value(s).data().iter().all(|&v| v == crate::model::STD_FLOOR));
        let two = g.constant(t(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 1.0, 0.0]));
        let (m, s) = (g.channel_mean(two), g.channel_std(two));
        assert_eq!(g.value(m).item(), 0.5);
        assert_eq!(g.value(s).item(), 0.5);
    }
}
