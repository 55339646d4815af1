//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its value and enough saved state
//! to run its adjoint. `Tape::backward` walks the nodes in reverse.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, shape_err, Result};
use crate::kernels::attention::{attention_backward, attention_forward, AttnDims};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::fft::{fft2, is_self_conjugate, Plan};
use crate::nn::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{broadcast_to, broadcast_zip, numel, sum_to, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind<T> {
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Silu,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    Log1p,
}

enum Op<T> {
    Constant,
    Param,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind<T>, x: Var },
    Scale { x: Var, s: T },
    Shift { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, scale: T, probs: Vec<T> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    SumAll { x: Var },
    SumTo { x: Var },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Spectrum { x: Var, re: Vec<T>, im: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(move |(&id, &v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

impl<'s, T: Real> Tape<'s, T> {
    /// A tape whose parameters are read from `store`.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store: Some(store), nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape with no parameter store.
    pub fn detached() -> Self {
        Self { store: None, nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// Disable gradient bookkeeping; ops keep no saved state.
    pub fn inference(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_value(self, v: Var) -> Tensor<T> {
        let mut nodes = self.nodes;
        nodes.swap_remove(v.0).value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked (used for input sensitivities).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// The parameter `id`, materialised once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let value = store.get(id).clone();
        let trainable = !store.is_frozen(id) && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Param, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- element-wise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = match kind {
            BinaryKind::Add => broadcast_zip(x, y, |p, q| p + q)?,
            BinaryKind::Sub => broadcast_zip(x, y, |p, q| p - q)?,
            BinaryKind::Mul => broadcast_zip(x, y, |p, q| p * q)?,
            BinaryKind::Div => broadcast_zip(x, y, |p, q| p / q)?,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = match kind {
            UnaryKind::Relu => v.map(|a| a.max(T::zero())),
            UnaryKind::LeakyRelu(s) => v.map(|a| if a > T::zero() { a } else { a * s }),
            UnaryKind::Sigmoid => v.map(sigmoid),
            UnaryKind::Tanh => v.map(|a| a.tanh()),
            UnaryKind::Silu => v.map(|a| a * sigmoid(a)),
            UnaryKind::Exp => v.map(|a| a.exp()),
            UnaryKind::Ln => v.map(|a| a.ln()),
            UnaryKind::Sqrt => v.map(|a| a.sqrt()),
            UnaryKind::Abs => v.map(|a| a.abs()),
            UnaryKind::Square => v.map(|a| a * a),
            UnaryKind::Log1p => v.map(|a| a.ln_1p()),
        };
        let needs = self.needs(x);
        self.push(out, Op::Unary { kind, x }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(T::of(slope)), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log1p, x)
    }

    /// `s * x`.
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.nodes[x.0].value.map(|a| a * s);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// `x + s`.
    pub fn shift(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.nodes[x.0].value.map(|a| a + s);
        let needs = self.needs(x);
        self.push(out, Op::Shift { x }, needs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.nodes[x.0].value.map(|a| a.max(lo).min(hi));
        let needs = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, needs)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, needs))
    }

    /// Transposed convolution; `geom` is the forward convolution it inverts.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvT { x, w, b, geom }, needs))
    }

    /// Multi-head attention of `q` over `k`/`v`; trailing axes are tokens.
    ///
    /// `q: (B, C, ...)`, `k, v: (B, C, ...)`; output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() < 2 || ks != vs || qs[..2] != ks[..2] {
            return Err(shape_err(alloc::format!(
                "attention shapes q{} k{} v{}",
                fmt_shape(qs),
                fmt_shape(ks),
                fmt_shape(vs)
            )));
        }
        let (batch, channels) = (qs[0], qs[1]);
        if heads == 0 || channels % heads != 0 {
            return Err(crate::Error::Config(alloc::format!("{channels} channels not divisible by {heads} heads")));
        }
        let dims = AttnDims { batch, channels, heads, nq: numel(&qs[2..]), nk: numel(&ks[2..]) };
        let out_shape = qs.to_vec();
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let scale = T::of(scale);
        let keep = needs && self.grad_enabled;
        let (out, probs) =
            attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), dims, scale, keep);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, dims, scale, probs: probs.unwrap_or_default() }, needs))
    }

    /// Attention probabilities `(B, heads, Nq, Nk)` of an attention node, if retained.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    /// 2-D matrix product `op(a) * op(b)` with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul expects rank-2 operands"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err(alloc::format!("matmul {} x {}", fmt_shape(sa), fmt_shape(sb))));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, T::one(), self.value(a).data(), rsa, csa, self.value(b).data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
        let needs = self.needs(a) || self.needs(b);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, needs))
    }

    // ---- reductions and shape ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::SumAll { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the given axes, keeping them with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut target = self.shape(x).to_vec();
        for &a in axes {
            if a >= target.len() {
                return Err(shape_err("reduction axis out of range"));
            }
            target[a] = 1;
        }
        let out = sum_to(self.value(x), &target);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SumTo { x }, needs))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    // ---- specialised ----------------------------------------------------

    /// Centred spectrum features of `x: (B, C, H, W)`.
    ///
    /// Each plane has its mean removed before a 2-D FFT. The output is
    /// `(B, 2C, H, W)`: `log1p(|F|)` in the first `C` channels and the phase
    /// `atan2(Im F, Re F)` in the last `C`. The DC bin is exactly zero and the
    /// self-conjugate bins are exactly real, as they are analytically.
    pub fn spectrum(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = h * w;
        let (rows, cols) = (Plan::new(w), Plan::new(h));
        let mut re = self.value(x).data().to_vec();
        let mut im = vec![T::zero(); re.len()];
        for p in 0..b * c {
            let (pr, pi) = (&mut re[p * n..(p + 1) * n], &mut im[p * n..(p + 1) * n]);
            let mean = pr.iter().copied().sum::<T>() / T::of(n as f64);
            pr.iter_mut().for_each(|v| *v -= mean);
            fft2(pr, pi, h, w, &rows, &cols);
            for u in 0..h {
                for v in 0..w {
                    if is_self_conjugate(u, v, h, w) {
                        pi[u * w + v] = T::zero();
                    }
                }
            }
            pr[0] = T::zero();
        }
        let mut out = vec![T::zero(); 2 * re.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * n;
                let mag = (bi * 2 * c + ci) * n;
                let ph = (bi * 2 * c + c + ci) * n;
                for j in 0..n {
                    let (r, i) = (re[src + j], im[src + j]);
                    out[mag + j] = (r * r + i * i).sqrt().ln_1p();
                    out[ph + j] = i.atan2(r);
                }
            }
        }
        let out = Tensor::new(&[b, 2 * c, h, w], out)?;
        let needs = self.needs(x);
        let (re, im) = if needs && self.grad_enabled { (re, im) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::Spectrum { x, re, im }, needs))
    }

    /// Layer normalisation across channels at every spatial position.
    ///
    /// `x: (B, C, ...)`, `gamma`, `beta`: `(C,)`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("layer norm expects (B, C, ...)"));
        }
        let (b, c) = (shape[0], shape[1]);
        let n = numel(&shape[2..]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer norm affine size mismatch"));
        }
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); b * n];
        let mut out = vec![T::zero(); xv.len()];
        let cn = T::of(c as f64);
        for bi in 0..b {
            for j in 0..n {
                let idx = |ci: usize| (bi * c + ci) * n + j;
                let mean = (0..c).map(|ci| xv[idx(ci)]).sum::<T>() / cn;
                let var = (0..c).map(|ci| (xv[idx(ci)] - mean).powi(2)).sum::<T>() / cn;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * n + j] = r;
                for ci in 0..c {
                    let xh = (xv[idx(ci)] - mean) * r;
                    xhat[idx(ci)] = xh;
                    out[idx(ci)] = xh * gv[ci] + bv[ci];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(shape_err(alloc::format!("backward from non-scalar {}", fmt_shape(ls.shape()))));
        }
        let seed = Tensor::full(ls.shape(), T::one());
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match (&node.op, grads[i].as_ref()) {
                (Op::Constant | Op::Param, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().expect("checked"),
            };
            self.adjoint(i, g, &mut grads)?;
        }
        Ok(Grads { grads, params: self.params.clone() })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn adjoint(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match kind {
                    BinaryKind::Add => {
                        if self.needs(*a) {
                            self.accum(grads, *a, sum_to(&g, av.shape()));
                        }
                        if self.needs(*b) {
                            self.accum(grads, *b, sum_to(&g, bv.shape()));
                        }
                    }
                    BinaryKind::Sub => {
                        if self.needs(*a) {
                            self.accum(grads, *a, sum_to(&g, av.shape()));
                        }
                        if self.needs(*b) {
                            let gb = sum_to(&g, bv.shape()).map(|x| -x);
                            self.accum(grads, *b, gb);
                        }
                    }
                    BinaryKind::Mul => {
                        if self.needs(*a) {
                            let t = broadcast_zip(&g, bv, |p, q| p * q)?;
                            self.accum(grads, *a, sum_to(&t, av.shape()));
                        }
                        if self.needs(*b) {
                            let t = broadcast_zip(&g, av, |p, q| p * q)?;
                            self.accum(grads, *b, sum_to(&t, bv.shape()));
                        }
                    }
                    BinaryKind::Div => {
                        if self.needs(*a) {
                            let t = broadcast_zip(&g, bv, |p, q| p / q)?;
                            self.accum(grads, *a, sum_to(&t, av.shape()));
                        }
                        if self.needs(*b) {
                            let gy = g.zip(&node.value, |p, y| p * y)?;
                            let t = broadcast_zip(&gy, bv, |p, q| -p / q)?;
                            self.accum(grads, *b, sum_to(&t, bv.shape()));
                        }
                    }
                }
            }
            Op::Unary { kind, x } => {
                let (xv, y) = (self.value(*x), &node.value);
                let mut gx = g;
                let gd = gx.data_mut();
                let (xd, yd) = (xv.data(), y.data());
                match *kind {
                    UnaryKind::Relu => zip3(gd, xd, yd, |g, x, _| if x > T::zero() { g } else { T::zero() }),
                    UnaryKind::LeakyRelu(s) => zip3(gd, xd, yd, |g, x, _| if x > T::zero() { g } else { g * s }),
                    UnaryKind::Sigmoid => zip3(gd, xd, yd, |g, _, y| g * y * (T::one() - y)),
                    UnaryKind::Tanh => zip3(gd, xd, yd, |g, _, y| g * (T::one() - y * y)),
                    UnaryKind::Silu => zip3(gd, xd, yd, |g, x, _| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    }),
                    UnaryKind::Exp => zip3(gd, xd, yd, |g, _, y| g * y),
                    UnaryKind::Ln => zip3(gd, xd, yd, |g, x, _| g / x),
                    UnaryKind::Sqrt => zip3(gd, xd, yd, |g, _, y| g / (y + y)),
                    UnaryKind::Abs => zip3(gd, xd, yd, |g, x, _| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryKind::Square => zip3(gd, xd, yd, |g, x, _| g * (x + x)),
                    UnaryKind::Log1p => zip3(gd, xd, yd, |g, x, _| g / (T::one() + x)),
                }
                self.accum(grads, *x, gx);
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accum(grads, *x, g.map(|v| v * s));
            }
            Op::Shift { x } => self.accum(grads, *x, g),
            Op::Clamp { x, lo, hi } => {
                let gx = g.zip(self.value(*x), |g, x| if x < *lo || x > *hi { T::zero() } else { g })?;
                self.accum(grads, *x, gx);
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), &g, geom, self.needs(*x), self.needs(*w))?;
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(grads, *b, conv::channel_sums(&g)?);
                    }
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let (dx, dw) = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(grads, *b, conv::channel_sums(&g)?);
                    }
                }
            }
            Op::Attention { q, k, v, dims, scale, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = attention_backward(qv.data(), kv.data(), vv.data(), probs, g.data(), *dims, *scale);
                self.accum(grads, *q, Tensor::new(qv.shape(), dq)?);
                self.accum(grads, *k, Tensor::new(kv.shape(), dk)?);
                self.accum(grads, *v, Tensor::new(vv.shape(), dv)?);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                let (rsa, csa) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = g B^T, written back in a's layout
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), csb, rsb, T::zero(), &mut da, rsa, csa);
                    self.accum(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    // dB = A^T g
                    T::gemm(k, m, n, T::one(), av.data(), csa, rsa, g.data(), n as isize, 1, T::zero(), &mut db, rsb, csb);
                    self.accum(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::SumAll { x } => {
                let gs = g.data()[0];
                let gx = Tensor::full(self.shape(*x), gs);
                self.accum(grads, *x, gx);
            }
            Op::SumTo { x } => {
                let gx = broadcast_to(&g, self.shape(*x))?;
                self.accum(grads, *x, gx);
            }
            Op::Reshape { x } => {
                let gx = g.reshape(self.shape(*x))?;
                self.accum(grads, *x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let len = g.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let full = xs[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        self.accum(grads, v, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Spectrum { x, re, im } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let (rows, cols) = (Plan::new(w), Plan::new(h));
                let tiny = T::epsilon() * T::epsilon();
                let mut gx = vec![T::zero(); b * c * n];
                let mut gr = vec![T::zero(); n];
                let mut gi = vec![T::zero(); n];
                for bi in 0..b {
                    for ci in 0..c {
                        let src = (bi * c + ci) * n;
                        let gm = &g.data()[(bi * 2 * c + ci) * n..(bi * 2 * c + ci + 1) * n];
                        let gp = &g.data()[(bi * 2 * c + c + ci) * n..(bi * 2 * c + c + ci + 1) * n];
                        for j in 0..n {
                            let (r, i) = (re[src + j], im[src + j]);
                            let m2 = r * r + i * i;
                            if m2 <= tiny {
                                gr[j] = T::zero();
                                gi[j] = T::zero();
                                continue;
                            }
                            let m = m2.sqrt();
                            let dm = gm[j] / (T::one() + m);
                            gr[j] = dm * r / m - gp[j] * i / m2;
                            // conjugated for the adjoint transform
                            gi[j] = -(dm * i / m + gp[j] * r / m2);
                        }
                        gr[0] = T::zero();
                        gi[0] = T::zero();
                        fft2(&mut gr, &mut gi, h, w, &rows, &cols);
                        let mean = gr.iter().copied().sum::<T>() / T::of(n as f64);
                        for j in 0..n {
                            gx[src + j] = gr[j] - mean;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let shape = self.shape(*x);
                let (b, c) = (shape[0], shape[1]);
                let n = numel(&shape[2..]);
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                let cn = T::of(c as f64);
                for bi in 0..b {
                    for j in 0..n {
                        let idx = |ci: usize| (bi * c + ci) * n + j;
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for ci in 0..c {
                            let k = idx(ci);
                            dgamma[ci] += gd[k] * xhat[k];
                            dbeta[ci] += gd[k];
                            let dxh = gd[k] * gv[ci];
                            s1 += dxh;
                            s2 += dxh * xhat[k];
                        }
                        let (m1, m2) = (s1 / cn, s2 / cn);
                        let r = rstd[bi * n + j];
                        for ci in 0..c {
                            let k = idx(ci);
                            dx[k] = r * (gd[k] * gv[ci] - m1 - xhat[k] * m2);
                        }
                    }
                }
                if self.needs(*x) {
                    self.accum(grads, *x, Tensor::new(shape, dx)?);
                }
                let cs = self.shape(*gamma).to_vec();
                if self.needs(*gamma) {
                    self.accum(grads, *gamma, Tensor::new(&cs, dgamma)?);
                }
                if self.needs(*beta) {
                    let bs = self.shape(*beta).to_vec();
                    self.accum(grads, *beta, Tensor::new(&bs, dbeta)?);
                }
            }
        }
        Ok(())
    }
}

fn zip3<T: Copy>(g: &mut [T], x: &[T], y: &[T], f: impl Fn(T, T, T) -> T) {
    for ((gv, &xv), &yv) in g.iter_mut().zip(x).zip(y) {
        *gv = f(*gv, xv, yv);
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut tape = Tape::detached();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let g = tape.backward(y).unwrap();
        let gx = g.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                let mut t = Tape::detached();
                let xv = t.leaf(xp);
                let yv = build(&mut t, xv);
                t.value(yv).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = gx.data()[i];
            assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_chain() {
        fd_check(
            |t, x| {
                let a = t.sigmoid(x);
                let b = t.tanh(x);
                let c = t.mul(a, b).unwrap();
                let d = t.silu(c);
                let e = t.square(x);
                let e = t.shift(e, 1.0);
                let f = t.div(d, e).unwrap();
                let l = t.log1p(e);
                let f = t.add(f, l).unwrap();
                t.sum(f)
            },
            sample(&[2, 3, 4], 1),
        );
    }

    #[test]
    fn broadcast_mul_and_reduction() {
        fd_check(
            |t, x| {
                let m = t.mean_axes(x, &[2, 3]).unwrap();
                let y = t.mul(x, m).unwrap();
                let s = t.sub(y, m).unwrap();
                let q = t.square(s);
                t.mean(q)
            },
            sample(&[2, 3, 4, 4], 2),
        );
    }

    #[test]
    fn matmul_with_transposes() {
        let b0 = sample(&[5, 3], 9);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let bt = b0.clone();
            fd_check(
                move |t, x| {
                    let b = t.constant(if tb { transpose(&bt) } else { bt.clone() });
                    let y = t.matmul(x, b, ta, tb).unwrap();
                    let y = t.square(y);
                    t.sum(y)
                },
                if ta { sample(&[5, 4], 3) } else { sample(&[4, 5], 3) },
            );
        }
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
    }

    #[test]
    fn spectrum_gradient() {
        fd_check(
            |t, x| {
                let s = t.spectrum(x).unwrap();
                let w = t.constant(sample(&[1, 4, 4, 8], 17));
                let y = t.mul(s, w).unwrap();
                t.sum(y)
            },
            sample(&[1, 2, 4, 8], 5),
        );
    }

    #[test]
    fn spectrum_of_constant_plane_is_zero() {
        let mut t = Tape::<f64>::detached();
        let x = t.constant(Tensor::full(&[1, 1, 4, 4], 0.7));
        let s = t.spectrum(x).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gradient() {
        fd_check(
            |t, x| {
                let g = t.constant(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
                let b = t.constant(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
                let y = t.layer_norm_channels(x, g, b, 1e-5).unwrap();
                let w = t.constant(sample(&[2, 3, 2, 2], 8));
                let y = t.mul(y, w).unwrap();
                t.sum(y)
            },
            sample(&[2, 3, 2, 2], 4),
        );
    }

    #[test]
    fn narrow_concat_gradient() {
        fd_check(
            |t, x| {
                let a = t.narrow(x, 1, 0, 2).unwrap();
                let b = t.narrow(x, 1, 1, 3).unwrap();
                let b = t.exp(b);
                let c = t.concat(&[b, a], 1).unwrap();
                let w = t.constant(sample(&[2, 5, 3], 12));
                let y = t.mul(c, w).unwrap();
                t.sum(y)
            },
            sample(&[2, 4, 3], 6),
        );
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut t = Tape::<f64>::detached().inference();
        let x = t.leaf(Tensor::ones(&[2]));
        let y = t.exp(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }
}
