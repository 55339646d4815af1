//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, shape_err, Result};
use crate::real::Real;

/// Dense row-major n-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err(alloc::format!(
                "{} elements do not fill shape {}",
                data.len(),
                fmt_shape(shape)
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err(alloc::format!("expected rank 4, got {}", fmt_shape(&self.shape)))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err(alloc::format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.shape),
                fmt_shape(shape)
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    /// Element-wise combination of two same-shaped tensors.
    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(alloc::format!(
                "zip of {} and {}",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape)
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Compensated (Neumaier) sum.
    pub fn sum(&self) -> T {
        let mut s = T::zero();
        let mut c = T::zero();
        for &x in &self.data {
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
        }
        s + c
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::of(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Value at a rank-4 index.
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let s = &self.shape;
        self.data[((b * s[1] + c) * s[2] + h) * s[3] + w]
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(shape_err(alloc::format!(
                "narrow axis {axis} [{start}, {}) of {}",
                start + len,
                fmt_shape(&self.shape)
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(shape_err("concat axis out of range"));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(alloc::format!(
                    "concat of {} with {}",
                    fmt_shape(&first.shape),
                    fmt_shape(&p.shape)
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Select samples `[start, start+len)` of the leading (batch) axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        self.narrow(0, start, len)
    }
}

/// Result shape of broadcasting `a` against `b` (numpy rules).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(alloc::format!(
                    "cannot broadcast {} with {}",
                    fmt_shape(a),
                    fmt_shape(b)
                )))
            }
        };
    }
    Ok(out)
}

/// Iteration plan over a contiguous output with broadcast operands.
///
/// Dimensions are coalesced so the innermost run is as long as possible.
pub(crate) struct Broadcast {
    dims: Vec<usize>,
    strides: [Vec<usize>; 2],
}

fn operand_strides(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = if i + shape.len() >= rank { shape[i + shape.len() - rank] } else { 1 };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

impl Broadcast {
    pub(crate) fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        let sa = operand_strides(out, a);
        let sb = operand_strides(out, b);
        let mut dims: Vec<usize> = Vec::new();
        let mut s0: Vec<usize> = Vec::new();
        let mut s1: Vec<usize> = Vec::new();
        for i in 0..out.len() {
            if out[i] == 1 {
                continue;
            }
            if let Some(&last) = dims.last() {
                let n = dims.len() - 1;
                // merge when the previous dim is an exact outer multiple of this one
                if s0[n] == sa[i] * out[i] && s1[n] == sb[i] * out[i] {
                    dims[n] = last * out[i];
                    s0[n] = sa[i];
                    s1[n] = sb[i];
                    continue;
                }
            }
            dims.push(out[i]);
            s0.push(sa[i]);
            s1.push(sb[i]);
        }
        if dims.is_empty() {
            dims.push(1);
            s0.push(0);
            s1.push(0);
        }
        Self { dims, strides: [s0, s1] }
    }

    pub(crate) fn inner(&self) -> (usize, usize, usize) {
        let n = self.dims.len() - 1;
        (self.dims[n], self.strides[0][n], self.strides[1][n])
    }

    /// Calls `f(out_offset, a_offset, b_offset)` at the start of every inner run.
    pub(crate) fn runs(&self, mut f: impl FnMut(usize, usize, usize)) {
        let outer_rank = self.dims.len() - 1;
        let inner = self.dims[outer_rank];
        let total: usize = self.dims[..outer_rank].iter().product();
        let mut idx = vec![0usize; outer_rank];
        let (mut oa, mut ob) = (0usize, 0usize);
        for run in 0..total {
            f(run * inner, oa, ob);
            // odometer increment
            let mut d = outer_rank;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                oa += self.strides[0][d];
                ob += self.strides[1][d];
                if idx[d] < self.dims[d] {
                    break;
                }
                oa -= self.strides[0][d] * self.dims[d];
                ob -= self.strides[1][d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }
}

/// `f(a, b)` with numpy broadcasting.
pub fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let plan = Broadcast::new(&shape, &a.shape, &b.shape);
    let mut out = vec![T::zero(); numel(&shape)];
    let (len, sa, sb) = plan.inner();
    plan.runs(|o, ia, ib| {
        let dst = &mut out[o..o + len];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(a.data[ia + j * sa], b.data[ib + j * sb]);
        }
    });
    Tensor::new(&shape, out)
}

/// Sum `g` down to `target` by reducing the broadcast axes.
pub fn sum_to<T: Real>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape == target {
        return g.clone();
    }
    let plan = Broadcast::new(&g.shape, target, &g.shape);
    let mut out = vec![T::zero(); numel(target)];
    let (len, st, _) = plan.inner();
    plan.runs(|o, it, _| {
        let src = &g.data[o..o + len];
        if st == 0 {
            let s: T = src.iter().copied().sum();
            out[it] += s;
        } else {
            for (j, &v) in src.iter().enumerate() {
                out[it + j * st] += v;
            }
        }
    });
    Tensor { shape: target.to_vec(), data: out }
}

/// Broadcast `t` up to `shape`.
pub fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let z = Tensor::zeros(shape);
    broadcast_zip(&z, t, |_, b| b)
}
