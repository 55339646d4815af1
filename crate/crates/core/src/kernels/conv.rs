//! Convolution kernels built on im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Static description of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { cin, cout, kh: k, kw: k, stride, pad, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return Err(shape_err(alloc::format!("{h}x{w} input too small for {}x{} kernel", self.kh, self.kw)));
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.groups, self.kh, self.kw]
    }

    /// Output size of the transposed convolution on an `h x w` input.
    pub fn transposed_out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h - 1) * self.stride + self.kh;
        let ow = (w - 1) * self.stride + self.kw;
        if oh < 2 * self.pad + 1 || ow < 2 * self.pad + 1 {
            return Err(shape_err("transposed convolution output is empty"));
        }
        Ok((oh - 2 * self.pad, ow - 2 * self.pad))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn validate(&self, c: usize) -> Result<()> {
        if self.groups == 0 || !self.cin.is_multiple_of(self.groups) || !self.cout.is_multiple_of(self.groups) {
            return Err(shape_err(alloc::format!(
                "channels {}->{} not divisible by {} groups",
                self.cin,
                self.cout,
                self.groups
            )));
        }
        if c != self.cin {
            return Err(shape_err(alloc::format!("conv expects {} input channels, got {c}", self.cin)));
        }
        Ok(())
    }
}

/// Unfold `channels` planes of size `h x w` into `(channels*kh*kw, oh*ow)` columns.
pub(crate) fn im2col<T: Real>(x: &[T], channels: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let n = oh * ow;
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox range: 0 <= ox + kj - p < w
                        let off = kj as isize - p;
                        let lo = (-off).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                        line[..lo].fill(T::zero());
                        if hi > lo {
                            let a = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                        }
                        line[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the planes.
pub(crate) fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, x: &mut [T]) {
    let n = oh * ow;
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x: (B, Cin, H, W)`, `w: (Cout, Cin/groups, kh, kw)`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    let (b, c, h, wd) = x.dims4()?;
    g.validate(c)?;
    if w.shape() != g.weight_shape() {
        return Err(shape_err("conv weight shape mismatch"));
    }
    let (oh, ow) = g.out_hw(h, wd)?;
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let kdim = cin_g * g.kh * g.kw;
    let n = oh * ow;
    let mut out = vec![T::zero(); b * g.cout * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * n] };
    let xd = x.data();
    for bi in 0..b {
        for gi in 0..g.groups {
            let xin = &xd[(bi * c + gi * cin_g) * h * wd..(bi * c + (gi + 1) * cin_g) * h * wd];
            let src: &[T] = if g.is_pointwise() {
                xin
            } else {
                im2col(xin, cin_g, h, wd, g, oh, ow, &mut cols);
                &cols
            };
            let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let dst = &mut out[(bi * g.cout + gi * cout_g) * n..(bi * g.cout + (gi + 1) * cout_g) * n];
            T::gemm(cout_g, kdim, n, T::one(), wg, kdim as isize, 1, src, n as isize, 1, T::zero(), dst, n as isize, 1);
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias.data(), b, g.cout, n);
    }
    Tensor::new(&[b, g.cout, oh, ow], out)
}

pub(crate) fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], b: usize, c: usize, n: usize) {
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut out[(bi * c + ci) * n..(bi * c + ci + 1) * n] {
                *v += bv;
            }
        }
    }
}

/// Per-channel sum of `(B, C, H, W)`, the bias gradient.
pub(crate) fn channel_sums<T: Real>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = gy.dims4()?;
    let n = h * w;
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += gy.data()[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, c, h, wd) = x.dims4()?;
    let (_, _, oh, ow) = gy.dims4()?;
    let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
    let kdim = cin_g * g.kh * g.kw;
    let n = oh * ow;
    let mut dx = if need_dx { Some(vec![T::zero(); x.numel()]) } else { None };
    let mut dw = if need_dw { Some(vec![T::zero(); w.numel()]) } else { None };
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * n] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); kdim * n] };
    let xd = x.data();
    let gd = gy.data();
    for bi in 0..b {
        for gi in 0..g.groups {
            let xr = (bi * c + gi * cin_g) * h * wd..(bi * c + (gi + 1) * cin_g) * h * wd;
            let gyg = &gd[(bi * g.cout + gi * cout_g) * n..(bi * g.cout + (gi + 1) * cout_g) * n];
            let wg = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if pointwise {
                    &xd[xr.clone()]
                } else {
                    im2col(&xd[xr.clone()], cin_g, h, wd, g, oh, ow, &mut cols);
                    &cols
                };
                let dwg = &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
                // dW += gy * cols^T
                T::gemm(cout_g, n, kdim, T::one(), gyg, n as isize, 1, src, 1, n as isize, T::one(), dwg, kdim as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    let dst = &mut dx[xr];
                    T::gemm(kdim, cout_g, n, T::one(), wg, 1, kdim as isize, gyg, n as isize, 1, T::one(), dst, n as isize, 1);
                } else {
                    T::gemm(kdim, cout_g, n, T::one(), wg, 1, kdim as isize, gyg, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
                    col2im(&dcols, cin_g, h, wd, g, oh, ow, &mut dx[xr]);
                }
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(w.shape(), d)).transpose()?;
    Ok((dx, dw))
}

/// Transposed convolution. `x: (B, Cin, H, W)`, `w: (Cin, Cout, kh, kw)`.
///
/// `g` describes the forward convolution this one is the adjoint of, so
/// `g.cin` is the output channel count here; groups must be 1.
pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    let (b, c, h, wd) = x.dims4()?;
    if g.groups != 1 || c != g.cout {
        return Err(shape_err(alloc::format!("transposed conv expects {} channels, got {c}", g.cout)));
    }
    if w.shape() != [g.cout, g.cin, g.kh, g.kw] {
        return Err(shape_err("transposed conv weight shape mismatch"));
    }
    let (oh, ow) = g.transposed_out_hw(h, wd)?;
    // the equivalent forward conv maps (oh, ow) -> (h, wd)
    if g.out_hw(oh, ow)? != (h, wd) {
        return Err(shape_err("transposed conv geometry is not invertible"));
    }
    let kdim = g.cin * g.kh * g.kw;
    let n = h * wd;
    let mut cols = vec![T::zero(); kdim * n];
    let mut out = vec![T::zero(); b * g.cin * oh * ow];
    for bi in 0..b {
        let xb = &x.data()[bi * c * n..(bi + 1) * c * n];
        // cols = W^T x, W viewed as (Cin_x, kdim)
        T::gemm(kdim, c, n, T::one(), w.data(), 1, kdim as isize, xb, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
        col2im(&cols, g.cin, oh, ow, g, h, wd, &mut out[bi * g.cin * oh * ow..(bi + 1) * g.cin * oh * ow]);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias.data(), b, g.cin, oh * ow);
    }
    Tensor::new(&[b, g.cin, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, c, h, wd) = x.dims4()?;
    let (_, _, oh, ow) = gy.dims4()?;
    let kdim = g.cin * g.kh * g.kw;
    let n = h * wd;
    let mut cols = vec![T::zero(); kdim * n];
    let mut dx = if need_dx { Some(vec![T::zero(); x.numel()]) } else { None };
    let mut dw = if need_dw { Some(vec![T::zero(); w.numel()]) } else { None };
    for bi in 0..b {
        let gb = &gy.data()[bi * g.cin * oh * ow..(bi + 1) * g.cin * oh * ow];
        im2col(gb, g.cin, oh, ow, g, h, wd, &mut cols);
        if let Some(dx) = dx.as_mut() {
            T::gemm(c, kdim, n, T::one(), w.data(), kdim as isize, 1, &cols, n as isize, 1, T::zero(), &mut dx[bi * c * n..(bi + 1) * c * n], n as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[bi * c * n..(bi + 1) * c * n];
            T::gemm(c, n, kdim, T::one(), xb, n as isize, 1, &cols, 1, n as isize, T::one(), dw, kdim as isize, 1);
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(w.shape(), d)).transpose()?;
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sextuple-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (oh, ow) = g.out_hw(h, wd).unwrap();
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        let mut out = Tensor::zeros(&[b, g.cout, oh, ow]);
        for bi in 0..b {
            for co in 0..g.cout {
                let grp = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.at4(bi, grp * cin_g + ci, iy as usize, ix as usize);
                                    acc += xv * w.at4(co, ci, ki, kj);
                                }
                            }
                        }
                        out.data_mut()[((bi * g.cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matches_naive_across_geometries() {
        for (i, g) in [
            ConvGeom::new(3, 5, 3, 1, 1),
            ConvGeom::new(4, 6, 3, 2, 1),
            ConvGeom::new(4, 4, 5, 1, 2).with_groups(4),
            ConvGeom::new(6, 4, 1, 1, 0).with_groups(2),
            ConvGeom { cin: 2, cout: 2, kh: 1, kw: 5, stride: 1, pad: 0, groups: 2 },
        ]
        .iter()
        .enumerate()
        {
            let x = rand_tensor(&[2, g.cin, 7, 8], i as u64);
            let w = rand_tensor(&g.weight_shape(), 100 + i as u64);
            let fast = conv2d(&x, &w, None, g).unwrap();
            let slow = conv_naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> must equal <x, dX> and <w, dW> since conv is bilinear
        let g = ConvGeom::new(3, 4, 3, 2, 1);
        let x = rand_tensor(&[2, 3, 8, 8], 1);
        let w = rand_tensor(&g.weight_shape(), 2);
        let y = conv2d(&x, &w, None, &g).unwrap();
        let gy = rand_tensor(y.shape(), 3);
        let (dx, dw) = conv2d_backward(&x, &w, &gy, &g, true, true).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // conv_transpose(y; w) is the adjoint of conv(x; w) with the same weight
        let g = ConvGeom::new(3, 5, 2, 2, 0);
        let x = rand_tensor(&[1, 3, 8, 8], 4);
        let w = rand_tensor(&g.weight_shape(), 5);
        let y = rand_tensor(&[1, 5, 4, 4], 6);
        let cx = conv2d(&x, &w, None, &g).unwrap();
        let ty = conv_transpose2d(&y, &w, None, &g).unwrap();
        assert_eq!(ty.shape(), &[1, 3, 8, 8]);
        let a: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let b: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((a - b).abs() < 1e-10);
    }
}
