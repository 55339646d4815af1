//! Forward 2-D discrete Fourier transform on split real/imaginary planes.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! other lengths fall back to a direct O(n^2) DFT.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;

use crate::real::Real;

/// Precomputed plan for 1-D transforms of length `n`.
pub(crate) struct Plan<T> {
    n: usize,
    // e^{-2 pi i k / n}, k < n
    cos: Vec<T>,
    sin: Vec<T>,
    bitrev: Vec<usize>,
    pow2: bool,
}

impl<T: Real> Plan<T> {
    pub(crate) fn new(n: usize) -> Self {
        let pow2 = n.is_power_of_two();
        let cos = (0..n).map(|k| T::of(Float::cos(-2.0 * PI * k as f64 / n as f64))).collect();
        let sin = (0..n).map(|k| T::of(Float::sin(-2.0 * PI * k as f64 / n as f64))).collect();
        let bitrev = if pow2 && n > 1 {
            let bits = n.trailing_zeros();
            (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect()
        } else {
            (0..n).collect()
        };
        Self { n, cos, sin, bitrev, pow2 }
    }

    /// In-place forward transform of one strided sequence.
    fn run(&self, re: &mut [T], im: &mut [T], scratch: &mut [T]) {
        let n = self.n;
        if n <= 1 {
            return;
        }
        if !self.pow2 {
            let (sr, si) = scratch[..2 * n].split_at_mut(n);
            for k in 0..n {
                let (mut ar, mut ai) = (T::zero(), T::zero());
                for j in 0..n {
                    let t = (k * j) % n;
                    let (c, s) = (self.cos[t], self.sin[t]);
                    ar += re[j] * c - im[j] * s;
                    ai += re[j] * s + im[j] * c;
                }
                sr[k] = ar;
                si[k] = ai;
            }
            re.copy_from_slice(sr);
            im.copy_from_slice(si);
            return;
        }
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (c, s) = (self.cos[k * step], self.sin[k * step]);
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * c - im[b] * s;
                    let ti = re[b] * s + im[b] * c;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}

/// In-place forward 2-D DFT of an `h x w` plane.
pub(crate) fn fft2<T: Real>(re: &mut [T], im: &mut [T], h: usize, w: usize, rows: &Plan<T>, cols: &Plan<T>) {
    let mut scratch = vec![T::zero(); 2 * h.max(w)];
    for y in 0..h {
        rows.run(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], &mut scratch);
    }
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        cols.run(&mut cr, &mut ci, &mut scratch);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
}

/// Bins of a real `h x w` signal whose transform is purely real.
pub(crate) fn is_self_conjugate(u: usize, v: usize, h: usize, w: usize) -> bool {
    (u == 0 || 2 * u == h) && (v == 0 || 2 * v == w)
}
