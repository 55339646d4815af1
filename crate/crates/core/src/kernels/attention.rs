//! Multi-head scaled dot-product attention over spatial tokens.
//!
//! Inputs are channel-major: `q: (B, C, Nq)`, `k, v: (B, C, Nk)`. Channels
//! are split into `heads` contiguous groups of `C / heads`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub channels: usize,
    pub heads: usize,
    pub nq: usize,
    pub nk: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

// query rows per block when probabilities are not retained
pub const ROW_BLOCK: usize = 256;

pub(crate) fn softmax_rows<T: Real>(s: &mut [T], ncols: usize) {
    for row in s.chunks_mut(ncols) {
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        let inv = T::one() / z;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Returns the output `(B, C, Nq)` and, if `keep_probs`, the row-stochastic
/// attention matrices `(B, heads, Nq, Nk)`.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], d: AttnDims, scale: T, keep_probs: bool) -> (Vec<T>, Option<Vec<T>>) {
    let (c, nq, nk, dh) = (d.channels, d.nq, d.nk, d.head_dim());
    let mut out = vec![T::zero(); d.batch * c * nq];
    let mut probs = if keep_probs { Some(vec![T::zero(); d.batch * d.heads * nq * nk]) } else { None };
    let mut block = if keep_probs { Vec::new() } else { vec![T::zero(); ROW_BLOCK.min(nq) * nk] };
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off_q = (b * c + h * dh) * nq;
            let off_k = (b * c + h * dh) * nk;
            let qh = &q[off_q..off_q + dh * nq];
            let kh = &k[off_k..off_k + dh * nk];
            let vh = &v[off_k..off_k + dh * nk];
            let oh = &mut out[off_q..off_q + dh * nq];
            let (rows_per, buf): (usize, &mut [T]) = match probs.as_mut() {
                Some(p) => {
                    let base = (b * d.heads + h) * nq * nk;
                    (nq, &mut p[base..base + nq * nk])
                }
                None => (ROW_BLOCK.min(nq), &mut block[..]),
            };
            let mut i0 = 0;
            while i0 < nq {
                let rows = rows_per.min(nq - i0);
                let s = &mut buf[..rows * nk];
                T::gemm(rows, dh, nk, scale, &qh[i0..], 1, nq as isize, kh, nk as isize, 1, T::zero(), s, nk as isize, 1);
                softmax_rows(s, nk);
                T::gemm(dh, nk, rows, T::one(), vh, nk as isize, 1, s, 1, nk as isize, T::zero(), &mut oh[i0..], nq as isize, 1);
                i0 += rows;
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given the retained probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    d: AttnDims,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, nq, nk, dh) = (d.channels, d.nq, d.nk, d.head_dim());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); nq * nk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off_q = (b * c + h * dh) * nq;
            let off_k = (b * c + h * dh) * nk;
            let p = &probs[(b * d.heads + h) * nq * nk..(b * d.heads + h + 1) * nq * nk];
            let go = &gout[off_q..off_q + dh * nq];
            let vh = &v[off_k..off_k + dh * nk];
            // dV = dO P
            T::gemm(dh, nq, nk, T::one(), go, nq as isize, 1, p, nk as isize, 1, T::zero(), &mut dv[off_k..off_k + dh * nk], nk as isize, 1);
            // dP = dO^T V
            T::gemm(nq, dh, nk, T::one(), go, 1, nq as isize, vh, nk as isize, 1, T::zero(), &mut ds, nk as isize, 1);
            for (dsr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dsr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            let qh = &q[off_q..off_q + dh * nq];
            let kh = &k[off_k..off_k + dh * nk];
            // dQ = scale K dS^T
            T::gemm(dh, nk, nq, scale, kh, nk as isize, 1, &ds, 1, nk as isize, T::zero(), &mut dq[off_q..off_q + dh * nq], nq as isize, 1);
            // dK = scale Q dS
            T::gemm(dh, nq, nk, scale, qh, nq as isize, 1, &ds, nk as isize, 1, T::zero(), &mut dk[off_k..off_k + dh * nk], nk as isize, 1);
        }
    }
    (dq, dk, dv)
}
