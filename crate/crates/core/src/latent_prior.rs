//! Hybrid VAE producing multi-scale latent degradation priors.

use alloc::format;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{gap, Conv2d, ConvTranspose2d, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Architecture hyper-parameters shared by the VAE and the restoration net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub channels: [usize; 4],
    pub heads: usize,
    pub reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { channels: [40, 80, 160, 320], heads: 4, reduction: 8 }
    }
}

impl NetConfig {
    /// A narrow variant for fast numerical checks.
    pub fn tiny() -> Self {
        Self { channels: [8, 8, 16, 16], heads: 2, reduction: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        for &c in &self.channels {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.heads)));
            }
            if c < self.reduction || c % 4 != 0 {
                return Err(Error::Config(format!("{c} channels too few for reduction {}", self.reduction)));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.channels[3]
    }
}

pub const LOGVAR_LIMIT: f64 = 10.0;

/// `f + conv(relu(conv f)) * sigmoid(se(gap f))` with a two-layer
/// squeeze-excite gate.
#[derive(Clone, Copy, Debug)]
pub struct ResAttn {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ResAttn {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, reduction: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let r = (c / reduction).max(1);
        Ok(Self {
            conv1: Conv2d::same(&mut s, "conv1", c, c, 3)?,
            conv2: Conv2d::same(&mut s, "conv2", c, c, 3)?,
            squeeze: Conv2d::same(&mut s, "squeeze", c, r, 1)?,
            excite: Conv2d::same(&mut s, "excite", r, c, 1)?,
        })
    }

    /// The channel gate `sigmoid(excite(relu(squeeze(gap f))))`, `(B, C, 1, 1)`.
    pub fn gate<T: Real>(&self, t: &mut Tape<'_, T>, f: Var) -> Result<Var> {
        let p = gap(t, f)?;
        let s = self.squeeze.forward(t, p)?;
        let s = t.relu(s);
        let e = self.excite.forward(t, s)?;
        Ok(t.sigmoid(e))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f: Var) -> Result<Var> {
        let h = self.conv1.forward(t, f)?;
        let h = t.relu(h);
        let h = self.conv2.forward(t, h)?;
        let g = self.gate(t, f)?;
        let h = t.mul(h, g)?;
        t.add(f, h)
    }
}

/// Multi-head attention with 1x1 projections and a residual connection.
///
/// Tokens are spatial positions; there is no positional encoding.
#[derive(Clone, Copy, Debug)]
pub struct Mhsa {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub o: Conv2d,
    pub heads: usize,
}

impl Mhsa {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
        }
        let mut s = pb.sub(name);
        Ok(Self {
            q: Conv2d::same(&mut s, "q", c, c, 1)?,
            k: Conv2d::same(&mut s, "k", c, c, 1)?,
            v: Conv2d::same(&mut s, "v", c, c, 1)?,
            o: Conv2d::same(&mut s, "o", c, c, 1)?,
            heads,
        })
    }

    pub fn scale(&self, c: usize) -> f64 {
        1.0 / ((c / self.heads) as f64).sqrt()
    }

    /// Self-attention when `kv == q_in`, cross-attention otherwise; no residual.
    pub fn attend<T: Real>(&self, t: &mut Tape<'_, T>, q_in: Var, kv: Var) -> Result<(Var, Var)> {
        let c = t.shape(q_in)[1];
        let q = self.q.forward(t, q_in)?;
        let k = self.k.forward(t, kv)?;
        let v = self.v.forward(t, kv)?;
        let a = t.attention(q, k, v, self.heads, self.scale(c))?;
        Ok((self.o.forward(t, a)?, a))
    }

    /// Output and the raw attention node (whose probabilities the tape keeps
    /// when gradients are tracked).
    pub fn forward_with_attention<T: Real>(&self, t: &mut Tape<'_, T>, f: Var) -> Result<(Var, Var)> {
        let (o, a) = self.attend(t, f, f)?;
        Ok((t.add(f, o)?, a))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f: Var) -> Result<Var> {
        Ok(self.forward_with_attention(t, f)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct HybridVae {
    pub cfg: NetConfig,
    stem: Conv2d,
    downs: [Conv2d; 3],
    enc_blocks: [ResAttn; 4],
    bottleneck: [Mhsa; 2],
    mu_head: Conv2d,
    logvar_head: Conv2d,
    dec_in: ResAttn,
    ups: [ConvTranspose2d; 3],
    dec_blocks: [ResAttn; 3],
    out: Conv2d,
}

/// Encoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub x: [Var; 4],
    pub mu: Var,
    pub logvar: Var,
}

/// Priors detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPriors<T> {
    pub x: [Tensor<T>; 4],
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Real> LatentPriors<T> {
    /// Priors with every entry set to one (the no-prior ablation).
    pub fn ones_like(&self) -> Self {
        Self {
            x: [
                Tensor::ones(self.x[0].shape()),
                Tensor::ones(self.x[1].shape()),
                Tensor::ones(self.x[2].shape()),
                Tensor::ones(self.x[3].shape()),
            ],
            mu: Tensor::ones(self.mu.shape()),
            logvar: Tensor::zeros(self.logvar.shape()),
        }
    }

    /// Ones-valued priors for a `(b, ., h, w)` input under `cfg`.
    pub fn ones(cfg: &NetConfig, b: usize, h: usize, w: usize) -> Self {
        let c = cfg.channels;
        let s = |l: usize| [b, c[l], h >> l, w >> l];
        Self {
            x: [Tensor::ones(&s(0)), Tensor::ones(&s(1)), Tensor::ones(&s(2)), Tensor::ones(&s(3))],
            mu: Tensor::ones(&s(3)),
            logvar: Tensor::zeros(&s(3)),
        }
    }

    pub fn cast<U: Real>(&self) -> LatentPriors<U> {
        LatentPriors {
            x: [self.x[0].cast(), self.x[1].cast(), self.x[2].cast(), self.x[3].cast()],
            mu: self.mu.cast(),
            logvar: self.logvar.cast(),
        }
    }

    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            x: [
                self.x[0].batch_slice(start, len)?,
                self.x[1].batch_slice(start, len)?,
                self.x[2].batch_slice(start, len)?,
                self.x[3].batch_slice(start, len)?,
            ],
            mu: self.mu.batch_slice(start, len)?,
            logvar: self.logvar.batch_slice(start, len)?,
        })
    }
}

impl HybridVae {
    /// Registers all parameters under the builder's scope.
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let r = cfg.reduction;
        let mut enc = pb.sub("enc");
        let stem = Conv2d::same(&mut enc, "stem", 3, c[0], 3)?;
        let downs = [
            Conv2d::build(&mut enc, "down1", ConvGeom::new(c[0], c[1], 3, 2, 1), true)?,
            Conv2d::build(&mut enc, "down2", ConvGeom::new(c[1], c[2], 3, 2, 1), true)?,
            Conv2d::build(&mut enc, "down3", ConvGeom::new(c[2], c[3], 3, 2, 1), true)?,
        ];
        let enc_blocks = [
            ResAttn::build(&mut enc.sub("stage0"), "resattn", c[0], r)?,
            ResAttn::build(&mut enc.sub("stage1"), "resattn", c[1], r)?,
            ResAttn::build(&mut enc.sub("stage2"), "resattn", c[2], r)?,
            ResAttn::build(&mut enc.sub("stage3"), "resattn", c[3], r)?,
        ];
        let bottleneck =
            [Mhsa::build(&mut enc, "mhsa0", c[3], cfg.heads)?, Mhsa::build(&mut enc, "mhsa1", c[3], cfg.heads)?];
        let head = ConvGeom::new(c[3], c[3], 1, 1, 0);
        let mu_head = Conv2d::build_zero(&mut enc, "mu", head, true)?;
        let logvar_head = Conv2d::build_zero(&mut enc, "logvar", head, true)?;
        let mut dec = pb.sub("dec");
        let dec_in = ResAttn::build(&mut dec.sub("stage3"), "resattn", c[3], r)?;
        let ups = [
            ConvTranspose2d::build(&mut dec, "up2", c[3], c[2], 2)?,
            ConvTranspose2d::build(&mut dec, "up1", c[2], c[1], 2)?,
            ConvTranspose2d::build(&mut dec, "up0", c[1], c[0], 2)?,
        ];
        let dec_blocks = [
            ResAttn::build(&mut dec.sub("stage2"), "resattn", c[2], r)?,
            ResAttn::build(&mut dec.sub("stage1"), "resattn", c[1], r)?,
            ResAttn::build(&mut dec.sub("stage0"), "resattn", c[0], r)?,
        ];
        let out = Conv2d::same(&mut dec, "out", c[0], 3, 3)?;
        Ok(Self { cfg, stem, downs, enc_blocks, bottleneck, mu_head, logvar_head, dec_in, ups, dec_blocks, out })
    }

    pub fn res_attn(&self, stage: usize) -> &ResAttn {
        &self.enc_blocks[stage]
    }

    pub fn mhsa(&self, layer: usize) -> &Mhsa {
        &self.bottleneck[layer]
    }

    /// Encodes a signed-range `(B, 3, H, W)` image.
    pub fn encode<T: Real>(&self, t: &mut Tape<'_, T>, img: Var) -> Result<Encoded> {
        check_image(t.shape(img))?;
        let f = self.stem.forward(t, img)?;
        let x0 = self.enc_blocks[0].forward(t, f)?;
        let f = self.downs[0].forward(t, x0)?;
        let x1 = self.enc_blocks[1].forward(t, f)?;
        let f = self.downs[1].forward(t, x1)?;
        let x2 = self.enc_blocks[2].forward(t, f)?;
        let f = self.downs[2].forward(t, x2)?;
        let f = self.enc_blocks[3].forward(t, f)?;
        let f = self.bottleneck[0].forward(t, f)?;
        let x3 = self.bottleneck[1].forward(t, f)?;
        let mu = self.mu_head.forward(t, x3)?;
        let lv = self.logvar_head.forward(t, x3)?;
        let logvar = t.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        Ok(Encoded { x: [x0, x1, x2, x3], mu, logvar })
    }

    /// `tanh(conv(decoder(z)))`.
    pub fn decode<T: Real>(&self, t: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let mut f = self.dec_in.forward(t, z)?;
        for (up, block) in self.ups.iter().zip(&self.dec_blocks) {
            f = up.forward(t, f)?;
            f = block.forward(t, f)?;
        }
        let o = self.out.forward(t, f)?;
        Ok(t.tanh(o))
    }

    /// Priors of `img` computed without gradient tracking.
    pub fn priors<T: Real>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<LatentPriors<T>> {
        let mut t = Tape::new(store).inference();
        let x = t.constant(img.clone());
        let e = self.encode(&mut t, x)?;
        Ok(LatentPriors {
            x: [t.value(e.x[0]).clone(), t.value(e.x[1]).clone(), t.value(e.x[2]).clone(), t.value(e.x[3]).clone()],
            mu: t.value(e.mu).clone(),
            logvar: t.value(e.logvar).clone(),
        })
    }

    /// One evaluation of the composite objective.
    pub fn loss<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        img: Var,
        eps: Var,
        labels: &[usize],
        w: &VaeLossWeights,
    ) -> Result<(Var, VaeLossParts)> {
        let e = self.encode(t, img)?;
        let z = reparameterize(t, e.mu, e.logvar, eps)?;
        let rec = self.decode(t, z)?;
        let diff = t.sub(rec, img)?;
        let diff = t.abs(diff);
        let recon = t.mean(diff);
        let kl = kl_loss(t, e.mu, e.logvar)?;
        let pooled = gap(t, e.x[3])?;
        let b = t.shape(pooled)[0];
        let pooled = t.reshape(pooled, &[b, self.cfg.channels[3]])?;
        let feats = l2_normalize_rows(t, pooled)?;
        let (con, degenerate) = supcon_loss(t, feats, labels, w.tau)?;
        let kl_w = t.scale(kl, w.beta);
        let con_w = t.scale(con, w.lambda_con);
        let total = t.add(recon, kl_w)?;
        let total = t.add(total, con_w)?;
        let parts = VaeLossParts {
            total: t.value(total).data()[0].as_f64(),
            recon: t.value(recon).data()[0].as_f64(),
            kl: t.value(kl).data()[0].as_f64(),
            supcon: t.value(con).data()[0].as_f64(),
            beta: w.beta,
            supcon_degenerate: degenerate,
        };
        Ok((total, parts))
    }
}

fn check_image(s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!(
            "expected (B, 3, H, W) with H, W positive multiples of 8, got {}",
            crate::error::fmt_shape(s)
        )));
    }
    Ok(())
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(t: &mut Tape<'_, T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let h = t.scale(logvar, 0.5);
    let s = t.exp(h);
    let n = t.mul(s, eps)?;
    t.add(mu, n)
}

/// `-1/2 sum(1 + logvar - mu^2 - exp(logvar))` per sample, averaged over the batch.
pub fn kl_loss<T: Real>(t: &mut Tape<'_, T>, mu: Var, logvar: Var) -> Result<Var> {
    let b = t.shape(mu)[0].max(1);
    let m2 = t.square(mu);
    let ev = t.exp(logvar);
    let a = t.shift(logvar, 1.0);
    let a = t.sub(a, m2)?;
    let a = t.sub(a, ev)?;
    let s = t.sum(a);
    Ok(t.scale(s, -0.5 / b as f64))
}

/// Row-wise `x / sqrt(|x|^2 + 1e-12)` of an `(N, D)` matrix.
pub fn l2_normalize_rows<T: Real>(t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let sq = t.square(x);
    let n = t.sum_axes(sq, &[1])?;
    let n = t.shift(n, 1e-12);
    let n = t.sqrt(n);
    t.div(x, n)
}

/// Supervised contrastive loss of unit-norm rows `feats: (N, D)`.
///
/// Averaged over anchors with at least one positive. Returns `(0, true)` when
/// no anchor has a positive.
pub fn supcon_loss<T: Real>(t: &mut Tape<'_, T>, feats: Var, labels: &[usize], tau: f64) -> Result<(Var, bool)> {
    let s = t.shape(feats);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("{} labels for features {}", labels.len(), crate::error::fmt_shape(s))));
    }
    let n = labels.len();
    let positives: Vec<usize> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count()).collect();
    let valid = positives.iter().filter(|&&p| p > 0).count();
    if valid == 0 {
        return Ok((t.constant(Tensor::scalar(T::zero())), true));
    }
    let not_self = Tensor::from_fn(&[n, n], |k| if k / n == k % n { T::zero() } else { T::one() });
    let pos = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if i != j && labels[i] == labels[j] {
            T::one()
        } else {
            T::zero()
        }
    });
    let pad = Tensor::from_fn(&[n, 1], |i| if positives[i] == 0 { T::one() } else { T::zero() });
    let weight = Tensor::from_fn(&[n, 1], |i| if positives[i] == 0 { T::zero() } else { T::of(1.0 / valid as f64) });
    let gram = t.matmul(feats, feats, false, true)?;
    // |z_i . z_k| <= 1, so 1/tau bounds every logit
    let logits = t.scale(gram, 1.0 / tau);
    let logits = t.shift(logits, -1.0 / tau);
    let e = t.exp(logits);
    let not_self = t.constant(not_self);
    let pos = t.constant(pos);
    let e_all = t.mul(e, not_self)?;
    let denom = t.sum_axes(e_all, &[1])?;
    let e_pos = t.mul(e, pos)?;
    let num = t.sum_axes(e_pos, &[1])?;
    let pad = t.constant(pad);
    let num = t.add(num, pad)?;
    let ln_d = t.ln(denom);
    let ln_n = t.ln(num);
    let per = t.sub(ln_d, ln_n)?;
    let weight = t.constant(weight);
    let per = t.mul(per, weight)?;
    Ok((t.sum(per), false))
}

/// KL weight at step `t`: `min(beta_max, beta_max * t / t1)`.
pub fn beta_schedule(step: usize, t1: usize, beta_max: f64) -> f64 {
    if t1 == 0 {
        return beta_max;
    }
    (beta_max * step as f64 / t1 as f64).min(beta_max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossWeights {
    pub beta: f64,
    pub lambda_con: f64,
    pub tau: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self { beta: 0.3, lambda_con: 0.01, tau: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub supcon: f64,
    pub beta: f64,
    pub supcon_degenerate: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kl_of(mu: &[f64], lv: &[f64]) -> f64 {
        let mut t = Tape::<f64>::detached();
        let n = mu.len();
        let m = t.constant(Tensor::from_f64(&[1, n], mu).unwrap());
        let l = t.constant(Tensor::from_f64(&[1, n], lv).unwrap());
        let k = kl_loss(&mut t, m, l).unwrap();
        t.value(k).data()[0]
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_of(&[0.0], &[0.0]), 0.0);
        assert!((kl_of(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let expect = 0.5 * (3.0 - 4f64.ln());
        assert!((kl_of(&[0.0], &[4f64.ln()]) - expect).abs() < 1e-12);
    }

    /// Direct evaluation of the per-anchor formula.
    fn supcon_brute(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let n = z.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let p: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if p.is_empty() {
                continue;
            }
            let num: f64 = p.iter().map(|&j| (dot(&z[i], &z[j]) / tau).exp()).sum();
            let den: f64 = (0..n).filter(|&k| k != i).map(|k| (dot(&z[i], &z[k]) / tau).exp()).sum();
            total += -(num / den).ln();
            count += 1;
        }
        total / count as f64
    }

    fn supcon_tape(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let d = z[0].len();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let mut t = Tape::<f64>::detached();
        let f = t.constant(Tensor::from_f64(&[z.len(), d], &flat).unwrap());
        let (l, _) = supcon_loss(&mut t, f, labels, tau).unwrap();
        t.value(l).data()[0]
    }

    #[test]
    fn supcon_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        for n in 2usize..=8 {
            let z: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| x / norm).collect()
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % n.div_ceil(2)).collect();
            let a = supcon_tape(&z, &labels, 0.1);
            let b = supcon_brute(&z, &labels, 0.1);
            assert!((a - b).abs() < 1e-8, "n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn supcon_limits() {
        let same = vec![vec![1.0, 0.0]; 4];
        let labels = [0, 0, 0, 1];
        // anchors 0..2 have two positives each; anchor 3 has none
        let expect = 3f64.ln() - 2f64.ln();
        assert!((supcon_tape(&same, &labels, 0.1) - expect).abs() < 1e-12);
        let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let good = supcon_tape(&z, &[0, 0, 1, 1], 0.1);
        let shuffled = supcon_tape(&z, &[0, 1, 0, 1], 0.1);
        assert!(good < shuffled);
        let hot = supcon_tape(&z, &[0, 0, 1, 1], 1e6);
        assert!((hot - 3f64.ln()).abs() < 1e-5);
        let mut t = Tape::<f64>::detached();
        let f = t.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let (l, degenerate) = supcon_loss(&mut t, f, &[0], 0.1).unwrap();
        assert!(degenerate && t.value(l).data()[0] == 0.0);
    }

    #[test]
    fn beta_schedule_ramps() {
        assert_eq!(beta_schedule(0, 3000, 0.3), 0.0);
        assert!((beta_schedule(1500, 3000, 0.3) - 0.15).abs() < 1e-15);
        assert_eq!(beta_schedule(3000, 3000, 0.3), 0.3);
        assert_eq!(beta_schedule(9000, 3000, 0.3), 0.3);
    }

    #[test]
    fn reparameterize_cases() {
        let mut t = Tape::<f64>::detached();
        let mu = t.constant(Tensor::from_f64(&[3], &[0.3, -1.7, 2.0]).unwrap());
        let lv = t.constant(Tensor::from_f64(&[3], &[0.5, -2.0, 4.0]).unwrap());
        let zero = t.constant(Tensor::zeros(&[3]));
        let z = reparameterize(&mut t, mu, lv, zero).unwrap();
        assert_eq!(t.value(z), t.value(mu));
        let m0 = t.constant(Tensor::zeros(&[3]));
        let l0 = t.constant(Tensor::zeros(&[3]));
        let e = t.constant(Tensor::from_f64(&[3], &[0.1, 0.2, -0.3]).unwrap());
        let z = reparameterize(&mut t, m0, l0, e).unwrap();
        assert_eq!(t.value(z), t.value(e));
    }

    fn tiny() -> (ParamStore<f64>, HybridVae) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vae = HybridVae::build(&mut ParamBuilder::new(&mut store, &mut rng, "vae"), NetConfig::tiny()).unwrap();
        (store, vae)
    }

    #[test]
    fn shapes_and_initial_prior() {
        let (store, vae) = tiny();
        let img = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i % 7) as f64 - 3.0) / 4.0);
        let p = vae.priors(&store, &img).unwrap();
        let c = NetConfig::tiny().channels;
        for l in 0..4 {
            assert_eq!(p.x[l].shape(), &[2, c[l], 16 >> l, 16 >> l]);
        }
        assert!(p.mu.data().iter().all(|&v| v == 0.0) && p.logvar.data().iter().all(|&v| v == 0.0));
        let mut t = Tape::new(&store);
        let z = t.constant(Tensor::from_fn(&[1, c[3], 2, 2], |i| (i as f64 * 0.3).sin() * 3.0));
        let out = vae.decode(&mut t, z).unwrap();
        assert_eq!(t.shape(out), &[1, 3, 16, 16]);
        assert!(t.value(out).data().iter().all(|&v| v > -1.0 && v < 1.0));
        let bad = t.constant(Tensor::zeros(&[1, 3, 12, 12]));
        assert!(matches!(vae.encode(&mut t, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn resattn_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = ResAttn::build(&mut ParamBuilder::new(&mut store, &mut rng, ""), "r", 8, 4).unwrap();
        let mut zeroed = store.clone();
        for id in store.ids() {
            zeroed.get_mut(id).map_inplace(|_| 0.0);
        }
        let mut t = Tape::new(&zeroed);
        let x = t.constant(Tensor::from_fn(&[1, 8, 8, 8], |i| (i as f64).cos()));
        let y = block.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let g = block.gate(&mut t, x).unwrap();
        assert!(t.value(g).data().iter().all(|&v| v == 0.5));
        let wrong = t.constant(Tensor::zeros(&[1, 4, 8, 8]));
        assert!(matches!(block.forward(&mut t, wrong), Err(Error::Shape(_))));
    }
}
