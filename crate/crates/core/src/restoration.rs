//! Degradation-aware restoration network.
//!
//! Luminance/chrominance encoders with prior-modulated attention, spatial
//! degradation maps, a prior-conditioned bottleneck fusion and an
//! element-wise gated decoder.

use alloc::format;

use crate::autograd::{Tape, Var};
use crate::error::{fmt_shape, Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::latent_prior::{LatentPriors, Mhsa, NetConfig};
use crate::nn::{ChannelNorm, Conv2d, ConvTranspose2d, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Luminance is kept on this dyadic grid so that `C + L` reproduces the
/// input exactly.
pub const LUMA_QUANTUM: f64 = 1.0 / 16_777_216.0;

pub const LEAKY_SLOPE: f64 = 0.1;

/// Splits `(B, 3, H, W)` into luminance `(B, 1, H, W)` and chrominance
/// `C = RGB - L`.
///
/// `L` is the weighted channel sum rounded to a multiple of 2^-24, so
/// `lc_recompose` is bit-exact in double precision for every value with
/// magnitude at least 2^-24 (all single-precision image data).
pub fn lc_decompose<T: Real>(img: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("LC decomposition needs 3 channels, got {c}")));
    }
    let n = h * w;
    let d = img.data();
    let mut l = Tensor::zeros(&[b, 1, h, w]);
    let mut chroma = Tensor::zeros(&[b, 3, h, w]);
    for bi in 0..b {
        for j in 0..n {
            let px = |ch: usize| d[(bi * 3 + ch) * n + j];
            let y = LUMA[0] * px(0).as_f64() + LUMA[1] * px(1).as_f64() + LUMA[2] * px(2).as_f64();
            let y = T::of((y / LUMA_QUANTUM).round() * LUMA_QUANTUM);
            l.data_mut()[bi * n + j] = y;
            for ch in 0..3 {
                chroma.data_mut()[(bi * 3 + ch) * n + j] = px(ch) - y;
            }
        }
    }
    Ok((l, chroma))
}

/// `C + L` broadcast over channels.
pub fn lc_recompose<T: Real>(l: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::broadcast_zip(c, l, |a, b| a + b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Lum,
    Chrom,
}

/// Branch-specific input embedding.
///
/// A depthwise 5x5 estimator (4 groups) on `[I, s]` followed by a 1x1
/// projection yields a map `M`; the embedding is
/// `leaky(conv3x3(I * M + I))`. The summary `s` is `L` for the luminance
/// branch and the channel mean of `C` for the chrominance branch.
#[derive(Clone, Copy, Debug)]
pub struct InputEmbed {
    pub depthwise: Conv2d,
    pub project: Conv2d,
    pub embed: Conv2d,
}

impl InputEmbed {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c0: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            depthwise: Conv2d::build(&mut s, "estimator_dw", ConvGeom::new(4, 4, 5, 1, 2).with_groups(4), true)?,
            project: Conv2d::same(&mut s, "estimator_pw", 4, 3, 1)?,
            embed: Conv2d::same(&mut s, "embed", 3, c0, 3)?,
        })
    }

    /// The modulation map `M`, `(B, 3, H, W)`.
    pub fn map<T: Real>(&self, t: &mut Tape<'_, T>, img: Var, summary: Var) -> Result<Var> {
        let x = t.concat(&[img, summary], 1)?;
        let m = self.depthwise.forward(t, x)?;
        self.project.forward(t, m)
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, img: Var, summary: Var) -> Result<Var> {
        let m = self.map(t, img, summary)?;
        self.embed_with_map(t, img, m)
    }

    pub fn embed_with_map<T: Real>(&self, t: &mut Tape<'_, T>, img: Var, m: Var) -> Result<Var> {
        let im = t.mul(img, m)?;
        let x = t.add(im, img)?;
        let e = self.embed.forward(t, x)?;
        Ok(t.leaky_relu(e, LEAKY_SLOPE))
    }
}

/// Degradation-aware encoder block: spatial multi-head attention whose
/// values are modulated element-wise by the prior, plus a residual.
#[derive(Clone, Copy, Debug)]
pub struct Daeb {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub o: Conv2d,
    pub heads: usize,
}

impl Daeb {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
        }
        let mut s = pb.sub(name);
        Ok(Self {
            q: Conv2d::same(&mut s, "q", c, c, 1)?,
            k: Conv2d::same(&mut s, "k", c, c, 1)?,
            v: Conv2d::same(&mut s, "v", c, c, 1)?,
            o: Conv2d::build(&mut s, "o", ConvGeom::new(c, c, 1, 1, 0), false)?,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, f: Var, x: Var) -> Result<Var> {
        if t.shape(f) != t.shape(x) {
            return Err(Error::Shape(format!(
                "prior {} does not match features {}",
                fmt_shape(t.shape(x)),
                fmt_shape(t.shape(f))
            )));
        }
        let c = t.shape(f)[1];
        let q = self.q.forward(t, f)?;
        let k = self.k.forward(t, f)?;
        let v = self.v.forward(t, f)?;
        let v = t.mul(v, x)?;
        let a = t.attention(q, k, v, self.heads, 1.0 / ((c / self.heads) as f64).sqrt())?;
        let o = self.o.forward(t, a)?;
        t.add(f, o)
    }
}

/// One branch encoder: embedding, then a DAEB per stage with stride-2
/// convolutions between stages.
#[derive(Clone, Copy, Debug)]
pub struct BranchEncoder {
    pub embed: InputEmbed,
    pub downs: [Conv2d; 3],
    pub blocks: [Daeb; 4],
}

impl BranchEncoder {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &NetConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut s = pb.sub(name);
        let embed = InputEmbed::build(&mut s, "input", c[0])?;
        let down = |s: &mut ParamBuilder<'_, T>, l: usize| {
            Conv2d::build(s, &format!("down{l}"), ConvGeom::new(c[l - 1], c[l], 3, 2, 1), true)
        };
        let downs = [down(&mut s, 1)?, down(&mut s, 2)?, down(&mut s, 3)?];
        let block = |s: &mut ParamBuilder<'_, T>, l: usize| Daeb::build(s, &format!("daeb{l}"), c[l], cfg.heads);
        let blocks = [block(&mut s, 0)?, block(&mut s, 1)?, block(&mut s, 2)?, block(&mut s, 3)?];
        Ok(Self { embed, downs, blocks })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, img: Var, summary: Var, x: &[Var; 4]) -> Result<[Var; 4]> {
        let e = self.embed.forward(t, img, summary)?;
        let f0 = self.blocks[0].forward(t, e, x[0])?;
        let mut out = [f0; 4];
        for l in 1..4 {
            let d = self.downs[l - 1].forward(t, out[l - 1])?;
            let d = t.leaky_relu(d, LEAKY_SLOPE);
            out[l] = self.blocks[l].forward(t, d, x[l])?;
        }
        Ok(out)
    }
}

/// Builds the single-channel degradation map of one encoder stage.
#[derive(Clone, Copy, Debug)]
pub struct MappingBlock {
    pub lc: Conv2d,
    pub freq: Conv2d,
    pub q: Conv2d,
    pub kv: Conv2d,
    pub refine: Conv2d,
    pub head1: Conv2d,
    pub head2: Conv2d,
}

/// Intermediates of a mapping block.
#[derive(Clone, Copy, Debug)]
pub struct MapParts {
    pub spectrum: Var,
    pub attention: Var,
    pub g: Var,
}

impl MappingBlock {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let r = (c / 4).max(1);
        Ok(Self {
            lc: Conv2d::same(&mut s, "lc", c, c, 3)?,
            freq: Conv2d::same(&mut s, "freq", 4 * c, c, 1)?,
            q: Conv2d::same(&mut s, "q", c, c, 1)?,
            kv: Conv2d::same(&mut s, "kv", c, c, 1)?,
            refine: Conv2d::same(&mut s, "refine", c, c, 3)?,
            head1: Conv2d::same(&mut s, "head1", c, r, 3)?,
            head2: Conv2d::same(&mut s, "head2", r, 1, 1)?,
        })
    }

    pub fn forward_parts<T: Real>(&self, t: &mut Tape<'_, T>, l: Var, c: Var, x: Var) -> Result<MapParts> {
        if t.shape(l) != t.shape(c) || t.shape(l) != t.shape(x) {
            return Err(Error::Shape(format!(
                "mapping block inputs L{} C{} x{}",
                fmt_shape(t.shape(l)),
                fmt_shape(t.shape(c)),
                fmt_shape(t.shape(x))
            )));
        }
        let e = t.add(l, c)?;
        let f_lc = self.lc.forward(t, e)?;
        // [|F(L)|, |F(C)|, angle F(L), angle F(C)]
        let lc = t.concat(&[l, c], 1)?;
        let spectrum = t.spectrum(lc)?;
        let f_freq = self.freq.forward(t, spectrum)?;
        let f_freq = t.relu(f_freq);
        let f = t.add(f_lc, f_freq)?;
        let q = self.q.forward(t, f)?;
        let kv = self.kv.forward(t, x)?;
        let qk = t.mul(q, kv)?;
        let attention = t.sigmoid(qk);
        let y = t.mul(attention, kv)?;
        let y = t.add(y, f)?;
        let h = self.refine.forward(t, y)?;
        let h = t.relu(h);
        let h = self.head1.forward(t, h)?;
        let h = t.relu(h);
        let h = self.head2.forward(t, h)?;
        let g = t.sigmoid(h);
        Ok(MapParts { spectrum, attention, g })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, l: Var, c: Var, x: Var) -> Result<Var> {
        Ok(self.forward_parts(t, l, c, x)?.g)
    }
}

/// Bottleneck fusion of both branches conditioned on `mu`.
#[derive(Clone, Copy, Debug)]
pub struct LatentFusion {
    pub self_l: Mhsa,
    pub self_c: Mhsa,
    pub cross: Mhsa,
    pub norm: ChannelNorm,
    pub phi1: Conv2d,
    pub phi2: Conv2d,
}

impl LatentFusion {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, heads: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            self_l: Mhsa::build(&mut s, "mhsa_l", c, heads)?,
            self_c: Mhsa::build(&mut s, "mhsa_c", c, heads)?,
            cross: Mhsa::build(&mut s, "mhca", c, heads)?,
            norm: ChannelNorm::build(&mut s, "norm", c)?,
            phi1: Conv2d::same(&mut s, "phi1", c, c, 1)?,
            phi2: Conv2d::build_zero(&mut s, "phi2", ConvGeom::new(c, 2 * c, 1, 1, 0), true)?,
        })
    }

    /// `LayerNorm(MHCA(C^, L^) + C^ + L^)` with chrominance as the query.
    pub fn fuse<T: Real>(&self, t: &mut Tape<'_, T>, l3: Var, c3: Var) -> Result<Var> {
        let lh = self.self_l.forward(t, l3)?;
        let ch = self.self_c.forward(t, c3)?;
        let (cross, _) = self.cross.attend(t, ch, lh)?;
        let s = t.add(cross, ch)?;
        let s = t.add(s, lh)?;
        self.norm.forward(t, s)
    }

    /// `[gamma, beta]` from the global descriptor.
    pub fn modulation<T: Real>(&self, t: &mut Tape<'_, T>, mu: Var) -> Result<(Var, Var)> {
        let h = self.phi1.forward(t, mu)?;
        let h = t.silu(h);
        let gb = self.phi2.forward(t, h)?;
        let c = t.shape(mu)[1];
        Ok((t.narrow(gb, 1, 0, c)?, t.narrow(gb, 1, c, c)?))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, l3: Var, c3: Var, mu: Var) -> Result<Var> {
        if t.shape(mu) != t.shape(l3) {
            return Err(Error::Shape(format!(
                "mu {} does not match bottleneck {}",
                fmt_shape(t.shape(mu)),
                fmt_shape(t.shape(l3))
            )));
        }
        let f = self.fuse(t, l3, c3)?;
        let (gamma, beta) = self.modulation(t, mu)?;
        film(t, f, gamma, beta)
    }
}

/// `f * (1 + gamma) + beta`.
pub fn film<T: Real>(t: &mut Tape<'_, T>, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let g1 = t.shift(gamma, 1.0);
    let m = t.mul(f, g1)?;
    t.add(m, beta)
}

/// Decoder stage gated element-wise by the degradation map; linear in the
/// number of pixels.
#[derive(Clone, Copy, Debug)]
pub struct ThreeWd {
    pub up: ConvTranspose2d,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub phi: Conv2d,
}

impl ThreeWd {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, c: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            up: ConvTranspose2d::build(&mut s, "up", cin, c, 2)?,
            q: Conv2d::same(&mut s, "q", c, c, 1)?,
            k: Conv2d::same(&mut s, "k", 1, c, 1)?,
            v: Conv2d::same(&mut s, "v", c, c, 1)?,
            phi: Conv2d::same(&mut s, "phi", c, c, 3)?,
        })
    }

    /// `leaky(conv3x3(sigmoid(W_Q u * W_K g) * W_V e + u))` on already
    /// upsampled `u`.
    pub fn stage<T: Real>(&self, t: &mut Tape<'_, T>, u: Var, g: Var, e: Var) -> Result<Var> {
        let q = self.q.forward(t, u)?;
        let k = self.k.forward(t, g)?;
        let v = self.v.forward(t, e)?;
        let qk = t.mul(q, k)?;
        let a = t.sigmoid(qk);
        let av = t.mul(a, v)?;
        let s = t.add(av, u)?;
        let d = self.phi.forward(t, s)?;
        Ok(t.leaky_relu(d, LEAKY_SLOPE))
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, prev: Var, g: Var, e: Var) -> Result<Var> {
        let u = self.up.forward(t, prev)?;
        if t.shape(u) != t.shape(e) {
            return Err(Error::Shape(format!(
                "upsampled {} does not match skip {}",
                fmt_shape(t.shape(u)),
                fmt_shape(t.shape(e))
            )));
        }
        self.stage(t, u, g, e)
    }
}

/// Priors placed on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub x: [Var; 4],
    pub mu: Var,
}

impl PriorVars {
    pub fn constants<T: Real>(t: &mut Tape<'_, T>, p: &LatentPriors<T>) -> Self {
        let x = [
            t.constant(p.x[0].clone()),
            t.constant(p.x[1].clone()),
            t.constant(p.x[2].clone()),
            t.constant(p.x[3].clone()),
        ];
        Self { x, mu: t.constant(p.mu.clone()) }
    }
}

/// Nodes of one restoration pass.
#[derive(Clone, Copy, Debug)]
pub struct DairOutput {
    pub output: Var,
    pub lum: [Var; 4],
    pub chrom: [Var; 4],
    pub maps: [Var; 3],
    pub fused: Var,
    pub decoded: Var,
}

#[derive(Clone, Debug)]
pub struct Dair {
    pub cfg: NetConfig,
    pub lum: BranchEncoder,
    pub chrom: BranchEncoder,
    pub maps: [MappingBlock; 3],
    pub fusion: LatentFusion,
    /// Decoder stages at 1/4, 1/2 and full resolution.
    pub decoder: [ThreeWd; 3],
    pub rec: Conv2d,
}

impl Dair {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let lum = BranchEncoder::build(pb, "enc_l", &cfg)?;
        let chrom = BranchEncoder::build(pb, "enc_c", &cfg)?;
        let maps = [
            MappingBlock::build(pb, "map0", c[0])?,
            MappingBlock::build(pb, "map1", c[1])?,
            MappingBlock::build(pb, "map2", c[2])?,
        ];
        let fusion = LatentFusion::build(pb, "fusion", c[3], cfg.heads)?;
        let decoder =
            [ThreeWd::build(pb, "dec2", c[3], c[2])?, ThreeWd::build(pb, "dec1", c[2], c[1])?, ThreeWd::build(pb, "dec0", c[1], c[0])?];
        let rec = Conv2d::build_zero(pb, "rec", ConvGeom::new(c[0], 3, 3, 1, 1), true)?;
        Ok(Self { cfg, lum, chrom, maps, fusion, decoder, rec })
    }

    fn check_priors<T: Real>(&self, t: &Tape<'_, T>, img: Var, p: &PriorVars) -> Result<()> {
        let s = t.shape(img);
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("expected (B, 3, H, W) with H, W multiples of 8, got {}", fmt_shape(s))));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        for l in 0..4 {
            let want = [b, self.cfg.channels[l], h >> l, w >> l];
            if t.shape(p.x[l]) != want {
                return Err(Error::Shape(format!(
                    "prior x{l} is {} but the image needs {}",
                    fmt_shape(t.shape(p.x[l])),
                    fmt_shape(&want)
                )));
            }
        }
        if t.shape(p.mu) != [b, self.cfg.channels[3], h >> 3, w >> 3] {
            return Err(Error::Shape(format!("mu {} does not match the image", fmt_shape(t.shape(p.mu)))));
        }
        Ok(())
    }

    /// Restores a signed-range image. The image is treated as data: no
    /// gradient flows into it.
    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, img: Var, p: &PriorVars) -> Result<DairOutput> {
        self.check_priors(t, img, p)?;
        let (l, c) = lc_decompose(t.value(img))?;
        let l_sum = t.constant(l);
        let c_mean = t.constant(crate::tensor::sum_to(&c, &[c.shape()[0], 1, c.shape()[2], c.shape()[3]]).map(|v| v / T::of(3.0)));
        let lum = self.lum.forward(t, img, l_sum, &p.x)?;
        let chrom = self.chrom.forward(t, img, c_mean, &p.x)?;
        let mut maps = [lum[0]; 3];
        for l in 0..3 {
            maps[l] = self.maps[l].forward(t, lum[l], chrom[l], p.x[l])?;
        }
        let fused = self.fusion.forward(t, lum[3], chrom[3], p.mu)?;
        let mut d = fused;
        for (i, stage) in self.decoder.iter().enumerate() {
            let l = 2 - i;
            let e = t.add(lum[l], chrom[l])?;
            d = stage.forward(t, d, maps[l], e)?;
        }
        let r = self.rec.forward(t, d)?;
        let r = t.tanh(r);
        let out = t.add(r, img)?;
        let output = t.clamp(out, -1.0, 1.0);
        Ok(DairOutput { output, lum, chrom, maps, fused, decoded: d })
    }

    /// Inference-only restoration of `img` under `priors`.
    pub fn restore<T: Real>(&self, store: &ParamStore<T>, img: &Tensor<T>, priors: &LatentPriors<T>) -> Result<Tensor<T>> {
        let mut t = Tape::new(store).inference();
        let x = t.constant(img.clone());
        let p = PriorVars::constants(&mut t, priors);
        let o = self.forward(&mut t, x, &p)?;
        Ok(t.take_value(o.output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_prior::HybridVae;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lc_examples() {
        let img = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let (l, c) = lc_decompose(&img).unwrap();
        assert_eq!(l.data()[0], 1.0);
        assert_eq!([c.data()[0], c.data()[2], c.data()[4]], [0.0; 3]);
        assert!((l.data()[1] - 0.299).abs() < 1e-7);
        let expect = [0.701, -0.299, -0.299];
        for ch in 0..3 {
            assert!((c.data()[ch * 2 + 1] - expect[ch]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn lc_round_trip_is_bitwise(codes in proptest::collection::vec(0u8..=255, 3 * 16), noise in proptest::collection::vec(-1.0f32..1.0, 3 * 16)) {
            // 8-bit images and arbitrary single-precision values at or above 2^-24
            let grid = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| ((2.0 * codes[i] as f32 / 255.0) - 1.0) as f64);
            let free = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| {
                let v = noise[i];
                if v.abs() < 1.0 / 16_777_216.0 { 0.0 } else { v as f64 }
            });
            for img in [grid, free] {
                let (l, c) = lc_decompose(&img).unwrap();
                let back = lc_recompose(&l, &c).unwrap();
                prop_assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    fn tiny() -> (ParamStore<f64>, Dair, HybridVae) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vae = HybridVae::build(&mut ParamBuilder::new(&mut store, &mut rng, "vae"), NetConfig::tiny()).unwrap();
        let net = Dair::build(&mut ParamBuilder::new(&mut store, &mut rng, "rest"), NetConfig::tiny()).unwrap();
        (store, net, vae)
    }

    #[test]
    fn zero_rec_is_identity() {
        let (store, net, vae) = tiny();
        let img = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 31 % 200) as f64 / 100.0 - 1.0).clamp(-1.0, 1.0));
        let p = vae.priors(&store, &img).unwrap();
        let out = net.restore(&store, &img, &p).unwrap();
        assert_eq!(out, img);
        let mut t = Tape::new(&store);
        let x = t.constant(img.clone());
        let pv = PriorVars::constants(&mut t, &p);
        let o = net.forward(&mut t, x, &pv).unwrap();
        for (l, &g) in o.maps.iter().enumerate() {
            assert_eq!(t.shape(g), &[2, 1, 16 >> l, 16 >> l]);
            assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let c = NetConfig::tiny().channels;
        for l in 0..4 {
            assert_eq!(t.shape(o.lum[l]), &[2, c[l], 16 >> l, 16 >> l]);
        }
        let small = t.constant(Tensor::zeros(&[2, 3, 8, 8]));
        assert!(matches!(net.forward(&mut t, small, &pv), Err(Error::Shape(_))));
    }

    #[test]
    fn daeb_zero_prior_is_residual() {
        let (store, net, _) = tiny();
        let mut t = Tape::new(&store);
        let f = t.constant(Tensor::from_fn(&[1, 8, 4, 4], |i| (i as f64 * 0.37).sin()));
        let z = t.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let y = net.lum.blocks[0].forward(&mut t, f, z).unwrap();
        assert_eq!(t.value(y), t.value(f));
    }

    #[test]
    fn film_identity_and_annihilation() {
        let (store, net, _) = tiny();
        let mut t = Tape::new(&store);
        let c = 16;
        let l3 = t.constant(Tensor::from_fn(&[1, c, 2, 2], |i| (i as f64 * 0.11).cos()));
        let c3 = t.constant(Tensor::from_fn(&[1, c, 2, 2], |i| (i as f64 * 0.23).sin()));
        let mu = t.constant(Tensor::from_fn(&[1, c, 2, 2], |i| i as f64 * 0.01));
        let f = net.fusion.fuse(&mut t, l3, c3).unwrap();
        let out = net.fusion.forward(&mut t, l3, c3, mu).unwrap();
        assert_eq!(t.value(out), t.value(f));
        let minus = t.constant(Tensor::full(&[1, c, 2, 2], -1.0));
        let beta = t.constant(Tensor::from_fn(&[1, c, 2, 2], |i| i as f64));
        let y = film(&mut t, f, minus, beta).unwrap();
        assert_eq!(t.value(y), t.value(beta));
    }

    #[test]
    fn three_wd_without_values_passes_upsampled() {
        let (mut store, net, _) = tiny();
        let stage = net.decoder[2];
        store.get_mut(stage.v.weight).map_inplace(|_| 0.0);
        store.get_mut(stage.v.bias.unwrap()).map_inplace(|_| 0.0);
        let mut t = Tape::new(&store);
        let u = t.constant(Tensor::from_fn(&[1, 8, 8, 8], |i| (i as f64 * 0.3).sin()));
        let g = t.constant(Tensor::full(&[1, 1, 8, 8], 0.5));
        let e = t.constant(Tensor::from_fn(&[1, 8, 8, 8], |i| (i as f64).cos()));
        let d = stage.stage(&mut t, u, g, e).unwrap();
        let w = t.param(stage.phi.weight);
        let b = t.param(stage.phi.bias.unwrap());
        let r = t.conv2d(u, w, Some(b), stage.phi.geom).unwrap();
        let r = t.leaky_relu(r, LEAKY_SLOPE);
        assert_eq!(t.value(d), t.value(r));
    }
}
