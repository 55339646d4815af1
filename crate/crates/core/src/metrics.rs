//! Quality metrics, the finite-difference gradient oracle, attention
//! benchmark stages and latent-space cluster analysis.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::degradations::{gaussian_kernel, PairedSample};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::latent_prior::{HybridVae, LatentPriors, Mhsa, NetConfig};
use crate::nn::{ParamBuilder, ParamStore};
use crate::real::Real;
use crate::restoration::{Dair, Daeb, LatentFusion, MappingBlock, PriorVars, ThreeWd};
use crate::seed;
use crate::tensor::Tensor;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() || pred.numel() == 0 {
        return Err(Error::Shape(format!("psnr on {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let mse = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_blur<T: Real>(t: &mut Tape<'_, T>, x: Var, c: usize) -> Result<Var> {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let row = t.constant(Tensor::from_fn(&[c, 1, 1, SSIM_WINDOW], |i| T::of(k[i % SSIM_WINDOW])));
    let col = t.constant(Tensor::from_fn(&[c, 1, SSIM_WINDOW, 1], |i| T::of(k[i % SSIM_WINDOW])));
    let g = ConvGeom { cin: c, cout: c, kh: 1, kw: SSIM_WINDOW, stride: 1, pad: 0, groups: c };
    let y = t.conv2d(x, row, None, g)?;
    t.conv2d(y, col, None, ConvGeom { kh: SSIM_WINDOW, kw: 1, ..g })
}

/// Mean local SSIM over valid windows; inputs on `[0, 1]`.
pub fn ssim_var<T: Real>(t: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let s = t.shape(a).to_vec();
    if s != t.shape(b) || s.len() != 4 || s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs matching (B, C, H, W) with H, W >= {SSIM_WINDOW}, got {s:?}")));
    }
    let c = s[1];
    let mu_a = gaussian_blur(t, a, c)?;
    let mu_b = gaussian_blur(t, b, c)?;
    let aa = t.mul(a, a)?;
    let bb = t.mul(b, b)?;
    let ab = t.mul(a, b)?;
    let e_aa = gaussian_blur(t, aa, c)?;
    let e_bb = gaussian_blur(t, bb, c)?;
    let e_ab = gaussian_blur(t, ab, c)?;
    let mu_aa = t.mul(mu_a, mu_a)?;
    let mu_bb = t.mul(mu_b, mu_b)?;
    let mu_ab = t.mul(mu_a, mu_b)?;
    let var_a = t.sub(e_aa, mu_aa)?;
    let var_b = t.sub(e_bb, mu_bb)?;
    let cov = t.sub(e_ab, mu_ab)?;
    let n1 = t.scale(mu_ab, 2.0);
    let n1 = t.shift(n1, SSIM_C1);
    let n2 = t.scale(cov, 2.0);
    let n2 = t.shift(n2, SSIM_C2);
    let d1 = t.add(mu_aa, mu_bb)?;
    let d1 = t.shift(d1, SSIM_C1);
    let d2 = t.add(var_a, var_b)?;
    let d2 = t.shift(d2, SSIM_C2);
    let num = t.mul(n1, n2)?;
    let den = t.mul(d1, d2)?;
    let map = t.div(num, den)?;
    Ok(t.mean(map))
}

/// Mean SSIM of two `[0, 1]` images, evaluated in double precision.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mut t = Tape::<f64>::detached().inference();
    let va = t.constant(a.cast());
    let vb = t.constant(b.cast());
    let s = ssim_var(&mut t, va, vb)?;
    Ok(t.value(s).data()[0])
}

/// Mean silhouette coefficient of `n` points of dimension `dim` (row-major).
///
/// Points in singleton clusters score 0, as do points whose intra- and
/// nearest-cluster distances are both 0; fewer than two clusters give 0.
pub fn silhouette(points: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if dim == 0 || points.len() != n * dim {
        return Err(Error::Shape(format!("{} values for {n} points of dimension {dim}", points.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Ok(0.0);
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let dist = |i: usize, j: usize| row(i).iter().zip(row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let li = labels[i];
        if sizes[li] < 2 {
            continue;
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k).filter(|&c| c != li && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette of pooled `mu` embeddings under the true labels and under a
/// seeded permutation of them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub true_labels: f64,
    pub shuffled: f64,
}

/// `GAP(mu)` of every degraded sample, one row per sample.
pub fn embed_latents<T: Real>(vae: &HybridVae, store: &ParamStore<T>, data: &[PairedSample]) -> Result<(Vec<f64>, usize)> {
    let dim = vae.cfg.latent_dim();
    let mut out = Vec::with_capacity(data.len() * dim);
    for s in data {
        let p = vae.priors(store, &s.degraded.tensor().cast())?;
        let (_, c, h, w) = p.mu.dims4()?;
        let mu = p.mu.data();
        for ch in 0..c {
            out.push(mu[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64);
        }
    }
    Ok((out, dim))
}

pub fn latent_separation<T: Real>(vae: &HybridVae, store: &ParamStore<T>, data: &[PairedSample], seed: u64) -> Result<Separation> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let (emb, dim) = embed_latents(vae, store, data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut seed::rng(seed, &[0x5e9a]));
    Ok(Separation { true_labels: silhouette(&emb, dim, &labels)?, shuffled: silhouette(&emb, dim, &shuffled)? })
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Entries probed per parameter tensor; larger tensors are sampled.
    pub max_per_param: usize,
    /// Relative corruption applied to analytic gradients (fault injection).
    pub corrupt: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_per_param: 6, corrupt: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries scored with the refined step.
    pub refined: usize,
    pub frozen_skipped: usize,
    /// Frozen parameters that received a non-zero analytic gradient.
    pub frozen_violations: usize,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.frozen_violations == 0 && self.checked > 0
    }
}

/// Error level above which an entry is re-probed for a kink.
pub const KINK_PROBE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences on every trainable parameter of `store`.
///
/// An entry whose error exceeds [`KINK_PROBE`] is re-estimated with a
/// tenfold smaller step and scored by the better of the two estimates: a
/// step that straddles an activation kink is corrected by the finer one,
/// while a wrong analytic gradient disagrees with both. Entries where the
/// finer step won are counted in `refined`.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new(store).inference();
        let l = f(&mut t)?;
        Ok(t.value(l).data()[0])
    };
    let analytic: Vec<(crate::nn::ParamId, Tensor<f64>)> = {
        let mut t = Tape::new(store);
        let l = f(&mut t)?;
        if t.value(l).numel() != 1 {
            return Err(Error::Shape("gradcheck needs a scalar objective".into()));
        }
        let g = t.backward(l)?;
        g.params().map(|(id, g)| (id, g.clone())).collect()
    };
    let central = |store: &mut ParamStore<f64>, id, j: usize, eps: f64| -> Result<f64> {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + eps;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[j] = orig - eps;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[j] = orig;
        Ok((up - down) / (2.0 * eps))
    };
    let mut rng = seed::rng(opts.seed, &[0x9c]);
    let mut report =
        GradcheckReport { max_rel_error: 0.0, checked: 0, refined: 0, frozen_skipped: 0, frozen_violations: 0, worst: String::new() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, g)| g);
        if store.is_frozen(id) {
            report.frozen_skipped += 1;
            if grad.is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
                report.frozen_violations += 1;
            }
            continue;
        }
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= opts.max_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.max_per_param).into_vec()
        };
        for j in picks {
            let numeric = central(store, id, j, opts.eps)?;
            let a = grad.map_or(0.0, |g| g.data()[j]) * (1.0 + opts.corrupt);
            let e = relative_error(a, numeric);
            report.checked += 1;
            let (e, numeric) = if e > KINK_PROBE {
                let fine = central(store, id, j, opts.eps / 10.0)?;
                let ef = relative_error(a, fine);
                if ef < e {
                    report.refined += 1;
                    (ef, fine)
                } else {
                    (e, numeric)
                }
            } else {
                (e, numeric)
            };
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = format!("{}[{j}]: analytic {a:.6e} numeric {numeric:.6e}", store.name(id));
            }
        }
    }
    Ok(report)
}

/// The blocks covered by [`gradcheck_suite`].
pub const GRADCHECK_BLOCKS: [&str; 7] = ["resattn", "mhsa", "daeb", "mapping", "fusion", "3wd", "full"];

fn randomize_zeros(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seed::rng(seed, &[0x2e]);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

fn random_input(t: &mut Tape<'_, f64>, shape: &[usize], seed: u64, lo: f64, hi: f64) -> Var {
    let mut rng = seed::rng(seed, &[shape.iter().product::<usize>() as u64]);
    t.constant(Tensor::from_fn(shape, |_| rng.random_range(lo..hi)))
}

/// Mean of `out` weighted by a fixed random field, so every output entry
/// contributes to the objective.
fn project(t: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let s = t.shape(out).to_vec();
    let r = random_input(t, &s, seed ^ 0x77, -1.0, 1.0);
    let p = t.mul(out, r)?;
    Ok(t.mean(p))
}

/// Runs the gradient check on one named block built with the tiny
/// configuration on inputs no larger than 16x16.
pub fn gradcheck_block(name: &str, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = NetConfig::tiny();
    let c = cfg.channels;
    let s = opts.seed;
    let mut store = ParamStore::<f64>::new();
    let mut rng = seed::rng(s, &[0xb1]);
    let mut pb = ParamBuilder::new(&mut store, &mut rng, "");
    match name {
        "resattn" => {
            let b = crate::latent_prior::ResAttn::build(&mut pb, "resattn", c[0], cfg.reduction)?;
            randomize_zeros(&mut store, s);
            gradcheck(
                &mut store,
                |t| {
                    let x = random_input(t, &[2, c[0], 8, 8], s, -1.0, 1.0);
                    let y = b.forward(t, x)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "mhsa" => {
            let b = Mhsa::build(&mut pb, "mhsa", c[3], cfg.heads)?;
            randomize_zeros(&mut store, s);
            gradcheck(
                &mut store,
                |t| {
                    let x = random_input(t, &[2, c[3], 4, 4], s, -1.0, 1.0);
                    let y = b.forward(t, x)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "daeb" => {
            let b = Daeb::build(&mut pb, "daeb", c[1], cfg.heads)?;
            gradcheck(
                &mut store,
                |t| {
                    let f = random_input(t, &[1, c[1], 8, 8], s, -1.0, 1.0);
                    let x = random_input(t, &[1, c[1], 8, 8], s + 1, -2.0, 2.0);
                    let y = b.forward(t, f, x)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "mapping" => {
            let b = MappingBlock::build(&mut pb, "mapping", c[0])?;
            gradcheck(
                &mut store,
                |t| {
                    let l = random_input(t, &[1, c[0], 8, 8], s, -1.0, 1.0);
                    let cc = random_input(t, &[1, c[0], 8, 8], s + 1, -1.0, 1.0);
                    let x = random_input(t, &[1, c[0], 8, 8], s + 2, -1.0, 1.0);
                    let y = b.forward(t, l, cc, x)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "fusion" => {
            let b = LatentFusion::build(&mut pb, "fusion", c[3], cfg.heads)?;
            randomize_zeros(&mut store, s);
            gradcheck(
                &mut store,
                |t| {
                    let l = random_input(t, &[1, c[3], 2, 2], s, -1.0, 1.0);
                    let cc = random_input(t, &[1, c[3], 2, 2], s + 1, -1.0, 1.0);
                    let mu = random_input(t, &[1, c[3], 2, 2], s + 2, -1.0, 1.0);
                    let y = b.forward(t, l, cc, mu)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "3wd" => {
            let b = ThreeWd::build(&mut pb, "3wd", c[2], c[1])?;
            gradcheck(
                &mut store,
                |t| {
                    let prev = random_input(t, &[1, c[2], 4, 4], s, -1.0, 1.0);
                    let g = random_input(t, &[1, 1, 8, 8], s + 1, 0.0, 1.0);
                    let e = random_input(t, &[1, c[1], 8, 8], s + 2, -1.0, 1.0);
                    let y = b.forward(t, prev, g, e)?;
                    project(t, y, s)
                },
                opts,
            )
        }
        "full" => {
            let vae = HybridVae::build(&mut pb.sub("vae"), cfg)?;
            let net = Dair::build(&mut pb.sub("dair"), cfg)?;
            randomize_zeros(&mut store, s);
            store.set_frozen("vae/", true);
            gradcheck(
                &mut store,
                |t| {
                    let img = random_input(t, &[1, 3, 16, 16], s, -0.6, 0.6);
                    let e = vae.encode(t, img)?;
                    let p = PriorVars { x: e.x, mu: e.mu };
                    let y = net.forward(t, img, &p)?;
                    project(t, y.output, s)
                },
                opts,
            )
        }
        other => Err(Error::Config(format!("unknown gradcheck block `{other}`"))),
    }
}

/// Every block of [`GRADCHECK_BLOCKS`] in order.
pub fn gradcheck_suite(opts: GradcheckOptions) -> Result<Vec<(&'static str, GradcheckReport)>> {
    GRADCHECK_BLOCKS.iter().map(|&b| Ok((b, gradcheck_block(b, opts)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    ThreeWd,
    SelfAttn,
    CrossAttn,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::ThreeWd, Mechanism::SelfAttn, Mechanism::CrossAttn];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::ThreeWd => "3wd",
            Mechanism::SelfAttn => "self_attn",
            Mechanism::CrossAttn => "cross_attn",
        }
    }
}

/// One decoder-stage mechanism at a fixed channel width, ready to run on
/// inputs of any resolution.
pub struct BenchStage {
    store: ParamStore<f32>,
    three_wd: ThreeWd,
    attn: Mhsa,
    channels: usize,
    heads: usize,
}

impl BenchStage {
    pub fn new(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, &[0xbe]);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, "bench");
        let three_wd = ThreeWd::build(&mut pb, "3wd", channels, channels)?;
        let attn = Mhsa::build(&mut pb, "attn", channels, heads)?;
        Ok(Self { store, three_wd, attn, channels, heads })
    }

    /// Inputs `(u, g, e)` at `h x w`.
    pub fn inputs(&self, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = seed::rng(seed, &[h as u64, w as u64]);
        let c = self.channels;
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
        let u = r(&[1, c, h, w]);
        let g = r(&[1, 1, h, w]).map(|v| v * 0.5 + 0.5);
        let e = r(&[1, c, h, w]);
        (u, g, e)
    }

    /// One inference pass; returns a checksum of the output.
    pub fn run(&self, m: Mechanism, u: &Tensor<f32>, g: &Tensor<f32>, e: &Tensor<f32>) -> Result<f64> {
        let mut t = Tape::new(&self.store).inference();
        let uv = t.constant(u.clone());
        let out = match m {
            Mechanism::ThreeWd => {
                let gv = t.constant(g.clone());
                let ev = t.constant(e.clone());
                self.three_wd.stage(&mut t, uv, gv, ev)?
            }
            Mechanism::SelfAttn => self.attn.forward(&mut t, uv)?,
            Mechanism::CrossAttn => {
                let ev = t.constant(e.clone());
                self.attn.attend(&mut t, uv, ev)?.0
            }
        };
        Ok(t.value(out).data().iter().map(|v| *v as f64).sum())
    }

    /// Bytes of intermediate buffers the mechanism allocates for one
    /// `h x w` pass in single precision.
    pub fn aux_memory_bytes(&self, m: Mechanism, h: usize, w: usize) -> usize {
        let n = h * w;
        let c = self.channels;
        let maps = match m {
            // q, k, v, q*k, gate, gate*v, sum, conv column buffer (9c), conv out, activation
            Mechanism::ThreeWd => c * n * (7 + 9 + 2),
            // q, k, v, attention output, projection, residual, score block per head
            Mechanism::SelfAttn | Mechanism::CrossAttn => c * n * 6 + crate::kernels::attention::ROW_BLOCK.min(n) * n,
        };
        let _ = self.heads;
        maps * core::mem::size_of::<f32>()
    }
}

/// Metrics of one restored sample on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub label: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub label: usize,
    pub name: String,
    pub count: usize,
    /// Samples with infinite PSNR, excluded from `mean_psnr`.
    pub infinite: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub classes: Vec<ClassSummary>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub infinite: usize,
}

fn to_unit<T: Real>(x: &Tensor<T>) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |i| (x.data()[i].as_f64() + 1.0) * 0.5)
}

/// Builds a report from per-sample metrics; class means are weighted by
/// their finite-sample counts so the overall mean equals the sample mean.
pub fn summarize(samples: Vec<SampleMetrics>, names: &[String]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let k = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut classes: Vec<ClassSummary> = (0..k)
        .map(|label| ClassSummary {
            label,
            name: names.get(label).cloned().unwrap_or_else(|| format!("class{label}")),
            count: 0,
            infinite: 0,
            mean_psnr: 0.0,
            mean_ssim: 0.0,
        })
        .collect();
    for s in &samples {
        let c = &mut classes[s.label];
        c.count += 1;
        c.mean_ssim += s.ssim;
        if s.psnr.is_finite() {
            c.mean_psnr += s.psnr;
        } else {
            c.infinite += 1;
        }
    }
    classes.retain(|c| c.count > 0);
    for c in &mut classes {
        c.mean_ssim /= c.count as f64;
        let finite = c.count - c.infinite;
        c.mean_psnr = if finite > 0 { c.mean_psnr / finite as f64 } else { f64::INFINITY };
    }
    let count = samples.len();
    let infinite = classes.iter().map(|c| c.infinite).sum::<usize>();
    let finite = count - infinite;
    let mean_psnr = if finite > 0 {
        classes.iter().filter(|c| c.count > c.infinite).map(|c| c.mean_psnr * (c.count - c.infinite) as f64).sum::<f64>() / finite as f64
    } else {
        f64::INFINITY
    };
    let mean_ssim = classes.iter().map(|c| c.mean_ssim * c.count as f64).sum::<f64>() / count as f64;
    Ok(EvalReport { samples, classes, mean_psnr, mean_ssim, count, infinite })
}

/// Restores every sample and scores it against its clean reference.
/// `priors: None` runs the no-prior ablation.
pub fn evaluate<T: Real>(
    net: &Dair,
    vae: Option<&HybridVae>,
    store: &ParamStore<T>,
    data: &[PairedSample],
    names: &[String],
) -> Result<(EvalReport, Vec<Tensor<T>>)> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut samples = Vec::with_capacity(data.len());
    let mut outputs = Vec::with_capacity(data.len());
    for (index, s) in data.iter().enumerate() {
        let img: Tensor<T> = s.degraded.tensor().cast();
        let (_, _, h, w) = img.dims4()?;
        let priors = match vae {
            Some(v) => v.priors(store, &img)?,
            None => LatentPriors::ones(&net.cfg, 1, h, w),
        };
        let out = net.restore(store, &img, &priors)?;
        let (o, c, d) = (to_unit(&out), to_unit(s.clean.tensor()), to_unit(&img));
        samples.push(SampleMetrics {
            index,
            label: s.label,
            psnr: psnr(&o, &c, 1.0)?,
            ssim: ssim(&o, &c)?,
            input_psnr: psnr(&d, &c, 1.0)?,
            input_ssim: ssim(&d, &c)?,
        });
        outputs.push(out);
    }
    Ok((summarize(samples, names)?, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.5);
        assert!((psnr(&c, &a, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    fn structured(seed: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seed, &[]);
        Tensor::from_fn(&[1, 3, 24, 24], |i| {
            let (y, x) = ((i / 24) % 24, i % 24);
            0.5 + 0.3 * ((x as f64 * 0.4).sin() * (y as f64 * 0.3).cos()) + rng.random_range(-0.05..0.05)
        })
    }

    #[test]
    fn ssim_properties() {
        let a = structured(1);
        let b = structured(2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    fn brute_silhouette(p: &[Vec<f64>], labels: &[usize]) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let k = labels.iter().max().unwrap() + 1;
        let mut s = 0.0;
        for i in 0..p.len() {
            let mean_to = |c: usize| {
                let js: Vec<usize> = (0..p.len()).filter(|&j| labels[j] == c && j != i).collect();
                if js.is_empty() {
                    None
                } else {
                    Some(js.iter().map(|&j| d(&p[i], &p[j])).sum::<f64>() / js.len() as f64)
                }
            };
            let Some(a) = mean_to(labels[i]) else { continue };
            let b = (0..k).filter(|&c| c != labels[i]).filter_map(mean_to).fold(f64::INFINITY, f64::min);
            if a.max(b) > 0.0 {
                s += (b - a) / a.max(b);
            }
        }
        s / p.len() as f64
    }

    proptest! {
        #[test]
        fn silhouette_matches_brute_force(pts in proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, 3), 0usize..4), 2..64)) {
            let labels: Vec<usize> = pts.iter().map(|p| p.1).collect();
            let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.0.clone()).collect();
            let flat: Vec<f64> = rows.concat();
            let distinct = { let mut l = labels.clone(); l.sort(); l.dedup(); l.len() };
            let expect = if distinct < 2 { 0.0 } else { brute_silhouette(&rows, &labels) };
            prop_assert!((silhouette(&flat, 3, &labels).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_fixtures() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for j in 0..5 {
                let mut p = vec![0.0; 4];
                p[c] = 10.0;
                p[(c + 1) % 4] += j as f64 * 0.01;
                pts.extend(p);
                labels.push(c);
            }
        }
        assert!(silhouette(&pts, 4, &labels).unwrap() > 0.9);
        let same = vec![1.0; 20 * 4];
        assert_eq!(silhouette(&same, 4, &labels).unwrap(), 0.0);
    }

    #[test]
    fn gradcheck_linear_and_faults() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seed::rng(3, &[]);
        let conv = crate::nn::Conv2d::same(&mut ParamBuilder::new(&mut store, &mut rng, "c"), "conv", 2, 3, 3).unwrap();
        let frozen = crate::nn::Conv2d::same(&mut ParamBuilder::new(&mut store, &mut rng, "f"), "conv", 3, 3, 1).unwrap();
        store.set_frozen("f/", true);
        let f = |t: &mut Tape<'_, f64>| {
            let x = random_input(t, &[1, 2, 6, 6], 5, -1.0, 1.0);
            let y = conv.forward(t, x)?;
            let y = frozen.forward(t, y)?;
            let y = t.square(y);
            Ok(t.sum(y))
        };
        let opts = GradcheckOptions { max_per_param: 1000, ..Default::default() };
        let r = gradcheck(&mut store, f, opts).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.frozen_skipped, 2);
        assert_eq!(r.frozen_violations, 0);
        let bad = gradcheck(&mut store, f, GradcheckOptions { corrupt: 0.1, ..opts }).unwrap();
        assert!(bad.max_rel_error > 0.05);
    }

    #[test]
    fn summary_weights() {
        let s = |index, label, psnr| SampleMetrics { index, label, psnr, ssim: 0.5, input_psnr: 0.0, input_ssim: 0.0 };
        let r = summarize(vec![s(0, 0, 10.0), s(1, 0, 20.0), s(2, 1, 40.0), s(3, 1, f64::INFINITY)], &[]).unwrap();
        assert_eq!(r.infinite, 1);
        assert!((r.mean_psnr - 70.0 / 3.0).abs() < 1e-12);
        assert!(summarize(Vec::new(), &[]).is_err());
    }

    #[test]
    fn bench_stages_run() {
        let b = BenchStage::new(8, 2, 1).unwrap();
        let (u, g, e) = b.inputs(8, 8, 2);
        for m in Mechanism::ALL {
            assert!(b.run(m, &u, &g, &e).unwrap().is_finite());
        }
        assert!(b.aux_memory_bytes(Mechanism::SelfAttn, 64, 64) > b.aux_memory_bytes(Mechanism::ThreeWd, 64, 64));
    }
}
