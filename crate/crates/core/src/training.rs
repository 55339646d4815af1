//! Two-phase training: VAE pretraining with KL annealing and a supervised
//! contrastive term, then restoration training under frozen priors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::degradations::PairedSample;
use crate::error::{Error, Result};
use crate::latent_prior::{beta_schedule, HybridVae, LatentPriors, NetConfig, VaeLossWeights};
use crate::metrics::ssim_var;
use crate::nn::{ParamBuilder, ParamId, ParamStore};
use crate::real::Real;
use crate::restoration::{Dair, PriorVars};
use crate::seed;
use crate::tensor::Tensor;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

pub const VAE_PREFIX: &str = "vae";
pub const NET_PREFIX: &str = "dair";

// random stream tags
const INIT_VAE: u64 = 1;
const INIT_NET: u64 = 2;
const SHUFFLE: u64 = 3;
const CROP: u64 = 4;
const NOISE: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t1: usize,
    pub t2: usize,
    pub beta_max: f64,
    pub lambda_con: f64,
    pub lambda_ssim: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub tau: f64,
    pub clip_norm: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t1: 3000,
            t2: 5000,
            beta_max: 0.3,
            lambda_con: 0.01,
            lambda_ssim: 1.0,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            batch: 4,
            patch: 64,
            seed: 0,
            tau: 0.1,
            clip_norm: 1.0,
            net: NetConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "t1",
    "t2",
    "beta_max",
    "lambda_con",
    "lambda_ssim",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch",
    "patch",
    "seed",
    "tau",
    "clip_norm",
    "channels",
    "heads",
    "reduction",
];

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Step counts and patch size of the original schedule.
    pub fn paper() -> Self {
        Self { t1: 200_000, t2: 500_000, patch: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.beta_max, self.lambda_con, self.lr, self.adam_eps, self.tau, self.clip_norm];
        if self.batch == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("batch and rates must be positive".into()));
        }
        if !(self.lambda_ssim >= 0.0) {
            return Err(Error::Config("lambda_ssim must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !self.patch.is_multiple_of(8) || self.patch < 16 {
            return Err(Error::Config(format!("patch {} must be a multiple of 8 and at least 16", self.patch)));
        }
        self.net.validate()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "t1" => self.t1.to_string(),
            "t2" => self.t2.to_string(),
            "beta_max" => format!("{:?}", self.beta_max),
            "lambda_con" => format!("{:?}", self.lambda_con),
            "lambda_ssim" => format!("{:?}", self.lambda_ssim),
            "lr" => format!("{:?}", self.lr),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "batch" => self.batch.to_string(),
            "patch" => self.patch.to_string(),
            "seed" => self.seed.to_string(),
            "tau" => format!("{:?}", self.tau),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "channels" => {
                let c = self.net.channels;
                format!("{},{},{},{}", c[0], c[1], c[2], c[3])
            }
            "heads" => self.net.heads.to_string(),
            "reduction" => self.net.reduction.to_string(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "t1" => self.t1 = parse(key, value)?,
            "t2" => self.t2 = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "lambda_con" => self.lambda_con = parse(key, value)?,
            "lambda_ssim" => self.lambda_ssim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
                self.net.channels =
                    parts.try_into().map_err(|_| Error::Config(format!("`channels` needs four values, got `{value}`")))?;
            }
            "heads" => self.net.heads = parse(key, value)?,
            "reduction" => self.net.reduction = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its canonical value, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        CONFIG_KEYS.iter().map(|&k| (k, self.get(k).expect("known key"))).collect()
    }

    /// Digest of the canonical entries.
    pub fn hash(&self) -> u64 {
        let mut h = crate::nn::params::Fnv::new();
        for (k, v) in self.entries() {
            h.write(k.as_bytes());
            h.write(b"=");
            h.write(v.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }
}

/// Adam with bias correction; state is indexed by parameter id.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to every parameter in `grads`; frozen parameters
    /// are never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|(_, g)| g.map_inplace(|v| v * s));
    }
    norm
}

/// Dataset indices of batch `step`: a fresh permutation per epoch, seeded
/// by `(seed, epoch)`, consumed in order across epoch boundaries.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64, phase: u64) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let p = step * batch + k;
            let epoch = p / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut seed::rng(seed, &[SHUFFLE, phase, epoch as u64]));
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("filled above").1[p % n]
        })
        .collect()
}

/// A `patch x patch` window at `(y, x)` of a `(1, C, H, W)` tensor.
pub fn crop<T: Real>(img: &Tensor<T>, y: usize, x: usize, patch: usize) -> Result<Tensor<T>> {
    let (_, c, h, w) = img.dims4()?;
    if y + patch > h || x + patch > w {
        return Err(Error::Data(format!("crop {patch} at ({y}, {x}) exceeds {h}x{w}")));
    }
    let d = img.data();
    Ok(Tensor::from_fn(&[1, c, patch, patch], |i| {
        let ch = i / (patch * patch);
        let (r, col) = ((i / patch) % patch, i % patch);
        d[(ch * h + y + r) * w + x + col]
    }))
}

/// A stacked training batch in signed range.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub clean: Tensor<T>,
    pub degraded: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Batch `step` of `phase` with identical random crops of the clean and
/// degraded images.
pub fn make_batch<T: Real>(data: &[PairedSample], cfg: &TrainConfig, step: usize, phase: u64) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let indices = batch_indices(data.len(), cfg.batch, step, cfg.seed, phase);
    let mut rng = seed::rng(cfg.seed, &[CROP, phase, step as u64]);
    let mut clean = Vec::with_capacity(indices.len());
    let mut degraded = Vec::with_capacity(indices.len());
    for &i in &indices {
        let s = &data[i];
        let (_, _, h, w) = s.degraded.dims();
        if h < cfg.patch || w < cfg.patch {
            return Err(Error::Data(format!("sample {i} is {h}x{w}, smaller than patch {}", cfg.patch)));
        }
        let y = rng.random_range(0..=h - cfg.patch);
        let x = rng.random_range(0..=w - cfg.patch);
        clean.push(crop(&s.clean.tensor().cast::<T>(), y, x, cfg.patch)?);
        degraded.push(crop(&s.degraded.tensor().cast::<T>(), y, x, cfg.patch)?);
    }
    let stack = |v: &[Tensor<T>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok(Batch { clean: stack(&clean)?, degraded: stack(&degraded)?, labels: indices.iter().map(|&i| data[i].label).collect(), indices })
}

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub components: Vec<(&'static str, f64)>,
    pub grad_norm: f64,
}

fn collect_grads<T: Real>(t: &Tape<'_, T>, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
    let g = t.backward(loss)?;
    let grads: Vec<_> = g.params().map(|(id, g)| (id, g.clone())).collect();
    if grads.iter().any(|(_, g)| !g.all_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss is {loss} at step {step}")))
    }
}

/// Phase-1 state: the VAE, its optimiser and the next step index.
#[derive(Clone, Debug)]
pub struct VaeTrainer<T> {
    pub vae: HybridVae,
    pub adam: Adam<T>,
    pub step: usize,
}

impl<T: Real> VaeTrainer<T> {
    /// Registers a freshly initialised VAE under [`VAE_PREFIX`].
    pub fn new(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vae = build_vae(store, cfg)?;
        Ok(Self { vae, adam: Adam::new(cfg), step: 0 })
    }

    /// One update; on a numeric failure the parameters are left untouched.
    pub fn train_step(&mut self, store: &mut ParamStore<T>, data: &[PairedSample], cfg: &TrainConfig) -> Result<StepLog> {
        let batch = make_batch::<T>(data, cfg, self.step, 1)?;
        let beta = beta_schedule(self.step, cfg.t1, cfg.beta_max);
        let w = VaeLossWeights { beta, lambda_con: cfg.lambda_con, tau: cfg.tau };
        let (mut grads, parts) = {
            let mut t = Tape::new(store);
            let img = t.constant(batch.degraded);
            let b = batch.labels.len();
            let c = cfg.net.latent_dim();
            let mut rng = seed::rng(cfg.seed, &[NOISE, self.step as u64]);
            let eps = Tensor::from_fn(&[b, c, cfg.patch >> 3, cfg.patch >> 3], |_| T::of(rng.sample::<f64, _>(StandardNormal)));
            let eps = t.constant(eps);
            let (loss, parts) = self.vae.loss(&mut t, img, eps, &batch.labels, &w)?;
            check_loss(self.step, parts.total)?;
            (collect_grads(&t, loss)?, parts)
        };
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        self.adam.step(store, &grads);
        let log = StepLog {
            step: self.step,
            loss: parts.total,
            components: vec![("recon", parts.recon), ("kl", parts.kl), ("supcon", parts.supcon), ("beta", beta)],
            grad_norm,
        };
        self.step += 1;
        Ok(log)
    }
}

pub fn build_vae<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<HybridVae> {
    let mut rng = seed::rng(cfg.seed, &[INIT_VAE]);
    HybridVae::build(&mut ParamBuilder::new(store, &mut rng, VAE_PREFIX), cfg.net)
}

pub fn build_net<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<Dair> {
    let mut rng = seed::rng(cfg.seed, &[INIT_NET]);
    Dair::build(&mut ParamBuilder::new(store, &mut rng, NET_PREFIX), cfg.net)
}

/// `mean|pred - target| + lambda * (1 - SSIM)` with SSIM on images mapped
/// from `[-1, 1]` to `[0, 1]`. Returns the loss and its two terms.
pub fn restoration_loss<T: Real>(t: &mut Tape<'_, T>, pred: Var, target: Var, lambda_ssim: f64) -> Result<(Var, f64, f64)> {
    let d = t.sub(pred, target)?;
    let d = t.abs(d);
    let l1 = t.mean(d);
    let l1_value = t.value(l1).data()[0].as_f64();
    if lambda_ssim == 0.0 {
        return Ok((l1, l1_value, f64::NAN));
    }
    let to_unit = |t: &mut Tape<'_, T>, x: Var| {
        let h = t.scale(x, 0.5);
        t.shift(h, 0.5)
    };
    let pu = to_unit(t, pred);
    let tu = to_unit(t, target);
    let s = ssim_var(t, pu, tu)?;
    let ssim_value = t.value(s).data()[0].as_f64();
    let one_minus = t.scale(s, -lambda_ssim);
    let one_minus = t.shift(one_minus, lambda_ssim);
    Ok((t.add(l1, one_minus)?, l1_value, ssim_value))
}

/// Phase-2 state. The VAE stays frozen; with `use_priors == false` the
/// network runs on all-ones priors (the no-prior ablation).
#[derive(Clone, Debug)]
pub struct RestorationTrainer<T> {
    pub vae: HybridVae,
    pub net: Dair,
    pub adam: Adam<T>,
    pub step: usize,
    pub use_priors: bool,
    pub vae_fingerprint: u64,
}

impl<T: Real> RestorationTrainer<T> {
    /// Freezes the VAE already in `store` and registers a fresh network.
    pub fn new(store: &mut ParamStore<T>, vae: HybridVae, cfg: &TrainConfig, use_priors: bool) -> Result<Self> {
        cfg.validate()?;
        if vae.cfg != cfg.net {
            return Err(Error::Config("VAE and network configurations differ".into()));
        }
        store.set_frozen(&format!("{VAE_PREFIX}/"), true);
        let vae_fingerprint = store.fingerprint(&format!("{VAE_PREFIX}/"));
        let net = build_net(store, cfg)?;
        Ok(Self { vae, net, adam: Adam::new(cfg), step: 0, use_priors, vae_fingerprint })
    }

    pub fn priors(&self, store: &ParamStore<T>, degraded: &Tensor<T>) -> Result<LatentPriors<T>> {
        if self.use_priors {
            self.vae.priors(store, degraded)
        } else {
            let (b, _, h, w) = degraded.dims4()?;
            Ok(LatentPriors::ones(&self.net.cfg, b, h, w))
        }
    }

    pub fn train_step(&mut self, store: &mut ParamStore<T>, data: &[PairedSample], cfg: &TrainConfig) -> Result<StepLog> {
        let batch = make_batch::<T>(data, cfg, self.step, 2)?;
        let priors = self.priors(store, &batch.degraded)?;
        let (mut grads, loss, l1, ssim) = {
            let mut t = Tape::new(store);
            let img = t.constant(batch.degraded);
            let target = t.constant(batch.clean);
            let p = PriorVars::constants(&mut t, &priors);
            let out = self.net.forward(&mut t, img, &p)?;
            let (loss, l1, ssim) = restoration_loss(&mut t, out.output, target, cfg.lambda_ssim)?;
            let value = t.value(loss).data()[0].as_f64();
            check_loss(self.step, value)?;
            (collect_grads(&t, loss)?, value, l1, ssim)
        };
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        self.adam.step(store, &grads);
        let log = StepLog { step: self.step, loss, components: vec![("l1", l1), ("ssim", ssim)], grad_norm };
        self.step += 1;
        Ok(log)
    }

    /// Whether the VAE parameters are byte-identical to those at creation.
    pub fn vae_intact(&self, store: &ParamStore<T>) -> bool {
        store.fingerprint(&format!("{VAE_PREFIX}/")) == self.vae_fingerprint
    }
}

/// Runs phase 1 for `cfg.t1` steps from a fresh VAE.
pub fn train_vae<T: Real>(
    store: &mut ParamStore<T>,
    data: &[PairedSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<VaeTrainer<T>> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut tr = VaeTrainer::new(store, cfg)?;
    while tr.step < cfg.t1 {
        on_step(&tr.train_step(store, data, cfg)?);
    }
    Ok(tr)
}

/// Runs phase 2 for `cfg.t2` steps on top of the VAE in `store`.
pub fn train_restoration<T: Real>(
    store: &mut ParamStore<T>,
    vae: HybridVae,
    data: &[PairedSample],
    cfg: &TrainConfig,
    use_priors: bool,
    mut on_step: impl FnMut(&StepLog),
) -> Result<RestorationTrainer<T>> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut tr = RestorationTrainer::new(store, vae, cfg, use_priors)?;
    while tr.step < cfg.t2 {
        on_step(&tr.train_step(store, data, cfg)?);
    }
    if !tr.vae_intact(store) {
        return Err(Error::Numeric("frozen VAE parameters changed".into()));
    }
    Ok(tr)
}
