//! Synthetic corruptions, procedural clean images and paired datasets.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// Rank-4 `(B, C, H, W)` image batch with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    range: ValueRange,
}

impl ImageTensor {
    /// Validates rank, spatial divisibility by 8 and the value range.
    pub fn new(data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        let (_, _, h, w) = data.dims4()?;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a positive multiple of 8")));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Data(format!("value {v} outside {range:?} range")));
        }
        Ok(Self { data, range })
    }

    /// Like [`ImageTensor::new`] but clips values into range first.
    pub fn clipped(mut data: Tensor<f32>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        if !data.all_finite() {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        data.map_inplace(|v| v.max(lo).min(hi));
        Self::new(data, range)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// `x_signed = 2 x_unit - 1`
    pub fn to_signed(&self) -> Self {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => {
                Self { data: self.data.map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)), range: ValueRange::Signed }
            }
        }
    }

    /// `x_unit = (x_signed + 1) / 2`
    pub fn to_unit(&self) -> Self {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => {
                Self { data: self.data.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)), range: ValueRange::Unit }
            }
        }
    }

    fn require_unit(&self) -> Result<()> {
        if self.range != ValueRange::Unit {
            return Err(Error::Data("degradations expect a unit-range image".into()));
        }
        Ok(())
    }

    fn with_data(&self, mut data: Tensor<f32>) -> Self {
        let (lo, hi) = self.range.bounds();
        data.map_inplace(|v| v.max(lo).min(hi));
        Self { data, range: self.range }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreakKind {
    Rain,
    Snow,
}

/// One corruption with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive Gaussian noise; `sigma` in `[0, 1]` units.
    Noise { sigma: f64 },
    Haze { transmission: f64, airlight: f64 },
    Lowlight { gamma: f64, gain: f64 },
    Streaks { kind: StreakKind, density: f64, intensity: f64, angle: f64 },
    Blur { kernel_size: usize, sigma: f64 },
}

/// A corruption bound to the seed that drives it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

pub fn apply_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    img.require_unit()?;
    if !(sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = seed::rng(seed, &[]);
    let s = sigma as f32;
    let mut out = img.data.clone();
    for v in out.data_mut() {
        let n: f32 = StandardNormal.sample(&mut rng);
        *v += s * n;
    }
    Ok(img.with_data(out))
}

pub fn apply_haze(img: &ImageTensor, transmission: f64, airlight: f64) -> Result<ImageTensor> {
    img.require_unit()?;
    if !(transmission > 0.0 && transmission <= 1.0) {
        return Err(Error::Parameter(format!("transmission {transmission} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::Parameter(format!("airlight {airlight} outside [0, 1]")));
    }
    let (t, a) = (transmission as f32, airlight as f32);
    Ok(img.with_data(img.data.map(|v| v * t + a * (1.0 - t))))
}

pub fn apply_lowlight(img: &ImageTensor, gamma: f64, gain: f64) -> Result<ImageTensor> {
    img.require_unit()?;
    if !(gamma >= 1.0) {
        return Err(Error::Parameter(format!("gamma {gamma} must be at least 1")));
    }
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::Parameter(format!("gain {gain} outside (0, 1]")));
    }
    let (g, k) = (gamma as f32, gain as f32);
    Ok(img.with_data(img.data.map(|v| k * v.powf(g))))
}

/// Binary streak mask of one `h x w` plane; coordinates wrap at the borders.
fn streak_mask(h: usize, w: usize, kind: StreakKind, density: f64, angle: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let target = (density.min(1.0) * (h * w) as f64).round() as usize;
    let mut count = 0;
    let theta = angle.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    let mark = |mask: &mut [bool], y: f64, x: f64, count: &mut usize| {
        let yi = (y.round() as i64).rem_euclid(h as i64) as usize;
        let xi = (x.round() as i64).rem_euclid(w as i64) as usize;
        if !mask[yi * w + xi] {
            mask[yi * w + xi] = true;
            *count += 1;
        }
    };
    while count < target {
        let y0 = rng.random_range(0.0..h as f64);
        let x0 = rng.random_range(0.0..w as f64);
        match kind {
            StreakKind::Rain => {
                let len = rng.random_range(6..=14);
                for k in 0..len {
                    mark(&mut mask, y0 + k as f64 * dy, x0 + k as f64 * dx, &mut count);
                }
            }
            StreakKind::Snow => {
                let ra = rng.random_range(0.8..2.2f64);
                let rb = ra * rng.random_range(0.5..1.0f64);
                let r = ra.ceil() as i64;
                mark(&mut mask, y0, x0, &mut count);
                for oy in -r..=r {
                    for ox in -r..=r {
                        let (fy, fx) = (oy as f64, ox as f64);
                        // ellipse axes aligned with the fall direction
                        let u = fx * dy - fy * dx;
                        let v = fx * dx + fy * dy;
                        if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                            mark(&mut mask, y0 + fy, x0 + fx, &mut count);
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Composites oriented rain streaks or snow blobs additively.
///
/// `density` is the target fraction of covered pixels and `angle` the fall
/// direction in degrees from vertical.
pub fn apply_streaks(
    img: &ImageTensor,
    kind: StreakKind,
    density: f64,
    intensity: f64,
    angle: f64,
    seed: u64,
) -> Result<ImageTensor> {
    img.require_unit()?;
    if !(density >= 0.0) {
        return Err(Error::Parameter(format!("streak density {density} must be non-negative")));
    }
    if !(0.0..=1.0).contains(&intensity) || !angle.is_finite() {
        return Err(Error::Parameter(format!("streak intensity {intensity} outside [0, 1]")));
    }
    if density == 0.0 {
        return Ok(img.clone());
    }
    let (b, c, h, w) = img.dims();
    let mut out = img.data.clone();
    let a = intensity as f32;
    for bi in 0..b {
        let mut rng = seed::rng(seed, &[bi as u64]);
        let mask = streak_mask(h, w, kind, density, angle, &mut rng);
        for ci in 0..c {
            let plane = &mut out.data_mut()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for (v, &m) in plane.iter_mut().zip(&mask) {
                if m {
                    *v += a;
                }
            }
        }
    }
    Ok(img.with_data(out))
}

fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect padding.
pub fn apply_blur(img: &ImageTensor, kernel_size: usize, sigma: f64) -> Result<ImageTensor> {
    img.require_unit()?;
    if kernel_size.is_multiple_of(2) {
        return Err(Error::Parameter(format!("blur kernel size {kernel_size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be positive")));
    }
    if kernel_size == 1 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as i64;
    let (b, c, h, w) = img.dims();
    let src = img.data.data();
    let mut out = vec![0f32; src.len()];
    let mut tmp = vec![0f64; h * w];
    for p in 0..b * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] =
                    k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + reflect(x as i64 + j as i64 - r, w)] as f64).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k.iter().enumerate().map(|(j, kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x]).sum();
                out[p * h * w + y * w + x] = v as f32;
            }
        }
    }
    Ok(img.with_data(Tensor::new(img.data.shape(), out)?))
}

impl Degradation {
    pub fn apply(&self, img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        match *self {
            Degradation::Noise { sigma } => apply_gaussian_noise(img, sigma, seed),
            Degradation::Haze { transmission, airlight } => apply_haze(img, transmission, airlight),
            Degradation::Lowlight { gamma, gain } => apply_lowlight(img, gamma, gain),
            Degradation::Streaks { kind, density, intensity, angle } => {
                apply_streaks(img, kind, density, intensity, angle, seed)
            }
            Degradation::Blur { kernel_size, sigma } => apply_blur(img, kernel_size, sigma),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Degradation::Noise { .. } => "noise",
            Degradation::Haze { .. } => "haze",
            Degradation::Lowlight { .. } => "lowlight",
            Degradation::Streaks { kind: StreakKind::Rain, .. } => "rain",
            Degradation::Streaks { kind: StreakKind::Snow, .. } => "snow",
            Degradation::Blur { .. } => "blur",
        }
    }

    /// Default parameters for a kind name.
    pub fn preset(kind: &str) -> Result<Self> {
        Ok(match kind {
            "noise" => Degradation::Noise { sigma: 25.0 / 255.0 },
            "haze" => Degradation::Haze { transmission: 0.55, airlight: 0.9 },
            "lowlight" => Degradation::Lowlight { gamma: 2.0, gain: 0.45 },
            "rain" => Degradation::Streaks { kind: StreakKind::Rain, density: 0.05, intensity: 0.7, angle: 15.0 },
            "snow" => Degradation::Streaks { kind: StreakKind::Snow, density: 0.04, intensity: 0.9, angle: 0.0 },
            "blur" => Degradation::Blur { kernel_size: 7, sigma: 1.5 },
            _ => return Err(Error::Config(format!("unknown degradation kind `{kind}`"))),
        })
    }

    fn params(&self) -> Vec<(&'static str, String)> {
        match *self {
            Degradation::Noise { sigma } => vec![("sigma", sigma.to_string())],
            Degradation::Haze { transmission, airlight } => {
                vec![("t", transmission.to_string()), ("a", airlight.to_string())]
            }
            Degradation::Lowlight { gamma, gain } => vec![("gamma", gamma.to_string()), ("gain", gain.to_string())],
            Degradation::Streaks { density, intensity, angle, .. } => vec![
                ("density", density.to_string()),
                ("intensity", intensity.to_string()),
                ("angle", angle.to_string()),
            ],
            Degradation::Blur { kernel_size, sigma } => vec![("k", kernel_size.to_string()), ("sigma", sigma.to_string())],
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        match (self, key) {
            (Degradation::Noise { sigma }, "sigma") => *sigma = f()?,
            (Degradation::Haze { transmission, .. }, "t") => *transmission = f()?,
            (Degradation::Haze { airlight, .. }, "a") => *airlight = f()?,
            (Degradation::Lowlight { gamma, .. }, "gamma") => *gamma = f()?,
            (Degradation::Lowlight { gain, .. }, "gain") => *gain = f()?,
            (Degradation::Streaks { density, .. }, "density") => *density = f()?,
            (Degradation::Streaks { intensity, .. }, "intensity") => *intensity = f()?,
            (Degradation::Streaks { angle, .. }, "angle") => *angle = f()?,
            (Degradation::Blur { kernel_size, .. }, "k") => *kernel_size = value.parse().map_err(|_| bad())?,
            (Degradation::Blur { sigma, .. }, "sigma") => *sigma = f()?,
            (d, _) => return Err(Error::Config(format!("`{}` has no parameter `{key}`", d.kind_name()))),
        }
        Ok(())
    }
}

/// `kind:key=value:key=value`
impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind_name())?;
        for (k, v) in self.params() {
            write!(f, ":{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let mut d = Degradation::preset(parts.next().unwrap_or_default())?;
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
            d.set(k.trim(), v.trim())?;
        }
        Ok(d)
    }
}

/// An ordered list of corruptions forming one degradation class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub steps: Vec<Degradation>,
}

/// Steps joined by `+`.
impl fmt::Display for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for ClassSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "identity" {
            return Ok(ClassSpec { steps: Vec::new() });
        }
        Ok(ClassSpec { steps: s.split('+').map(str::parse).collect::<Result<_>>()? })
    }
}

impl ClassSpec {
    /// Parses a comma-separated class list such as `noise,haze+rain`.
    pub fn parse_list(s: &str) -> Result<Vec<ClassSpec>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
    }

    pub fn bind(&self, seed: u64) -> Vec<DegradationSpec> {
        self.steps
            .iter()
            .enumerate()
            .map(|(j, &degradation)| DegradationSpec { degradation, seed: seed::derive(seed, &[j as u64]) })
            .collect()
    }
}

/// Applies `specs` left to right.
pub fn compose(img: &ImageTensor, specs: &[DegradationSpec]) -> Result<ImageTensor> {
    let mut out = img.clone();
    for s in specs {
        out = s.degradation.apply(&out, s.seed)?;
    }
    Ok(out)
}

/// A clean/degraded pair in signed range.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: ImageTensor,
    pub degraded: ImageTensor,
    pub label: usize,
    pub spec: String,
}

/// `per_class` samples for each class; label `k` is `classes[k]`.
///
/// Sample `i` of every class uses base image `i mod len`, so classes differ
/// only in their corruption.
pub fn make_dataset(base: &[ImageTensor], classes: &[ClassSpec], per_class: usize, seed: u64) -> Result<Vec<PairedSample>> {
    if per_class == 0 || classes.is_empty() {
        return Ok(Vec::new());
    }
    if base.is_empty() {
        return Err(Error::Data("no base images".into()));
    }
    for b in base {
        let (n, _, h, w) = b.dims();
        if n != 1 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Data(format!("base image {n}x{h}x{w} must be a single image with sides divisible by 8")));
        }
        b.require_unit()?;
    }
    let mut out = Vec::with_capacity(per_class * classes.len());
    for (label, class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let clean = &base[i % base.len()];
            let specs = class.bind(seed::derive(seed, &[label as u64, i as u64]));
            let degraded = compose(clean, &specs)?;
            out.push(PairedSample {
                clean: clean.to_signed(),
                degraded: degraded.to_signed(),
                label,
                spec: class.to_string(),
            });
        }
    }
    Ok(out)
}

/// Procedural clean images: gradients, checkerboards, filtered noise and
/// geometric shapes, cycled in that order.
pub fn procedural_textures(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(seed, &[i as u64]);
            let data = match i % 4 {
                0 => gradient(h, w, &mut rng),
                1 => checkerboard(h, w, &mut rng),
                2 => filtered_noise(h, w, &mut rng)?,
                _ => shapes(h, w, &mut rng),
            };
            ImageTensor::clipped(data, ValueRange::Unit)
        })
        .collect()
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn paint(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        f(c, y, i % w)
    })
}

fn gradient(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let (c0, c1) = (color(rng), color(rng));
    let th: f32 = rng.random_range(0.0..core::f32::consts::TAU);
    let (ux, uy) = (th.cos(), th.sin());
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let reach = (cx * ux.abs() + cy * uy.abs()).max(1.0);
    paint(h, w, |c, y, x| {
        let t = (((x as f32 - cx) * ux + (y as f32 - cy) * uy) / reach * 0.5 + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    })
}

fn checkerboard(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let (c0, c1) = (color(rng), color(rng));
    let cell = [4usize, 8, 16][rng.random_range(0..3)];
    let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
    paint(h, w, |c, y, x| if ((x + ox) / cell + (y + oy) / cell).is_multiple_of(2) { c0[c] } else { c1[c] })
}

fn filtered_noise(h: usize, w: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let raw = Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f32>());
    let blurred = apply_blur(&ImageTensor::new(raw, ValueRange::Unit)?, 9, 2.0)?.into_tensor();
    let n = h * w;
    let mut d = blurred.into_data();
    for plane in d.chunks_mut(n) {
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-6);
        plane.iter_mut().for_each(|v| *v = 0.1 + 0.8 * (*v - lo) / span);
    }
    Tensor::new(&[1, 3, h, w], d)
}

fn shapes(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bg = color(rng);
    let mut img = paint(h, w, |c, _, _| bg[c]);
    for _ in 0..6 {
        let col = color(rng);
        let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let r = rng.random_range(0.08..0.25) * h.min(w) as f32;
        let circle = rng.random_bool(0.5);
        let d = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if circle { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
                if inside {
                    for c in 0..3 {
                        d[c * h * w + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    img
}
