//! The `dair` command line: one binary, one verb per task, a manifest per
//! run.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dair_core::degradations::{make_dataset, procedural_textures, ClassSpec, ImageTensor, ValueRange};
use dair_core::latent_prior::{HybridVae, LatentPriors};
use dair_core::metrics::{self, embed_latents, evaluate, latent_separation, GradcheckOptions, Mechanism, GRADCHECK_BLOCKS};
use dair_core::nn::ParamStore;
use dair_core::restoration::Dair;
use dair_core::training::{build_net, build_vae, RestorationTrainer, StepLog, TrainConfig, VaeTrainer, NET_PREFIX, VAE_PREFIX};
use dair_core::{Error as CoreError, Tensor};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_override, resolve_from};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{exit, CliError, Result};
use crate::image_io::{read_png, write_png};
use crate::manifest::Manifest;
use crate::report::{bench_attention, bench_tsv, eval_tsv, fmt_metric, log_header, log_line, scaling_ratios};

pub const LOG_ENV: &str = "DAIR_LOG";
pub const VAE_CKPT: &str = "vae.ckpt";
pub const NET_CKPT: &str = "dair.ckpt";
pub const LAST_GOOD: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const EVAL_REPORT: &str = "eval.tsv";
pub const BENCH_REPORT: &str = "bench.tsv";
pub const LATENTS: &str = "latents.tsv";
pub const GRADCHECK_REPORT: &str = "gradcheck.tsv";

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 I/O, 2 usage, 3 configuration, 4 data or checkpoint, 5 shape, 6 numeric.
Log verbosity: DAIR_LOG=error|warn|info|debug|trace (default info).";

#[derive(Debug, Parser)]
#[command(name = "dair", version, about = "Degradation-aware all-in-one image restoration", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Steps of the phase being trained.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Any configuration key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a paired dataset from procedural textures.
    Synth(SynthArgs),
    /// Phase 1: train the degradation VAE.
    PretrainVae(PretrainArgs),
    /// Phase 2: train the restoration network on a frozen VAE.
    Train(TrainArgs),
    /// Restore one PNG or a directory of PNGs.
    Restore(RestoreArgs),
    /// PSNR and SSIM of a trained network on a dataset.
    Eval(EvalArgs),
    /// Time one decoder stage against self- and cross-attention.
    BenchAttn(BenchArgs),
    /// Export pooled latent means and their silhouette scores.
    ExportLatents(LatentArgs),
    /// Finite-difference gradient check of every parameterised block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated classes; `+` composes corruptions.
    #[arg(long, default_value = "noise,haze,rain,lowlight")]
    pub classes: String,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    /// Side of the square images, a multiple of 8.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Distinct clean textures cycled through the samples.
    #[arg(long, default_value_t = 8)]
    pub base_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a VAE checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save `vae-NNNNNN.ckpt` every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub ckpt_every: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Phase-1 checkpoint (file or run directory).
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace every latent prior by ones.
    #[arg(long)]
    pub no_priors: bool,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save `dair-NNNNNN.ckpt` every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub ckpt_every: usize,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Phase-2 checkpoint (file or run directory).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input PNG or directory of PNGs.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG, or directory when the input is a directory.
    #[arg(long)]
    pub out: PathBuf,
    /// VAE checkpoint providing the priors; defaults to the one stored with
    /// the network.
    #[arg(long)]
    pub vae: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    /// Write degraded | restored | clean strips.
    #[arg(long)]
    pub save_images: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Square sides to time.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmups: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    /// Checkpoint holding VAE parameters (file or run directory).
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, conflicts_with = "block")]
    pub all: bool,
    /// One of resattn, mhsa, daeb, mapping, fusion, 3wd, full.
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 6)]
    pub max_per_param: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the verb and returns the exit
/// code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).format_timestamp_millis().try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &recorded) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, a, argv),
        Command::PretrainVae(a) => pretrain_vae(g, a, argv),
        Command::Train(a) => train(g, a, argv),
        Command::Restore(a) => restore(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::BenchAttn(a) => bench(a, argv),
        Command::ExportLatents(a) => export_latents(g, a, argv),
        Command::Gradcheck(a) => gradcheck(g, a, argv),
    }
}

fn overrides(g: &GlobalArgs, steps_key: &str) -> Vec<(String, String)> {
    let mut o = Vec::new();
    if let Some(s) = g.seed {
        o.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = g.steps {
        o.push((steps_key.into(), s.to_string()));
    }
    if let Some(p) = g.patch {
        o.push(("patch".into(), p.to_string()));
    }
    if let Some(b) = g.batch {
        o.push(("batch".into(), b.to_string()));
    }
    o.extend(g.set.iter().cloned());
    o
}

/// A run directory stands for the checkpoint named `default` inside it.
fn ckpt_path(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn load_kind(p: &Path, default: &str, kinds: &[&str]) -> Result<Checkpoint> {
    let path = ckpt_path(p, default);
    let ck = Checkpoint::load(&path)?;
    if !kinds.contains(&ck.kind()) {
        return Err(CliError::Checkpoint(format!("{}: expected a {} checkpoint, found `{}`", path.display(), kinds.join(" or "), ck.kind())));
    }
    Ok(ck)
}

fn synth(g: &GlobalArgs, a: &SynthArgs, argv: &[String]) -> Result<()> {
    let seed = g.seed.unwrap_or(0);
    let classes = ClassSpec::parse_list(&a.classes)?;
    if classes.is_empty() || a.per_class == 0 || a.base_count == 0 {
        return Err(CliError::Config("need at least one class, sample and base image".into()));
    }
    let base = procedural_textures(a.base_count, a.size, a.size, seed_path(seed, 0))?;
    let data = make_dataset(&base, &classes, a.per_class, seed_path(seed, 1))?;
    let files = write_dataset(&a.out, &data)?;
    let mut m = Manifest::new("synth", argv);
    m.seed = Some(seed);
    for f in &files {
        m.add_output(&a.out, f)?;
    }
    m.metrics.insert("pairs".into(), json!(data.len()));
    m.write(&a.out)?;
    log::info!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn seed_path(seed: u64, stream: u64) -> u64 {
    dair_core::seed::derive(seed, &[stream])
}

/// Name of the periodic checkpoint taken after `step` updates.
pub fn step_ckpt(kind: &str, step: usize) -> String {
    format!("{kind}-{step:06}.ckpt")
}

/// Per-step TSV log; appends when resuming.
struct TrainLog {
    file: File,
    path: PathBuf,
    header: bool,
    start: Instant,
}

impl TrainLog {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(CliError::io(d))?;
        }
        let header = append && path.exists();
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&path).map_err(CliError::io(&path))?;
        Ok(Self { file, path, header, start: Instant::now() })
    }

    fn write(&mut self, l: &StepLog) -> Result<()> {
        if !self.header {
            self.file.write_all(log_header(&l.components).as_bytes()).map_err(CliError::io(&self.path))?;
            self.header = true;
        }
        let ms = self.start.elapsed().as_secs_f64() * 1e3;
        self.file.write_all(log_line(l, ms).as_bytes()).map_err(CliError::io(&self.path))
    }
}

fn progress(l: &StepLog, total: usize) {
    if l.step.is_multiple_of(50) || l.step + 1 == total {
        log::info!("step {}/{total} loss {:.6}", l.step + 1, l.loss);
    }
}

fn pretrain_vae(g: &GlobalArgs, a: &PretrainArgs, argv: &[String]) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let cfg = resolve_from(TrainConfig::default(), g.config.as_deref(), &overrides(g, "t1"))?;
    let mut store = ParamStore::<f32>::new();
    let mut tr = VaeTrainer::new(&mut store, &cfg)?;
    if let Some(r) = &a.resume {
        let ck = load_kind(r, VAE_CKPT, &["vae"])?;
        ck.check_config(&cfg);
        ck.restore_params(&mut store, VAE_PREFIX)?;
        tr.adam = ck.restore_adam(&store, &cfg)?;
        tr.step = ck.step()?;
    }
    let mut log = TrainLog::open(a.out.join(TRAIN_LOG), a.resume.is_some())?;
    let mut last = None;
    while tr.step < cfg.t1 {
        match tr.train_step(&mut store, &data.samples, &cfg) {
            Ok(l) => {
                log.write(&l)?;
                progress(&l, cfg.t1);
                last = Some(l.loss);
                if a.ckpt_every > 0 && tr.step % a.ckpt_every == 0 && tr.step < cfg.t1 {
                    Checkpoint::capture("vae", &store, Some(&tr.adam), tr.step, &cfg).save(&a.out.join(step_ckpt("vae", tr.step)))?;
                }
            }
            Err(e @ CoreError::Numeric(_)) => {
                Checkpoint::capture("vae", &store, Some(&tr.adam), tr.step, &cfg).save(&a.out.join(LAST_GOOD))?;
                log::error!("saved the last good state to {}", a.out.join(LAST_GOOD).display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Checkpoint::capture("vae", &store, Some(&tr.adam), tr.step, &cfg).save(&a.out.join(VAE_CKPT))?;
    let mut m = Manifest::new("pretrain-vae", argv);
    m.seed = Some(cfg.seed);
    m.config = Some(cfg);
    m.add_input(&a.data)?;
    if let Some(r) = &a.resume {
        m.add_input(&ckpt_path(r, VAE_CKPT))?;
    }
    m.add_output(&a.out, Path::new(VAE_CKPT))?;
    m.add_output(&a.out, Path::new(TRAIN_LOG))?;
    m.metrics.insert("steps".into(), json!(tr.step));
    if let Some(l) = last {
        m.metrics.insert("final_loss".into(), json!(fmt_metric(l)));
    }
    m.write(&a.out)?;
    Ok(())
}

fn train(g: &GlobalArgs, a: &TrainArgs, argv: &[String]) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let vae_ck = load_kind(&a.vae, VAE_CKPT, &["vae", "dair"])?;
    let cfg = resolve_from(vae_ck.config()?, g.config.as_deref(), &overrides(g, "t2"))?;
    let mut store = ParamStore::<f32>::new();
    let vae = build_vae(&mut store, &cfg)?;
    vae_ck.restore_params(&mut store, VAE_PREFIX)?;
    let mut tr = RestorationTrainer::new(&mut store, vae, &cfg, !a.no_priors)?;
    if let Some(r) = &a.resume {
        let ck = load_kind(r, NET_CKPT, &["dair"])?;
        ck.check_config(&cfg);
        if ck.meta.get("priors").map(String::as_str) != Some(priors_flag(tr.use_priors)) {
            return Err(CliError::Config("resumed run used a different prior setting".into()));
        }
        ck.restore_params(&mut store, NET_PREFIX)?;
        tr.adam = ck.restore_adam(&store, &cfg)?;
        tr.step = ck.step()?;
    }
    let capture = |store: &ParamStore<f32>, tr: &RestorationTrainer<f32>| {
        let mut ck = Checkpoint::capture("dair", store, Some(&tr.adam), tr.step, &cfg);
        ck.meta.insert("priors".into(), priors_flag(tr.use_priors).into());
        ck
    };
    let mut log = TrainLog::open(a.out.join(TRAIN_LOG), a.resume.is_some())?;
    let mut last = None;
    while tr.step < cfg.t2 {
        match tr.train_step(&mut store, &data.samples, &cfg) {
            Ok(l) => {
                log.write(&l)?;
                progress(&l, cfg.t2);
                last = Some(l.loss);
                if a.ckpt_every > 0 && tr.step % a.ckpt_every == 0 && tr.step < cfg.t2 {
                    capture(&store, &tr).save(&a.out.join(step_ckpt("dair", tr.step)))?;
                }
            }
            Err(e @ CoreError::Numeric(_)) => {
                capture(&store, &tr).save(&a.out.join(LAST_GOOD))?;
                log::error!("saved the last good state to {}", a.out.join(LAST_GOOD).display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !tr.vae_intact(&store) {
        return Err(CliError::Numeric("frozen VAE parameters changed".into()));
    }
    capture(&store, &tr).save(&a.out.join(NET_CKPT))?;
    let mut m = Manifest::new("train", argv);
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.clone());
    m.add_input(&a.data)?;
    m.add_input(&ckpt_path(&a.vae, VAE_CKPT))?;
    if let Some(r) = &a.resume {
        m.add_input(&ckpt_path(r, NET_CKPT))?;
    }
    m.add_output(&a.out, Path::new(NET_CKPT))?;
    m.add_output(&a.out, Path::new(TRAIN_LOG))?;
    m.metrics.insert("steps".into(), json!(tr.step));
    m.metrics.insert("priors".into(), json!(tr.use_priors));
    if let Some(l) = last {
        m.metrics.insert("final_loss".into(), json!(fmt_metric(l)));
    }
    m.write(&a.out)?;
    Ok(())
}

fn priors_flag(on: bool) -> &'static str {
    if on {
        "true"
    } else {
        "false"
    }
}

/// A trained network with its VAE, ready for inference.
struct Restorer {
    store: ParamStore<f32>,
    vae: HybridVae,
    net: Dair,
    use_priors: bool,
    inputs: Vec<PathBuf>,
}

impl Restorer {
    fn load(ckpt: &Path, vae: Option<&Path>) -> Result<Self> {
        let path = ckpt_path(ckpt, NET_CKPT);
        let ck = load_kind(&path, NET_CKPT, &["dair"])?;
        let cfg = ck.config()?;
        let mut store = ParamStore::<f32>::new();
        let vae_net = build_vae(&mut store, &cfg)?;
        let net = build_net(&mut store, &cfg)?;
        ck.restore_params(&mut store, NET_PREFIX)?;
        let mut inputs = vec![path];
        match vae {
            Some(v) => {
                let vp = ckpt_path(v, VAE_CKPT);
                load_kind(&vp, VAE_CKPT, &["vae", "dair"])?.restore_params(&mut store, VAE_PREFIX)?;
                inputs.push(vp);
            }
            None if ck.has_params(&format!("{VAE_PREFIX}/")) => {
                ck.restore_params(&mut store, VAE_PREFIX)?;
            }
            None => return Err(CliError::Checkpoint("no VAE parameters: pass --vae with a phase-1 checkpoint".into())),
        }
        let use_priors = ck.meta.get("priors").map(String::as_str) != Some("false");
        Ok(Self { store, vae: vae_net, net, use_priors, inputs })
    }

    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let x = img.to_signed().into_tensor();
        let (_, _, h, w) = x.dims4()?;
        let priors = if self.use_priors { self.vae.priors(&self.store, &x)? } else { LatentPriors::ones(&self.net.cfg, 1, h, w) };
        let out = self.net.restore(&self.store, &x, &priors)?;
        Ok(ImageTensor::clipped(out, ValueRange::Signed)?)
    }
}

fn restore(a: &RestoreArgs, argv: &[String]) -> Result<()> {
    let r = Restorer::load(&a.ckpt, a.vae.as_deref())?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(CliError::io(&a.input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v.into_iter().map(|p| (p.clone(), PathBuf::from(p.file_name().expect("listed file")))).collect()
    } else {
        vec![(a.input.clone(), PathBuf::from(a.out.file_name().ok_or_else(|| CliError::Usage("--out needs a file name".into()))?))]
    };
    let root = if a.input.is_dir() { a.out.clone() } else { a.out.parent().map(Path::to_path_buf).unwrap_or_default() };
    let mut m = Manifest::new("restore", argv);
    for p in &r.inputs {
        m.add_input(p)?;
    }
    for (src, rel) in &jobs {
        let img = read_png(src)?;
        write_png(&root.join(rel), &r.restore(&img)?)?;
        m.add_input(src)?;
        m.add_output(&root, rel)?;
    }
    m.metrics.insert("images".into(), json!(jobs.len()));
    m.metrics.insert("priors".into(), json!(r.use_priors));
    m.write(&root)?;
    Ok(())
}

/// Degraded, restored and clean side by side.
fn strip(parts: [&Tensor<f32>; 3]) -> Result<ImageTensor> {
    let (_, c, h, w) = parts[0].dims4()?;
    let t = Tensor::from_fn(&[1, c, h, 3 * w], |i| {
        let x = i % (3 * w);
        let (ch, y) = (i / (3 * w * h), (i / (3 * w)) % h);
        parts[x / w].data()[(ch * h + y) * w + x % w]
    });
    Ok(ImageTensor::clipped(t, ValueRange::Signed)?)
}

fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let r = Restorer::load(&a.ckpt, a.vae.as_deref())?;
    let data = read_dataset(&a.data)?;
    let vae = r.use_priors.then_some(&r.vae);
    let (report, outputs) = evaluate(&r.net, vae, &r.store, &data.samples, &data.classes)?;
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    let path = a.out.join(EVAL_REPORT);
    std::fs::write(&path, eval_tsv(&report)).map_err(CliError::io(&path))?;
    let mut m = Manifest::new("eval", argv);
    for p in &r.inputs {
        m.add_input(p)?;
    }
    m.add_input(&a.data)?;
    m.add_output(&a.out, Path::new(EVAL_REPORT))?;
    if a.save_images {
        for (i, (s, o)) in data.samples.iter().zip(&outputs).enumerate() {
            let rel = PathBuf::from(format!("images/{i:05}.png"));
            write_png(&a.out.join(&rel), &strip([s.degraded.tensor(), o, s.clean.tensor()])?)?;
            m.add_output(&a.out, &rel)?;
        }
    }
    m.metrics.insert("count".into(), json!(report.count));
    m.metrics.insert("infinite".into(), json!(report.infinite));
    m.metrics.insert("mean_psnr".into(), json!(fmt_metric(report.mean_psnr)));
    m.metrics.insert("mean_ssim".into(), json!(fmt_metric(report.mean_ssim)));
    m.write(&a.out)?;
    log::info!("PSNR {:.3} dB, SSIM {:.4} over {} images", report.mean_psnr, report.mean_ssim, report.count);
    Ok(())
}

fn bench(a: &BenchArgs, argv: &[String]) -> Result<()> {
    if a.sizes.is_empty() || a.runs < 5 {
        return Err(CliError::Config("need at least one size and five timed runs".into()));
    }
    let sizes: Vec<(usize, usize)> = a.sizes.iter().map(|&s| (s, s)).collect();
    let records = bench_attention(&sizes, a.channels, a.heads, a.warmups, a.runs)?;
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    let path = a.out.join(BENCH_REPORT);
    let text = bench_tsv(&records);
    std::fs::write(&path, &text).map_err(CliError::io(&path))?;
    print!("{text}");
    let mut m = Manifest::new("bench-attn", argv);
    m.add_output(&a.out, Path::new(BENCH_REPORT))?;
    for mech in Mechanism::ALL {
        m.metrics.insert(format!("scaling_{}", mech.name()), json!(scaling_ratios(&records, mech)));
    }
    m.write(&a.out)?;
    Ok(())
}

fn export_latents(g: &GlobalArgs, a: &LatentArgs, argv: &[String]) -> Result<()> {
    let vp = ckpt_path(&a.vae, VAE_CKPT);
    let ck = load_kind(&vp, VAE_CKPT, &["vae", "dair"])?;
    let cfg = ck.config()?;
    let mut store = ParamStore::<f32>::new();
    let vae = build_vae(&mut store, &cfg)?;
    ck.restore_params(&mut store, VAE_PREFIX)?;
    let data = read_dataset(&a.data)?;
    let seed = g.seed.unwrap_or(cfg.seed);
    let sep = latent_separation(&vae, &store, &data.samples, seed)?;
    let (emb, dim) = embed_latents(&vae, &store, &data.samples)?;
    let mut text = String::from("index\tlabel\tclass");
    for j in 0..dim {
        text.push_str(&format!("\tz{j}"));
    }
    text.push('\n');
    for (i, s) in data.samples.iter().enumerate() {
        text.push_str(&format!("{i}\t{}\t{}", s.label, s.spec));
        for v in &emb[i * dim..(i + 1) * dim] {
            text.push_str(&format!("\t{}", fmt_metric(*v)));
        }
        text.push('\n');
    }
    text.push_str(&format!("# silhouette\ttrue={}\tshuffled={}\n", fmt_metric(sep.true_labels), fmt_metric(sep.shuffled)));
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    let path = a.out.join(LATENTS);
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    let mut m = Manifest::new("export-latents", argv);
    m.seed = Some(seed);
    m.add_input(&vp)?;
    m.add_input(&a.data)?;
    m.add_output(&a.out, Path::new(LATENTS))?;
    m.metrics.insert("silhouette_true".into(), json!(fmt_metric(sep.true_labels)));
    m.metrics.insert("silhouette_shuffled".into(), json!(fmt_metric(sep.shuffled)));
    m.write(&a.out)?;
    log::info!("silhouette true {:.4}, shuffled {:.4}", sep.true_labels, sep.shuffled);
    Ok(())
}

fn gradcheck(g: &GlobalArgs, a: &GradcheckArgs, argv: &[String]) -> Result<()> {
    let blocks: Vec<&str> = match (&a.block, a.all) {
        (Some(b), false) => vec![b.as_str()],
        (None, true) => GRADCHECK_BLOCKS.to_vec(),
        _ => return Err(CliError::Usage("pass --all or --block NAME".into())),
    };
    let opts = GradcheckOptions { eps: a.eps, max_per_param: a.max_per_param, corrupt: 0.0, seed: g.seed.unwrap_or(0) };
    let mut text = String::from("block\tmax_rel_error\tchecked\trefined\tfrozen_skipped\tfrozen_violations\tworst\tpassed\n");
    let mut ok = true;
    let mut m = Manifest::new("gradcheck", argv);
    m.seed = Some(opts.seed);
    for b in blocks {
        let r = metrics::gradcheck_block(b, opts)?;
        let passed = r.passed(a.tol);
        ok &= passed;
        text.push_str(&format!(
            "{b}\t{:.3e}\t{}\t{}\t{}\t{}\t{}\t{passed}\n",
            r.max_rel_error, r.checked, r.refined, r.frozen_skipped, r.frozen_violations, r.worst
        ));
        m.metrics.insert(b.into(), json!(format!("{:.3e}", r.max_rel_error)));
    }
    print!("{text}");
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    let path = a.out.join(GRADCHECK_REPORT);
    std::fs::write(&path, &text).map_err(CliError::io(&path))?;
    m.add_output(&a.out, Path::new(GRADCHECK_REPORT))?;
    m.write(&a.out)?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check above {:e}", a.tol)))
    }
}
