//! Command-line driver.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::evaluation::{benchmark_forward, dictionary_mosaic, psnr, BenchmarkStats};
use crate::model::{forward, load_model, save_model, ModelDims, ModelParams};
use crate::pgm::{read_pgm, read_pgm_dir, write_pgm};
use crate::tensor::{Image, PaddingMode};
use crate::training::gradcheck::gradcheck;
use crate::training::{train_with_observer, Corpus, LossKind, MsSsimConfig, Task, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;

/// Largest gradient-check relative error accepted by `report gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "acsc", version, about = "Learned convolutional sparse coding for image denoising and inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory of PGM images.
    Train(TrainArgs),
    /// Run a trained model on one image.
    Apply(ApplyArgs),
    /// Evaluation, benchmarking and diagnostics.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Denoise,
    Inpaint,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Inpaint => Task::Inpaint,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    L1,
    L2,
    Combined,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L1 => LossKind::L1,
            LossArg::L2 => LossKind::L2,
            LossArg::Combined => LossKind::Combined,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PaddingArg {
    Zero,
    Circular,
}

impl From<PaddingArg> for PaddingMode {
    fn from(p: PaddingArg) -> Self {
        match p {
            PaddingArg::Zero => PaddingMode::Zero,
            PaddingArg::Circular => PaddingMode::Circular,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "denoise")]
    pub task: TaskArg,
    /// Directory of training images (PGM).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, default_value_t = 20.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mask_density: f64,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "combined")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 3)]
    pub ms_ssim_scales: usize,
    /// Start from a saved model instead of a fresh initialization.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Write the per-step loss as `step,loss` CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub filter_size: usize,
    #[arg(long, default_value_t = 64)]
    pub maps: usize,
    #[arg(long, default_value_t = 3)]
    pub unroll: usize,
    #[arg(long, value_enum, default_value = "zero")]
    pub padding: PaddingArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Allow per-sample gradients to be reduced in completion order.
    #[arg(long)]
    pub nondeterministic: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long, value_enum, default_value = "denoise")]
    pub mode: TaskArg,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clean reference; when given, PSNR values are printed.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Observation mask image (white = observed).
    #[arg(long, conflicts_with = "mask_seed")]
    pub mask: Option<PathBuf>,
    /// Draw a Bernoulli mask from this seed and apply it to the input.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    /// Also write the mask that was used.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "zero")]
    pub padding: PaddingArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Per-image PSNR over a directory of clean test images.
    Eval(EvalArgs),
    /// Time the forward pass.
    Bench(BenchArgs),
    /// Write the decoder atoms as an image.
    Mosaic(MosaicArgs),
    /// Check gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value = "denoise")]
    pub mode: TaskArg,
    #[arg(long, default_value_t = 20.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "zero")]
    pub padding: PaddingArg,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time; a fresh default-sized model when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct MosaicArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub separator: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric { .. }) => EXIT_NUMERIC,
        Some(Error::Shape(_)) | Some(Error::Size(_)) => EXIT_SHAPE,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Report(ReportCommand::Eval(a)) => cmd_eval(a),
        Command::Report(ReportCommand::Bench(a)) => cmd_bench(a),
        Command::Report(ReportCommand::Mosaic(a)) => cmd_mosaic(a),
        Command::Report(ReportCommand::Gradcheck(a)) => cmd_gradcheck(a),
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> anyhow::Result<T> + Send) -> anyhow::Result<T> {
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn load(path: &Path) -> anyhow::Result<ModelParams> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_image(path: &Path) -> anyhow::Result<Image> {
    read_pgm(path).with_context(|| format!("reading image {}", path.display()))
}

pub fn cmd_train(a: TrainArgs) -> anyhow::Result<i32> {
    let cfg = TrainConfig {
        task: a.task.into(),
        sigma_n: a.sigma,
        mask_density: a.mask_density,
        patch_size: a.patch_size,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        steps: a.steps,
        alpha: a.alpha,
        loss: a.loss.into(),
        seed: a.seed,
        warm_start: a.warm_start,
        dims: ModelDims { filter_size: a.filter_size, maps: a.maps, channels: 1, unroll: a.unroll },
        padding: a.padding.into(),
        ms_ssim: MsSsimConfig { scales: a.ms_ssim_scales, ..Default::default() },
        threads: a.threads.max(1),
        deterministic: !a.nondeterministic,
    };
    cfg.validate()?;
    let corpus = Corpus::from_dir(&a.corpus, cfg.patch_size).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let mut log = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating log {}", p.display()))?);
            writeln!(w, "step,loss")?;
            Some(w)
        }
        None => None,
    };
    let mut log_err = None;
    let outcome = train_with_observer(&cfg, &corpus, |step, loss| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{step},{loss:e}") {
                log_err.get_or_insert(e);
            }
        }
    });
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(e) = log_err {
        return Err(e).context("writing loss log");
    }
    let outcome = outcome?;
    save_model(&outcome.params, &a.out).with_context(|| format!("writing model {}", a.out.display()))?;
    if let Some(last) = outcome.history.last() {
        eprintln!("trained {} steps, final loss {last:.6}", outcome.history.len());
    }
    Ok(EXIT_OK)
}

/// Bernoulli(`density`) mask, reproducible from `seed`.
pub fn bernoulli_mask(height: usize, width: usize, density: f64, seed: u64) -> anyhow::Result<Image> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::Parameter(format!("mask density must lie in (0, 1), got {density}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect();
    Ok(Image::from_vec(height, width, 1, data)?)
}

fn masked(x: &Image, mask: &Image) -> anyhow::Result<Image> {
    let data = x.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
    Ok(Image::from_vec(x.height(), x.width(), x.channels(), data)?)
}

pub fn cmd_apply(a: ApplyArgs) -> anyhow::Result<i32> {
    let p = load(&a.model)?;
    let mut input = read_image(&a.input)?;
    let reference = a.reference.as_deref().map(read_image).transpose()?;
    let mask = match a.mode {
        TaskArg::Denoise => None,
        TaskArg::Inpaint => {
            let m = match (&a.mask, a.mask_seed) {
                (Some(path), _) => {
                    let raw = read_image(path)?;
                    let bin = raw.data().iter().map(|v| if *v >= 0.5 { 1.0 } else { 0.0 }).collect();
                    Image::from_vec(raw.height(), raw.width(), 1, bin)?
                }
                (None, Some(seed)) => bernoulli_mask(input.height(), input.width(), a.density, seed)?,
                (None, None) => {
                    return Err(Error::Parameter("inpainting needs --mask or --mask-seed".into()).into());
                }
            };
            if !m.same_dims(&input) {
                return Err(Error::Shape(format!("mask is {:?}, image is {:?}", m.dims(), input.dims())).into());
            }
            input = masked(&input, &m)?;
            Some(m)
        }
    };
    if let Some(r) = &reference {
        if !r.same_dims(&input) {
            return Err(Error::Shape(format!("reference is {:?}, image is {:?}", r.dims(), input.dims())).into());
        }
    }
    let mode: PaddingMode = a.padding.into();
    let out = with_threads(a.threads, || Ok(forward(&input, &p, mask.as_ref(), mode)?))?;
    write_pgm(&out.reconstruction, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let (Some(path), Some(m)) = (&a.mask_out, &mask) {
        write_pgm(m, path)?;
    }
    if let Some(r) = &reference {
        println!("input_psnr,output_psnr");
        println!("{:.4},{:.4}", psnr(r, &input, 1.0)?, psnr(r, &out.reconstruction, 1.0)?);
    }
    Ok(EXIT_OK)
}

/// Degraded version of a clean image for evaluation.
pub fn degrade(clean: &Image, task: Task, sigma: f64, density: f64, seed: u64) -> anyhow::Result<(Image, Option<Image>)> {
    match task {
        Task::Denoise => {
            let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::Parameter(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = clean.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Ok((Image::from_vec(clean.height(), clean.width(), clean.channels(), data)?, None))
        }
        Task::Inpaint => {
            let m = bernoulli_mask(clean.height(), clean.width(), density, seed)?;
            Ok((masked(clean, &m)?, Some(m)))
        }
    }
}

pub fn cmd_eval(a: EvalArgs) -> anyhow::Result<i32> {
    let p = load(&a.model)?;
    if !a.dir.is_dir() {
        return Err(Error::Data(format!("test directory {} does not exist", a.dir.display())).into());
    }
    let images = read_pgm_dir(&a.dir)?;
    if images.is_empty() {
        return Err(Error::Data(format!("no PGM images in {}", a.dir.display())).into());
    }
    let task: Task = a.mode.into();
    let mode: PaddingMode = a.padding.into();
    println!("image,input_psnr,output_psnr");
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (k, (name, clean)) in images.iter().enumerate() {
        let (degraded, mask) = degrade(clean, task, a.sigma, a.density, a.seed.wrapping_add(k as u64))?;
        let out = with_threads(a.threads, || Ok(forward(&degraded, &p, mask.as_ref(), mode)?))?;
        let (pi, po) = (psnr(clean, &degraded, 1.0)?, psnr(clean, &out.reconstruction, 1.0)?);
        sum_in += pi;
        sum_out += po;
        println!("{name},{pi:.4},{po:.4}");
    }
    let n = images.len() as f64;
    println!("mean,{:.4},{:.4}", sum_in / n, sum_out / n);
    Ok(EXIT_OK)
}

pub fn cmd_bench(a: BenchArgs) -> anyhow::Result<i32> {
    let p = match &a.model {
        Some(path) => load(path)?,
        None => crate::model::init_params(0, ModelDims::default())?,
    };
    let stats = benchmark_forward(&p, a.size, a.size, a.reps, a.threads)?;
    println!("{}", BenchmarkStats::CSV_HEADER);
    println!("{}", stats.csv_line());
    Ok(EXIT_OK)
}

pub fn cmd_mosaic(a: MosaicArgs) -> anyhow::Result<i32> {
    let p = load(&a.model)?;
    write_pgm(&dictionary_mosaic(&p, a.separator), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let report = gradcheck(a.seed, a.trials)?;
    println!("group,max_rel_error");
    for line in report.lines() {
        println!("{line}");
    }
    println!("max,{:.3e}", report.worst());
    eprintln!("{} entries checked, {} skipped at kinks", report.entries_checked, report.entries_skipped);
    Ok(if report.worst() <= GRADCHECK_TOL { EXIT_OK } else { EXIT_NUMERIC })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["acsc"]), EXIT_USAGE);
        assert_eq!(run(["acsc", "report", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["acsc", "train", "--corpus", "/nonexistent", "--out", "/tmp/x.acsc"]), EXIT_USAGE);
        assert_eq!(run(["acsc", "apply", "--model", "/nonexistent.acsc", "--in", "a.pgm", "--out", "b.pgm"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes_map_to_codes() {
        let numeric: anyhow::Error = Error::Numeric { group: "d".into(), detail: "nan".into() }.into();
        assert_eq!(exit_code_for(&numeric), EXIT_NUMERIC);
        let shape = anyhow::Error::from(Error::Shape("x".into())).context("applying");
        assert_eq!(exit_code_for(&shape), EXIT_SHAPE);
        assert_eq!(exit_code_for(&anyhow::anyhow!("other")), EXIT_USAGE);
    }

    #[test]
    fn bernoulli_mask_is_reproducible() {
        let a = bernoulli_mask(20, 30, 0.5, 11).unwrap();
        assert_eq!(a, bernoulli_mask(20, 30, 0.5, 11).unwrap());
        assert_ne!(a, bernoulli_mask(20, 30, 0.5, 12).unwrap());
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(bernoulli_mask(2, 2, 1.0, 0).is_err());
    }
}
