//! Losses, gradients, optimizer, data pipeline and the training loop.

pub mod adam;
pub mod data;
pub mod grad;
pub mod gradcheck;
pub mod loss;

use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{init_params, load_model, ModelDims, ModelParams};
use crate::tensor::PaddingMode;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use data::{make_batch, Corpus, Sample};
pub use grad::{backward, LossSpec, ParamGrads};
pub use loss::{combined_loss, ms_ssim, pixel_loss, LossKind, MsSsimConfig, PixelLoss};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Task {
    #[default]
    Denoise,
    Inpaint,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "inpaint" => Ok(Task::Inpaint),
            _ => Err(Error::Parameter(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    /// Noise standard deviation on the 0–255 scale.
    pub sigma_n: f64,
    pub mask_density: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub alpha: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub warm_start: Option<PathBuf>,
    /// Ignored when warm starting; the loaded model fixes its own shape.
    pub dims: ModelDims,
    pub padding: PaddingMode,
    pub ms_ssim: MsSsimConfig,
    /// Worker threads for per-sample gradients; 0 means the current pool.
    pub threads: usize,
    /// Reduce per-sample gradients in batch order.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            sigma_n: 20.0,
            mask_density: 0.5,
            patch_size: 64,
            batch_size: 8,
            learning_rate: 1e-3,
            steps: 1000,
            alpha: 0.8,
            loss: LossKind::Combined,
            seed: 0,
            warm_start: None,
            dims: ModelDims::default(),
            padding: PaddingMode::Zero,
            ms_ssim: MsSsimConfig::default(),
            threads: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.mask_density > 0.0 && self.mask_density < 1.0) {
            return bad(format!("mask density must lie in (0, 1), got {}", self.mask_density));
        }
        if !(self.sigma_n.is_finite() && self.sigma_n >= 0.0) {
            return bad(format!("noise level must be nonnegative, got {}", self.sigma_n));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patch_size == 0 || self.batch_size == 0 {
            return bad("patch and batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec { kind: self.loss, alpha: self.alpha, ms_ssim: self.ms_ssim }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Batch loss before each update.
    pub history: Vec<f64>,
}

pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with_observer(cfg, corpus, |_, _| {})
}

/// Train, calling `observer(step, loss)` after every step.
pub fn train_with_observer(cfg: &TrainConfig, corpus: &Corpus, observer: impl FnMut(usize, f64) + Send) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run = || run_training(cfg, corpus, observer);
    if cfg.threads == 0 {
        return run();
    }
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build().map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    pool.install(run)
}

fn initial_params(cfg: &TrainConfig, channels: usize) -> Result<ModelParams> {
    let p = match &cfg.warm_start {
        Some(path) => {
            let p = load_model(path)?;
            if p.dims() != (ModelDims { channels, ..cfg.dims }) {
                debug!("warm start dims {:?} override configured {:?}", p.dims(), cfg.dims);
            }
            p
        }
        None => init_params(cfg.seed, ModelDims { channels, ..cfg.dims })?,
    };
    if p.d.out_channels() != channels {
        return Err(Error::Shape(format!("model has {} channels, corpus has {channels}", p.d.out_channels())));
    }
    Ok(p)
}

fn run_training(cfg: &TrainConfig, corpus: &Corpus, mut observer: impl FnMut(usize, f64) + Send) -> Result<TrainOutcome> {
    if corpus.patch_size() != cfg.patch_size {
        warn!("corpus was built for {} patches, config asks for {}", corpus.patch_size(), cfg.patch_size);
    }
    let mut p = initial_params(cfg, corpus.channels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let spec = cfg.loss_spec();
    let hp = AdamHyper::default();
    let mut state = AdamState::new(&p);
    let mut history = Vec::with_capacity(cfg.steps);
    let report_every = (cfg.steps / 20).max(1);
    for step in 0..cfg.steps {
        let batch = make_batch(corpus, cfg, &mut rng)?;
        let (g, loss) = backward(&batch, &p, &spec, cfg.padding, cfg.deterministic).map_err(|e| at_step(e, step))?;
        adam_step(&mut p, &g, &mut state, cfg.learning_rate, &hp).map_err(|e| at_step(e, step))?;
        history.push(loss);
        observer(step, loss);
        if step % report_every == 0 || step + 1 == cfg.steps {
            info!("step {step}: loss {loss:.6}");
        }
    }
    Ok(TrainOutcome { params: p, history })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { group, detail } => Error::Numeric { group, detail: format!("step {step}: {detail}") },
        other => other,
    }
}

/// Loss history as `step,loss` CSV with a header row.
pub fn write_history_csv(history: &[f64], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,loss")?;
    for (k, l) in history.iter().enumerate() {
        writeln!(out, "{k},{l:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, save_model};
    use crate::tensor::Image;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            patch_size: 12,
            batch_size: 2,
            steps: 5,
            loss: LossKind::L2,
            dims: ModelDims { filter_size: 3, maps: 4, channels: 1, unroll: 2 },
            seed: 3,
            ..Default::default()
        }
    }

    fn tiny_corpus() -> Corpus {
        let img = Image::from_vec(16, 16, 1, (0..256).map(|k| f64::from((k * 37) % 101) / 100.0).collect()).unwrap();
        Corpus::new(vec![img], 12).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 1.5, ..Default::default() },
            TrainConfig { mask_density: 1.0, ..Default::default() },
            TrainConfig { sigma_n: -1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        }
        assert_eq!("inpaint".parse::<Task>().unwrap(), Task::Inpaint);
        assert!("blur".parse::<Task>().is_err());
    }

    #[test]
    fn same_seed_same_history() {
        let a = train(&tiny_cfg(), &tiny_corpus()).unwrap();
        let b = train(&tiny_cfg(), &tiny_corpus()).unwrap();
        assert_eq!(a.history.len(), 5);
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let c = train(&TrainConfig { seed: 4, ..tiny_cfg() }, &tiny_corpus()).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn warm_start_resumes_from_saved_loss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.acsc");
        let first = train(&tiny_cfg(), &tiny_corpus()).unwrap();
        save_model(&first.params, &path).unwrap();
        let cfg = TrainConfig { warm_start: Some(path), seed: 8, ..tiny_cfg() };
        let resumed = train(&cfg, &tiny_corpus()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        rng.set_stream(1);
        let batch = make_batch(&tiny_corpus(), &cfg, &mut rng).unwrap();
        let mut expected = 0.0;
        for s in &batch {
            let r = forward(&s.input, &first.params, None, cfg.padding).unwrap().reconstruction;
            expected += pixel_loss(&s.target, &r, PixelLoss::L2).unwrap();
        }
        expected /= batch.len() as f64;
        assert!((resumed.history[0] - expected).abs() <= 1e-15 * expected.max(1.0));
    }

    #[test]
    fn history_csv_layout() {
        let mut out = Vec::new();
        write_history_csv(&[0.5, 0.25], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss\n0,5e-1\n1,2.5e-1\n");
    }
}
