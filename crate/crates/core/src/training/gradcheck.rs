//! Central finite-difference check of [`backward`] on small random networks.
//!
//! The reference loss is evaluated through the inference path plus the
//! pixel loss, so it shares no code with the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{encode_traced, forward, ModelParams};
use crate::tensor::{FilterBank, Image, PaddingMode};

use super::data::Sample;
use super::grad::{backward, LossSpec, GROUP_NAMES};
use super::loss::{pixel_loss, LossKind, PixelLoss};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so entries that are both
/// near zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Worst relative error per group, ordered as [`GROUP_NAMES`].
    pub max_rel: [f64; 4],
    pub trials: usize,
    pub entries_checked: usize,
    /// Entries whose perturbation flipped a soft-threshold even at the
    /// smallest step tried.
    pub entries_skipped: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel.iter().cloned().fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        GROUP_NAMES.iter().zip(self.max_rel).map(|(n, e)| format!("{n},{e:.3e}")).collect()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn group_mut(p: &mut ModelParams, k: usize) -> &mut [f64] {
    match k {
        0 => p.w_e.data_mut(),
        1 => p.w_d.data_mut(),
        2 => &mut p.theta,
        _ => p.d.data_mut(),
    }
}

fn reference_loss(p: &ModelParams, batch: &[Sample], mode: PaddingMode) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let out = forward(&s.input, p, s.mask.as_ref(), mode)?;
        total += pixel_loss(&s.target, &out.reconstruction, PixelLoss::L2)?;
    }
    Ok(total / batch.len() as f64)
}

fn active_pattern(p: &ModelParams, batch: &[Sample], mode: PaddingMode) -> Result<Vec<bool>> {
    let mut pat = Vec::new();
    for s in batch {
        for z in encode_traced(&s.input, p, s.mask.as_ref(), mode)? {
            pat.extend(z.data().iter().map(|v| *v != 0.0));
        }
    }
    Ok(pat)
}

fn random_bank(rng: &mut ChaCha8Rng, s: usize, cin: usize, cout: usize, std: f64) -> Result<FilterBank> {
    let normal = Normal::new(0.0, std).expect("finite std");
    FilterBank::from_vec(s, cin, cout, (0..s * s * cin * cout).map(|_| normal.sample(rng)).collect())
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Image> {
    Image::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
}

/// A random network with `s = 3`, `m = 2`, `K = 2` and a batch of one or two
/// images no larger than 4×4; odd trials carry inpainting masks.
pub fn random_problem(rng: &mut ChaCha8Rng, trial: usize) -> Result<(ModelParams, Vec<Sample>, PaddingMode)> {
    let (s, m) = (3, 2);
    let p = ModelParams {
        w_e: random_bank(rng, s, 1, m, 0.5)?,
        w_d: random_bank(rng, s, m, 1, 0.5)?,
        theta: (0..m).map(|_| rng.random_range(0.0..0.2)).collect(),
        d: random_bank(rng, s, m, 1, 0.5)?,
        unroll: 2,
    };
    let h = rng.random_range(2..=4);
    let w = rng.random_range(2..=4);
    let n = rng.random_range(1..=2);
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n {
        let target = random_image(rng, h, w)?;
        let mut input = random_image(rng, h, w)?;
        let mask = if trial % 2 == 1 {
            let mk: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect();
            input.data_mut().iter_mut().zip(&mk).for_each(|(v, m)| *v *= m);
            Some(Image::from_vec(h, w, 1, mk)?)
        } else {
            None
        };
        batch.push(Sample { input, target, mask });
    }
    let mode = if trial % 3 == 2 { PaddingMode::Circular } else { PaddingMode::Zero };
    Ok((p, batch, mode))
}

/// Compare every gradient entry of `trials` random problems against central
/// differences.
pub fn gradcheck(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = LossSpec { kind: LossKind::L2, ..Default::default() };
    let mut report = GradcheckReport { max_rel: [0.0; 4], trials, entries_checked: 0, entries_skipped: 0 };
    for trial in 0..trials {
        let (p, batch, mode) = random_problem(&mut rng, trial)?;
        let (grads, _) = backward(&batch, &p, &spec, mode, true)?;
        let base = active_pattern(&p, &batch, mode)?;
        for (k, g) in grads.groups().into_iter().enumerate() {
            for (idx, &analytic) in g.iter().enumerate() {
                let mut h = FD_STEP;
                let mut fd = None;
                while h >= 1e-9 {
                    let mut plus = p.clone();
                    group_mut(&mut plus, k)[idx] += h;
                    let mut minus = p.clone();
                    group_mut(&mut minus, k)[idx] -= h;
                    if active_pattern(&plus, &batch, mode)? == base && active_pattern(&minus, &batch, mode)? == base {
                        fd = Some((reference_loss(&plus, &batch, mode)? - reference_loss(&minus, &batch, mode)?) / (2.0 * h));
                        break;
                    }
                    h /= 10.0;
                }
                match fd {
                    Some(fd) => {
                        report.entries_checked += 1;
                        report.max_rel[k] = report.max_rel[k].max(relative_error(analytic, fd));
                    }
                    None => report.entries_skipped += 1,
                }
            }
        }
    }
    Ok(report)
}
