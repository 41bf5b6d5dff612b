//! Reconstruction losses: mean ℓ1 / ℓ2, multiscale SSIM, and their mix.
//!
//! MS-SSIM is built on the autodiff tape, so the same graph serves both
//! evaluation and training.

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelLoss {
    /// `mean |x - x̂|`
    L1,
    /// `mean 0.5 (x - x̂)²`
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
    /// `α (1 - ms_ssim) + (1 - α) l1`
    Combined,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "combined" => Ok(LossKind::Combined),
            other => Err(format!("unknown loss '{other}' (expected l1|l2|combined)")),
        }
    }
}

/// Per-scale exponents; the first `n` are renormalised to sum to one.
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self { scales: 3, window: 11, sigma: 1.5, peak: 1.0 }
    }
}

impl MsSsimConfig {
    /// Largest scale count `≤ self.scales` with `min(h, w) ≥ 2^(n-1) · window`.
    pub fn effective_scales(&self, height: usize, width: usize) -> Result<usize> {
        if self.scales == 0 || self.scales > SCALE_WEIGHTS.len() {
            return Err(Error::Parameter(format!("MS-SSIM supports 1..=5 scales, got {}", self.scales)));
        }
        let side = height.min(width);
        if side < self.window {
            return Err(Error::Size(format!("{height}x{width} image is smaller than the {}-pixel SSIM window", self.window)));
        }
        let mut n = self.scales;
        while n > 1 && side < (1 << (n - 1)) * self.window {
            n -= 1;
        }
        Ok(n)
    }

    fn gaussian(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let t = i as f64 - half;
                (-t * t / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn check_same(x: &Image, y: &Image) -> Result<()> {
    if !x.same_dims(y) {
        return Err(shape_err(format!("images differ in shape: {:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(())
}

pub fn pixel_loss(x: &Image, x_hat: &Image, kind: PixelLoss) -> Result<f64> {
    check_same(x, x_hat)?;
    let n = x.data().len() as f64;
    let diffs = x.data().iter().zip(x_hat.data()).map(|(a, b)| a - b);
    Ok(match kind {
        PixelLoss::L1 => diffs.map(f64::abs).sum::<f64>() / n,
        PixelLoss::L2 => diffs.map(|d| 0.5 * d * d).sum::<f64>() / n,
    })
}

/// MS-SSIM node for two same-shaped tape values; `scales` must already be
/// validated with [`MsSsimConfig::effective_scales`].
pub(crate) fn ms_ssim_node(tape: &mut Tape, x: Var, y: Var, cfg: &MsSsimConfig, scales: usize) -> Var {
    let window = cfg.gaussian();
    let c1 = (0.01 * cfg.peak).powi(2);
    let c2 = (0.03 * cfg.peak).powi(2);
    let total: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (x, y);
    let mut product: Option<Var> = None;
    for (j, weight) in SCALE_WEIGHTS[..scales].iter().enumerate() {
        let last = j + 1 == scales;
        let mu_x = tape.valid_blur(x, &window);
        let mu_y = tape.valid_blur(y, &window);
        let xx = tape.mul(x, x);
        let yy = tape.mul(y, y);
        let xy = tape.mul(x, y);
        let e_xx = tape.valid_blur(xx, &window);
        let e_yy = tape.valid_blur(yy, &window);
        let e_xy = tape.valid_blur(xy, &window);
        let mu_xx = tape.mul(mu_x, mu_x);
        let mu_yy = tape.mul(mu_y, mu_y);
        let mu_xy = tape.mul(mu_x, mu_y);
        let var_x = tape.sub(e_xx, mu_xx);
        let var_y = tape.sub(e_yy, mu_yy);
        let cov = tape.sub(e_xy, mu_xy);

        let cov2 = tape.scale(cov, 2.0);
        let cs_num = tape.offset(cov2, c2);
        let var_sum = tape.add(var_x, var_y);
        let cs_den = tape.offset(var_sum, c2);
        let cs_map = tape.div(cs_num, cs_den);

        let term_map = if last {
            let mxy2 = tape.scale(mu_xy, 2.0);
            let l_num = tape.offset(mxy2, c1);
            let mu_sum = tape.add(mu_xx, mu_yy);
            let l_den = tape.offset(mu_sum, c1);
            let l_map = tape.div(l_num, l_den);
            tape.mul(l_map, cs_map)
        } else {
            cs_map
        };
        let mean = tape.mean(term_map);
        let clamped = tape.clamp_min(mean, 0.0);
        let weighted = tape.pow(clamped, weight / total);
        product = Some(match product {
            None => weighted,
            Some(p) => tape.mul(p, weighted),
        });
        if !last {
            x = tape.avg_pool2(x);
            y = tape.avg_pool2(y);
        }
    }
    product.expect("at least one scale")
}

/// Multiscale SSIM in `[0, 1]`. The scale count drops (with a warning)
/// until the coarsest level still fits the window.
pub fn ms_ssim(x: &Image, y: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    check_same(x, y)?;
    let scales = cfg.effective_scales(x.height(), x.width())?;
    if scales < cfg.scales {
        log::warn!("MS-SSIM on {}x{} uses {scales} of {} scales", x.height(), x.width(), cfg.scales);
    }
    let shape = Shape::new(x.height(), x.width(), x.channels());
    let mut tape = Tape::new();
    let a = tape.constant(x.data().to_vec(), shape);
    let b = tape.constant(y.data().to_vec(), shape);
    let out = ms_ssim_node(&mut tape, a, b, cfg, scales);
    Ok(tape.scalar(out))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// `α (1 - ms_ssim(x, x̂)) + (1 - α) mean|x - x̂|`
pub fn combined_loss(x: &Image, x_hat: &Image, alpha: f64, cfg: &MsSsimConfig) -> Result<f64> {
    check_alpha(alpha)?;
    let l1 = pixel_loss(x, x_hat, PixelLoss::L1)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let ms = ms_ssim(x, x_hat, cfg)?;
    Ok(alpha * (1.0 - ms) + (1.0 - alpha) * l1)
}

/// Evaluate any [`LossKind`] without building gradients.
pub fn loss_value(x: &Image, x_hat: &Image, kind: LossKind, alpha: f64, cfg: &MsSsimConfig) -> Result<f64> {
    match kind {
        LossKind::L1 => pixel_loss(x, x_hat, PixelLoss::L1),
        LossKind::L2 => pixel_loss(x, x_hat, PixelLoss::L2),
        LossKind::Combined => combined_loss(x, x_hat, alpha, cfg),
    }
}

/// Loss node on the tape; `target` is a constant, `x_hat` carries gradients.
pub(crate) fn loss_node(tape: &mut Tape, target: Var, x_hat: Var, kind: LossKind, alpha: f64, cfg: &MsSsimConfig, scales: usize) -> Var {
    let diff = tape.sub(x_hat, target);
    match kind {
        LossKind::L1 => {
            let a = tape.abs(diff);
            tape.mean(a)
        }
        LossKind::L2 => {
            let sq = tape.mul(diff, diff);
            let half = tape.scale(sq, 0.5);
            tape.mean(half)
        }
        LossKind::Combined => {
            let a = tape.abs(diff);
            let l1 = tape.mean(a);
            let l1w = tape.scale(l1, 1.0 - alpha);
            if alpha == 0.0 {
                return l1w;
            }
            let ms = ms_ssim_node(tape, target, x_hat, cfg, scales);
            // α (1 - ms) = α - α ms
            let neg = tape.scale(ms, -alpha);
            let term = tape.offset(neg, alpha);
            tape.add(term, l1w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pixel_loss_values() {
        let x = random_image(1, 8, 8);
        assert_eq!(pixel_loss(&x, &x, PixelLoss::L1).unwrap(), 0.0);
        assert_eq!(pixel_loss(&x, &x, PixelLoss::L2).unwrap(), 0.0);
        let shifted = Image::from_vec(8, 8, 1, x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((pixel_loss(&x, &shifted, PixelLoss::L1).unwrap() - 0.1).abs() < 1e-12);
        assert!((pixel_loss(&x, &shifted, PixelLoss::L2).unwrap() - 0.005).abs() < 1e-12);
        assert!(matches!(pixel_loss(&x, &random_image(1, 8, 7), PixelLoss::L1), Err(Error::Shape(_))));
    }

    #[test]
    fn ms_ssim_self_and_symmetry() {
        let cfg = MsSsimConfig::default();
        let x = random_image(2, 64, 64);
        let y = random_image(3, 64, 64);
        assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() <= 1e-12);
        let a = ms_ssim(&x, &y, &cfg).unwrap();
        let b = ms_ssim(&y, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn constant_images_closed_form() {
        let cfg = MsSsimConfig { scales: 1, ..Default::default() };
        let (v1, v2) = (0.5, 0.25);
        let a = Image::filled(16, 16, 1, v1);
        let b = Image::filled(16, 16, 1, v2);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * v1 * v2 + c1) / (v1 * v1 + v2 * v2 + c1);
        assert!((ms_ssim(&a, &b, &cfg).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn scales_reduce_then_fail() {
        let cfg = MsSsimConfig::default();
        assert_eq!(cfg.effective_scales(64, 64).unwrap(), 3);
        assert_eq!(cfg.effective_scales(43, 64).unwrap(), 2);
        assert_eq!(cfg.effective_scales(11, 30).unwrap(), 1);
        assert!(matches!(cfg.effective_scales(10, 30), Err(Error::Size(_))));
        let x = random_image(4, 8, 8);
        assert!(matches!(ms_ssim(&x, &x, &cfg), Err(Error::Size(_))));
    }

    #[test]
    fn combined_loss_limits() {
        let cfg = MsSsimConfig::default();
        let x = random_image(5, 48, 48);
        let y = random_image(6, 48, 48);
        for alpha in [0.0, 0.3, 0.8, 1.0] {
            assert_eq!(combined_loss(&x, &x, alpha, &cfg).unwrap(), 0.0);
        }
        let l1 = pixel_loss(&x, &y, PixelLoss::L1).unwrap();
        assert_eq!(combined_loss(&x, &y, 0.0, &cfg).unwrap(), l1);
        let ms = ms_ssim(&x, &y, &cfg).unwrap();
        assert!((combined_loss(&x, &y, 1.0, &cfg).unwrap() - (1.0 - ms)).abs() < 1e-15);
        assert!(matches!(combined_loss(&x, &y, 1.5, &cfg), Err(Error::Parameter(_))));
        assert!(matches!(combined_loss(&x, &y, -0.1, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn tape_loss_matches_direct_value() {
        let cfg = MsSsimConfig::default();
        let x = random_image(7, 50, 50);
        let y = random_image(8, 50, 50);
        let shape = Shape::new(50, 50, 1);
        let scales = cfg.effective_scales(50, 50).unwrap();
        for kind in [LossKind::L1, LossKind::L2, LossKind::Combined] {
            let mut tape = Tape::new();
            let t = tape.constant(x.data().to_vec(), shape);
            let h = tape.leaf(y.data().to_vec(), shape, true);
            let node = loss_node(&mut tape, t, h, kind, 0.8, &cfg, scales);
            let direct = loss_value(&x, &y, kind, 0.8, &cfg).unwrap();
            assert!((tape.scalar(node) - direct).abs() < 1e-14, "{kind:?}");
        }
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_differences() {
        let cfg = MsSsimConfig::default();
        let (h, w) = (24, 23);
        let x = random_image(9, h, w);
        let y = random_image(10, h, w);
        let shape = Shape::new(h, w, 1);
        let scales = cfg.effective_scales(h, w).unwrap();
        assert_eq!(scales, 2);
        let mut tape = Tape::new();
        let t = tape.constant(x.data().to_vec(), shape);
        let v = tape.leaf(y.data().to_vec(), shape, true);
        let out = ms_ssim_node(&mut tape, t, v, &cfg, scales);
        let g = tape.backward(out);
        let grad = g.get(v).unwrap();
        // five-point stencil: the pyramid sums carry enough rounding noise
        // to swamp a tiny central step
        let eps = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let k = rng.random_range(0..h * w);
            let eval = |d: f64| {
                let mut yy = y.clone();
                yy.data_mut()[k] += d;
                ms_ssim(&x, &yy, &cfg).unwrap()
            };
            let fd = (8.0 * (eval(eps) - eval(-eps)) - (eval(2.0 * eps) - eval(-2.0 * eps))) / (12.0 * eps);
            let denom = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!((fd - grad[k]).abs() / denom < 1e-5, "pixel {k}: fd {fd} vs {}", grad[k]);
        }
    }
}
