//! PSNR, forward-pass timing, dictionary mosaics and local contrast
//! normalization.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::model::{forward, ModelParams};
use crate::tensor::{Image, PaddingMode};

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(reference: &Image, test: &Image, peak: f64) -> Result<f64> {
    if !reference.same_dims(test) {
        return Err(shape_err(format!("psnr: {:?} vs {:?}", reference.dims(), test.dims())));
    }
    let n = reference.data().len() as f64;
    let mse = reference.data().iter().zip(test.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkStats {
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Timed repetitions, warm-up excluded.
    pub reps: usize,
    pub image_dims: (usize, usize),
    pub thread_count: usize,
    /// Every repetition produced the same reconstruction bits.
    pub output_identical: bool,
}

impl BenchmarkStats {
    pub const CSV_HEADER: &'static str = "height,width,threads,reps,mean_seconds,std_seconds,output_identical";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{}",
            self.image_dims.0, self.image_dims.1, self.thread_count, self.reps, self.mean_seconds, self.std_seconds, self.output_identical
        )
    }
}

/// Time `reps` forward passes on a fixed random image. With `reps >= 3`
/// the first pass is treated as warm-up and dropped from the statistics.
pub fn benchmark_forward(p: &ModelParams, height: usize, width: usize, reps: usize, threads: usize) -> Result<BenchmarkStats> {
    if reps == 0 {
        return Err(Error::Parameter("benchmark needs at least one repetition".into()));
    }
    if threads == 0 {
        return Err(Error::Parameter("benchmark needs at least one thread".into()));
    }
    let c = p.d.out_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe4c);
    let img = Image::from_vec(height, width, c, (0..height * width * c).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let (times, identical) = pool.install(|| -> Result<(Vec<f64>, bool)> {
        let mut times = Vec::with_capacity(reps);
        let mut first: Option<Image> = None;
        let mut identical = true;
        for _ in 0..reps {
            let t0 = Instant::now();
            let out = forward(&img, p, None, PaddingMode::Zero)?.reconstruction;
            times.push(t0.elapsed().as_secs_f64());
            match &first {
                None => first = Some(out),
                Some(f) => identical &= f.data().iter().zip(out.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            }
        }
        Ok((times, identical))
    })?;
    let timed = if reps >= 3 { &times[1..] } else { &times[..] };
    let n = timed.len() as f64;
    let mean = timed.iter().sum::<f64>() / n;
    let var = if timed.len() > 1 { timed.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(BenchmarkStats {
        mean_seconds: mean,
        std_seconds: var.sqrt(),
        reps: timed.len(),
        image_dims: (height, width),
        thread_count: threads,
        output_identical: identical,
    })
}

const GUTTER: f64 = 0.5;

/// Tile the decoder atoms on a ⌈√m⌉ × ⌈√m⌉ grid with mid-gray gutters
/// (also around the border). Multichannel atoms show their first channel.
pub fn dictionary_mosaic(p: &ModelParams, separator: usize) -> Image {
    let m = p.d.in_channels();
    let s = p.d.size();
    let cols = (1..=m).find(|g| g * g >= m).unwrap_or(1);
    let side = cols * s + (cols + 1) * separator;
    let mut out = Image::filled(side, side, 1, GUTTER);
    for atom in 0..m {
        let taps = p.d.filter(atom, 0);
        let lo = taps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = taps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let top = separator + (atom / cols) * (s + separator);
        let left = separator + (atom % cols) * (s + separator);
        for u in 0..s {
            for v in 0..s {
                let val = if range > 0.0 { (taps[u * s + v] - lo) / range } else { 0.0 };
                out.set(top + u, left + v, 0, val);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub window: usize,
    pub sigma: f64,
    pub eps: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { window: 9, sigma: 2.0, eps: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub image: Image,
    pub mean: Image,
    pub std: Image,
    pub eps: f64,
}

impl Normalized {
    /// Map an image from the normalized domain back to the original one.
    pub fn denormalize(&self, y: &Image) -> Result<Image> {
        if !y.same_dims(&self.mean) {
            return Err(shape_err("denormalize: image does not match the stored maps"));
        }
        let data =
            y.data().iter().zip(self.mean.data().iter().zip(self.std.data())).map(|(v, (mu, sd))| v * (sd + self.eps) + mu).collect();
        Image::from_vec(y.height(), y.width(), y.channels(), data)
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|k| (-(k as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted local average; at the borders the weights are
/// renormalized over the taps that fall inside the image.
pub fn local_mean(x: &Image, window: usize, sigma: f64) -> Image {
    let g = gaussian_window(window, sigma);
    let r = window / 2;
    let (h, w, c) = x.dims();
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::zeros(h, w, c);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for (k, gk) in g.iter().enumerate() {
                        let off = k as isize - r as isize;
                        let (yy, xq) = if horizontal { (y as isize, xx as isize + off) } else { (y as isize + off, xx as isize) };
                        if yy >= 0 && xq >= 0 && (yy as usize) < h && (xq as usize) < w {
                            acc += gk * src.get(yy as usize, xq as usize, ch);
                            norm += gk;
                        }
                    }
                    out.set(y, xx, ch, acc / norm);
                }
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// `(x − μ) / (σ + ε)` with Gaussian local mean μ and local standard
/// deviation σ.
pub fn local_contrast_normalize(x: &Image, cfg: &ContrastConfig) -> Result<Normalized> {
    if cfg.window == 0 || cfg.window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("window must be odd, got {}", cfg.window)));
    }
    if x.height() < cfg.window || x.width() < cfg.window {
        return Err(Error::Size(format!("{}x{} image is smaller than the {} window", x.height(), x.width(), cfg.window)));
    }
    let mean = local_mean(x, cfg.window, cfg.sigma);
    let sq = Image::from_vec(x.height(), x.width(), x.channels(), x.data().iter().map(|v| v * v).collect())?;
    let mean_sq = local_mean(&sq, cfg.window, cfg.sigma);
    let std_data: Vec<f64> = mean_sq.data().iter().zip(mean.data()).map(|(q, m)| (q - m * m).max(0.0).sqrt()).collect();
    let std = Image::from_vec(x.height(), x.width(), x.channels(), std_data)?;
    let data = x.data().iter().zip(mean.data().iter().zip(std.data())).map(|(v, (mu, sd))| (v - mu) / (sd + cfg.eps)).collect();
    Ok(Normalized { image: Image::from_vec(x.height(), x.width(), x.channels(), data)?, mean, std, eps: cfg.eps })
}
