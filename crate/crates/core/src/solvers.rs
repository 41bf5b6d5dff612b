//! Classical ISTA, dense and convolutional, with the ℓ1-regularised
//! least-squares objective it minimises. These are the reference solvers the
//! learned encoder is checked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{analysis_transform, synthesis_transform, FeatureMaps, FilterBank, Image, PaddingMode};

/// Iterations stop once the ∞-norm change of the code drops below this.
pub const CODE_CHANGE_TOL: f64 = 1e-10;

/// Multiplier applied to the power-iteration eigenvalue estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDictionary {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseDictionary {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { group: "dictionary".into(), detail: "non-finite entry".into() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        for i in 0..n {
            d.set(i, i, 1.0);
        }
        d
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `D z`
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Dᵀ x`
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &xr) in self.data.chunks_exact(self.cols).zip(x) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xr;
            }
        }
        out
    }

    /// `Dᵀ D` as a dense `cols × cols` matrix.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.cols;
        let mut g = vec![0.0; n * n];
        for row in self.data.chunks_exact(n) {
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    g[i * n + j] += row[i] * row[j];
                }
            }
        }
        g
    }
}

/// Output of a full ISTA run.
#[derive(Clone, Debug)]
pub struct IstaReport<C> {
    pub code: C,
    /// `objective_history[0]` is the objective at `z_0 = 0`; entry `k` is the
    /// objective after `k` iterations.
    pub objective_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    /// Eigenvalue estimate times [`LIPSCHITZ_SAFETY`]; use this as the step bound.
    pub value: f64,
    /// Raw dominant-eigenvalue estimate.
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn soft_threshold_scalar(v: f64, theta: f64) -> f64 {
    let mag = v.abs() - theta;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

/// `sign(v)·max(|v| - θ_i, 0)` with a separate threshold per map.
pub fn soft_threshold(v: &FeatureMaps, theta: &[f64]) -> Result<FeatureMaps> {
    check_thresholds(theta)?;
    if theta.len() != v.maps() {
        return Err(shape_err(format!("{} thresholds for {} maps", theta.len(), v.maps())));
    }
    let mut out = v.clone();
    shrink_in_place(out.data_mut(), theta);
    Ok(out)
}

pub(crate) fn check_thresholds(theta: &[f64]) -> Result<()> {
    if let Some(bad) = theta.iter().find(|t| t.is_nan() || **t < 0.0) {
        return Err(Error::InvalidThreshold(format!("threshold {bad} is negative or NaN")));
    }
    Ok(())
}

pub(crate) fn shrink_in_place(data: &mut [f64], theta: &[f64]) {
    for px in data.chunks_exact_mut(theta.len()) {
        for (v, &t) in px.iter_mut().zip(theta) {
            *v = soft_threshold_scalar(*v, t);
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn power_iteration(
    n: usize,
    seed: u64,
    iters: usize,
    tol: f64,
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<LipschitzEstimate> {
    if iters == 0 {
        return Err(Error::Parameter("power iteration needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let mut estimate = 0.0;
    for it in 1..=iters {
        let av = apply(&v)?;
        // Rayleigh quotient of a symmetric PSD operator
        let rayleigh: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        let nav = norm(&av);
        if nav == 0.0 {
            return Ok(LipschitzEstimate { value: 0.0, eigenvalue: 0.0, iterations: it, converged: true });
        }
        let change = (rayleigh - estimate).abs();
        estimate = rayleigh;
        v = av.into_iter().map(|a| a / nav).collect();
        if it > 1 && change <= tol * estimate.abs() {
            return Ok(LipschitzEstimate { value: LIPSCHITZ_SAFETY * estimate, eigenvalue: estimate, iterations: it, converged: true });
        }
    }
    Ok(LipschitzEstimate { value: LIPSCHITZ_SAFETY * estimate, eigenvalue: estimate, iterations: iters, converged: false })
}

/// Dominant eigenvalue of `Dᵀ D` for a dense dictionary, with the safety factor.
pub fn dense_lipschitz(d: &DenseDictionary, iters: usize, tol: f64) -> Result<LipschitzEstimate> {
    power_iteration(d.cols(), 0x5eed, iters, tol, |v| Ok(d.apply_transpose(&d.apply(v))))
}

/// Power iteration on `z ↦ d ⋆ (d * z)` over `probe_h × probe_w` maps.
/// `bank` is the dictionary (maps → channels).
pub fn lipschitz_upper_bound(
    bank: &FilterBank,
    probe_h: usize,
    probe_w: usize,
    iters: usize,
    tol: f64,
    mode: PaddingMode,
) -> Result<LipschitzEstimate> {
    if probe_h == 0 || probe_w == 0 {
        return Err(Error::Parameter("probe dimensions must be positive".into()));
    }
    let m = bank.in_channels();
    let adjoint = bank.transposed();
    power_iteration(probe_h * probe_w * m, 0x5eed, iters, tol, |v| {
        let z = FeatureMaps::from_vec(probe_h, probe_w, m, v.to_vec())?;
        let x = synthesis_transform(&z, bank, mode)?;
        Ok(analysis_transform(&x, &adjoint, mode)?.data().to_vec())
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Parameter(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn check_step(l: f64) -> Result<()> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Parameter(format!("Lipschitz bound must be positive and finite, got {l}")));
    }
    Ok(())
}

/// `0.5‖x - D z‖² + λ‖z‖₁`
pub fn dense_objective(x: &[f64], d: &DenseDictionary, z: &[f64], lambda: f64) -> f64 {
    let r = d.apply(z);
    let fit: f64 = x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fit + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
}

fn inf_norm_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Dense ISTA, `z_{k+1} = S_{λ/L}(z_k + (1/L) Dᵀ(x - D z_k))` from `z_0 = 0`.
pub fn ista_dense(x: &[f64], d: &DenseDictionary, lambda: f64, max_iters: usize, lipschitz: Option<f64>) -> Result<IstaReport<Vec<f64>>> {
    check_lambda(lambda)?;
    if x.len() != d.rows() {
        return Err(shape_err(format!("signal has {} entries, dictionary has {} rows", x.len(), d.rows())));
    }
    let l = match lipschitz {
        Some(l) => l,
        None => dense_lipschitz(d, 10_000, 1e-12)?.value,
    };
    check_step(l)?;
    let threshold = lambda / l;
    let mut z = vec![0.0; d.cols()];
    let mut history = vec![dense_objective(x, d, &z, lambda)];
    let mut converged = false;
    let mut iterations_run = 0;
    for _ in 0..max_iters {
        let residual: Vec<f64> = x.iter().zip(d.apply(&z)).map(|(a, b)| a - b).collect();
        let grad = d.apply_transpose(&residual);
        let next: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| soft_threshold_scalar(zi + gi / l, threshold)).collect();
        let change = inf_norm_change(&next, &z);
        z = next;
        iterations_run += 1;
        history.push(dense_objective(x, d, &z, lambda));
        if change < CODE_CHANGE_TOL {
            converged = true;
            break;
        }
    }
    Ok(IstaReport { code: z, objective_history: history, iterations_run, converged })
}

/// Settings for [`ista_conv`].
#[derive(Clone, Copy, Debug)]
pub struct ConvIsta<'a> {
    pub lambda: f64,
    pub max_iters: usize,
    pub mask: Option<&'a Image>,
    /// Step bound; estimated on the image grid when absent.
    pub lipschitz: Option<f64>,
    pub mode: PaddingMode,
}

impl Default for ConvIsta<'_> {
    fn default() -> Self {
        Self { lambda: 0.1, max_iters: 100, mask: None, lipschitz: None, mode: PaddingMode::Zero }
    }
}

pub(crate) fn check_mask(mask: &Image, x: &Image) -> Result<()> {
    if !mask.same_dims(x) {
        return Err(shape_err(format!("mask is {:?}, image is {:?}", mask.dims(), x.dims())));
    }
    if let Some(bad) = mask.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidMask(format!("mask entry {bad} is not 0 or 1")));
    }
    Ok(())
}

fn masked_residual(x: &Image, recon: &Image, mask: Option<&Image>) -> Result<Image> {
    let mut data: Vec<f64> = x.data().iter().zip(recon.data()).map(|(a, b)| a - b).collect();
    if let Some(m) = mask {
        data.iter_mut().zip(m.data()).for_each(|(r, mv)| *r *= mv);
    }
    Image::from_vec(x.height(), x.width(), x.channels(), data)
}

fn l1(z: &FeatureMaps) -> f64 {
    z.data().iter().map(|v| v.abs()).sum()
}

/// `0.5‖M ⊙ (x - Σ d_i * z_i)‖² + λ Σ‖z_i‖₁` (`M ≡ 1` without a mask).
pub fn csc_objective(x: &Image, z: &FeatureMaps, bank: &FilterBank, lambda: f64, mask: Option<&Image>, mode: PaddingMode) -> Result<f64> {
    if z.height() != x.height() || z.width() != x.width() || bank.out_channels() != x.channels() {
        return Err(shape_err("code, dictionary and image disagree in shape"));
    }
    if let Some(m) = mask {
        check_mask(m, x)?;
    }
    let recon = synthesis_transform(z, bank, mode)?;
    let r = masked_residual(x, &recon, mask)?;
    Ok(0.5 * r.data().iter().map(|v| v * v).sum::<f64>() + lambda * l1(z))
}

/// Convolutional ISTA from `z_0 = 0`:
/// `z_{k+1} = S_{λ/L}(z_k + (1/L) d ⋆ (M ⊙ (x - d * z_k)))`.
/// `bank` is the dictionary (maps → channels).
pub fn ista_conv(x: &Image, bank: &FilterBank, opts: &ConvIsta<'_>) -> Result<IstaReport<FeatureMaps>> {
    check_lambda(opts.lambda)?;
    if bank.out_channels() != x.channels() {
        return Err(shape_err(format!("dictionary yields {} channels, image has {}", bank.out_channels(), x.channels())));
    }
    if let Some(m) = opts.mask {
        check_mask(m, x)?;
    }
    let mode = opts.mode;
    let l = match opts.lipschitz {
        Some(l) => l,
        None => lipschitz_upper_bound(bank, x.height(), x.width(), 2_000, 1e-9, mode)?.value,
    };
    check_step(l)?;
    let m = bank.in_channels();
    let adjoint = bank.transposed();
    let thresholds = vec![opts.lambda / l; m];
    let mut z = FeatureMaps::zeros(x.height(), x.width(), m);
    let mut recon = Image::zeros(x.height(), x.width(), x.channels());
    let objective = |r: &Image, z: &FeatureMaps| 0.5 * r.data().iter().map(|v| v * v).sum::<f64>() + opts.lambda * l1(z);

    let mut residual = masked_residual(x, &recon, opts.mask)?;
    let mut history = vec![objective(&residual, &z)];
    let mut converged = false;
    let mut iterations_run = 0;
    for _ in 0..opts.max_iters {
        let grad = analysis_transform(&residual, &adjoint, mode)?;
        let mut next = z.clone();
        for (zn, g) in next.data_mut().iter_mut().zip(grad.data()) {
            *zn += g / l;
        }
        shrink_in_place(next.data_mut(), &thresholds);
        let change = inf_norm_change(next.data(), z.data());
        z = next;
        iterations_run += 1;
        recon = synthesis_transform(&z, bank, mode)?;
        residual = masked_residual(x, &recon, opts.mask)?;
        history.push(objective(&residual, &z));
        if change < CODE_CHANGE_TOL {
            converged = true;
            break;
        }
    }
    Ok(IstaReport { code: z, objective_history: history, iterations_run, converged })
}
