//! The learned convolutional ISTA encoder, its linear decoder, and the
//! on-disk model format.
//!
//! Encoder recurrence, from `z_0 = 0`, repeated `unroll` times:
//!
//! ```text
//! z_{k+1} = S_θ(z_k + w_e * (M ⊙ (x - w_d * z_k)))
//! ```
//!
//! with `M ≡ 1` when no mask is given. The reconstruction is `d * z_K`.
//!
//! # File format
//!
//! ```text
//! "ACSC" | 0x01 | u32 s | u32 m | u32 c | u32 K | w_e | w_d | theta | d | u32 crc32(payload)
//! ```
//!
//! Integers are little-endian. Each payload block is the raw little-endian
//! `f64` array of the parameter in crate layout: `w_e` is `s×s×c×m`, `w_d`
//! and `d` are `s×s×m×c`, `theta` has `m` entries.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::solvers::{check_mask, check_thresholds, shrink_in_place};
use crate::tensor::{check_odd, convolve, FeatureMaps, FilterBank, Image, PaddingMode};

pub const MAGIC: &[u8; 4] = b"ACSC";
pub const FORMAT_VERSION: u8 = 1;

/// Spatial filter side, atom count, image channels and unroll depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub filter_size: usize,
    pub maps: usize,
    pub channels: usize,
    pub unroll: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { filter_size: 7, maps: 64, channels: 1, unroll: 3 }
    }
}

/// Scale applied to the flipped, transposed `w_d` to initialise `w_e`.
pub const ENCODER_INIT_SCALE: f64 = 0.1;
/// Initial value of every threshold.
pub const THRESHOLD_INIT: f64 = 0.1;
/// Default standard deviation of the shared `w_d`/`d` initialisation, as a
/// multiple of `1 / filter_size`.
pub const INIT_STD_FACTOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Encoder analysis filters, channels → maps.
    pub w_e: FilterBank,
    /// Encoder synthesis filters, maps → channels.
    pub w_d: FilterBank,
    /// One nonnegative threshold per map.
    pub theta: Vec<f64>,
    /// Decoder dictionary, maps → channels.
    pub d: FilterBank,
    pub unroll: usize,
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims { filter_size: self.d.size(), maps: self.d.in_channels(), channels: self.d.out_channels(), unroll: self.unroll }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims { filter_size: s, maps: m, channels: c, .. } = self.dims();
        check_odd(s)?;
        let ok = |b: &FilterBank, i: usize, o: usize| b.size() == s && b.in_channels() == i && b.out_channels() == o;
        if !ok(&self.w_e, c, m) || !ok(&self.w_d, m, c) || self.theta.len() != m {
            return Err(shape_err("parameter groups disagree in filter size, map count or channels"));
        }
        if self.unroll == 0 {
            return Err(Error::Parameter("unroll depth must be at least 1".into()));
        }
        if self.theta.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Invariant("thresholds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `w_d` and `d` get the same Gaussian draw (std `INIT_STD_FACTOR / s`),
/// `w_e` is `0.1` times the flipped, transposed `w_d`, every threshold is `0.1`.
pub fn init_params(seed: u64, dims: ModelDims) -> Result<ModelParams> {
    init_params_with_std(seed, dims, INIT_STD_FACTOR / dims.filter_size as f64)
}

pub fn init_params_with_std(seed: u64, dims: ModelDims, std: f64) -> Result<ModelParams> {
    let ModelDims { filter_size: s, maps: m, channels: c, unroll } = dims;
    check_odd(s)?;
    if m == 0 || c == 0 || unroll == 0 {
        return Err(Error::Parameter("maps, channels and unroll depth must all be at least 1".into()));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..s * s * m * c).map(|_| normal.sample(&mut rng)).collect();
    let w_d = FilterBank::from_vec(s, m, c, draws)?;
    let d = w_d.clone();
    let w_e = w_d.transposed().flipped().scaled(ENCODER_INIT_SCALE);
    Ok(ModelParams { w_e, w_d, theta: vec![THRESHOLD_INIT; m], d, unroll })
}

fn check_input(x: &Image, p: &ModelParams, mask: Option<&Image>) -> Result<()> {
    if x.channels() != p.d.out_channels() {
        return Err(shape_err(format!("model expects {} channels, image has {}", p.d.out_channels(), x.channels())));
    }
    if let Some(m) = mask {
        check_mask(m, x)?;
    }
    Ok(())
}

/// Run the unrolled encoder. With `trace`, every iterate `z_1..z_K` is returned.
fn run_encoder(x: &Image, p: &ModelParams, mask: Option<&Image>, mode: PaddingMode, trace: bool) -> Result<Vec<FeatureMaps>> {
    check_input(x, p, mask)?;
    let (h, w, c) = x.dims();
    let m = p.w_e.out_channels();
    let mut iterates = Vec::new();
    let mut z: Option<FeatureMaps> = None;
    for _ in 0..p.unroll {
        let mut resid = match &z {
            None => x.data().to_vec(),
            Some(zk) => {
                let recon = convolve(zk.data(), h, w, m, &p.w_d, mode);
                x.data().iter().zip(&recon).map(|(a, b)| a - b).collect()
            }
        };
        if let Some(mk) = mask {
            resid.iter_mut().zip(mk.data()).for_each(|(r, mv)| *r *= mv);
        }
        let mut pre = convolve(&resid, h, w, c, &p.w_e, mode);
        if let Some(zk) = &z {
            pre.iter_mut().zip(zk.data()).for_each(|(a, zv)| *a += zv);
        }
        shrink_in_place(&mut pre, &p.theta);
        let next = FeatureMaps::from_vec(h, w, m, pre)?;
        if trace {
            iterates.push(next.clone());
        }
        z = Some(next);
    }
    if !trace {
        iterates.extend(z);
    }
    Ok(iterates)
}

pub fn encode(x: &Image, p: &ModelParams, mask: Option<&Image>, mode: PaddingMode) -> Result<FeatureMaps> {
    check_thresholds(&p.theta)?;
    Ok(run_encoder(x, p, mask, mode, false)?.pop().expect("unroll >= 1"))
}

/// Every encoder iterate `z_1, …, z_K`.
pub fn encode_traced(x: &Image, p: &ModelParams, mask: Option<&Image>, mode: PaddingMode) -> Result<Vec<FeatureMaps>> {
    check_thresholds(&p.theta)?;
    run_encoder(x, p, mask, mode, true)
}

pub fn decode(z: &FeatureMaps, p: &ModelParams, mode: PaddingMode) -> Result<Image> {
    crate::tensor::synthesis_transform(z, &p.d, mode)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub reconstruction: Image,
    pub code: FeatureMaps,
    /// Fraction of code entries that are exactly zero.
    pub sparsity: f64,
}

pub fn forward(x: &Image, p: &ModelParams, mask: Option<&Image>, mode: PaddingMode) -> Result<ForwardOutput> {
    let code = encode(x, p, mask, mode)?;
    let reconstruction = decode(&code, p, mode)?;
    let sparsity = code.sparsity();
    Ok(ForwardOutput { reconstruction, code, sparsity })
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(p: &ModelParams) -> Result<Vec<u8>> {
    p.validate()?;
    let dims = p.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for v in [dims.filter_size, dims.maps, dims.channels, dims.unroll] {
        let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("dimension {v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let start = out.len();
    push_f64s(&mut out, p.w_e.data());
    push_f64s(&mut out, p.w_d.data());
    push_f64s(&mut out, &p.theta);
    push_f64s(&mut out, p.d.data());
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing ACSC magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let header = bytes.get(5..21).ok_or_else(|| Error::Corruption("header is truncated".into()))?;
    let field = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (s, m, c, k) = (field(0), field(1), field(2), field(3));
    if s % 2 == 0 || m == 0 || c == 0 || k == 0 {
        return Err(Error::Corruption(format!("invalid header s={s} m={m} c={c} K={k}")));
    }
    let bank_len = s
        .checked_mul(s)
        .and_then(|v| v.checked_mul(m))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Corruption("header dimensions overflow".into()))?;
    let count = bank_len
        .checked_mul(3)
        .and_then(|v| v.checked_add(m))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Corruption("header dimensions overflow".into()))?;
    let payload_end = 21usize.checked_add(count).ok_or_else(|| Error::Corruption("payload too large".into()))?;
    if bytes.len() < payload_end + 4 {
        return Err(Error::Corruption(format!("payload truncated: {} bytes present, {} expected", bytes.len(), payload_end + 4)));
    }
    if bytes.len() > payload_end + 4 {
        return Err(Error::Corruption("trailing bytes after checksum".into()));
    }
    let payload = &bytes[21..payload_end];
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Corruption("payload checksum mismatch".into()));
    }
    let mut values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let w_e = FilterBank::from_vec(s, c, m, take(bank_len))?;
    let w_d = FilterBank::from_vec(s, m, c, take(bank_len))?;
    let theta = take(m);
    let d = FilterBank::from_vec(s, m, c, take(bank_len))?;
    let params = ModelParams { w_e, w_d, theta, d, unroll: k };
    if params.theta.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::Invariant("stored thresholds contain negative entries".into()));
    }
    params.validate()?;
    Ok(params)
}

pub fn save_model(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(p)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::soft_threshold;
    use crate::tensor::{flip2d, synthesis_transform, toeplitz_from_bank};
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small_dims() -> ModelDims {
        ModelDims { filter_size: 5, maps: 4, channels: 1, unroll: 3 }
    }

    #[test]
    fn init_ties_decoder_and_encoder() {
        let p = init_params(42, ModelDims::default()).unwrap();
        assert_eq!(p.w_d.data(), p.d.data());
        assert!(p.theta.iter().all(|t| *t == 0.1));
        assert_eq!((p.w_e.in_channels(), p.w_e.out_channels()), (1, 64));
        for i in 0..64 {
            let want: Vec<f64> = flip2d(&p.w_d.filter(i, 0), 7).iter().map(|v| 0.1 * v).collect();
            assert_eq!(p.w_e.filter(0, i), want);
        }
        assert_eq!(init_params(42, ModelDims::default()).unwrap(), p);
        assert_ne!(init_params(43, ModelDims::default()).unwrap(), p);
    }

    #[test]
    fn init_rejects_even_filters() {
        let dims = ModelDims { filter_size: 6, ..ModelDims::default() };
        assert!(matches!(init_params(1, dims), Err(Error::InvalidFilter(_))));
    }

    #[test]
    fn single_step_is_thresholded_analysis() {
        let x = random_image(1, 9, 8);
        let p = init_params(2, ModelDims { unroll: 1, ..small_dims() }).unwrap();
        let z = encode(&x, &p, None, PaddingMode::Zero).unwrap();
        let pre = convolve(x.data(), 9, 8, 1, &p.w_e, PaddingMode::Zero);
        let pre = FeatureMaps::from_vec(9, 8, 4, pre).unwrap();
        assert_eq!(z, soft_threshold(&pre, &p.theta).unwrap());
    }

    #[test]
    fn huge_thresholds_kill_the_code() {
        let x = random_image(3, 8, 8);
        let mut p = init_params(4, small_dims()).unwrap();
        p.theta = vec![1e6; 4];
        let out = forward(&x, &p, None, PaddingMode::Zero).unwrap();
        assert!(out.code.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.sparsity, 1.0);
    }

    #[test]
    fn ones_mask_matches_unmasked() {
        let x = random_image(5, 10, 7);
        let p = init_params(6, small_dims()).unwrap();
        let ones = Image::filled(10, 7, 1, 1.0);
        let a = encode(&x, &p, None, PaddingMode::Zero).unwrap();
        let b = encode(&x, &p, Some(&ones), PaddingMode::Zero).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_mask_rejected() {
        let x = random_image(5, 10, 7);
        let p = init_params(6, small_dims()).unwrap();
        let mask = Image::filled(10, 6, 1, 1.0);
        assert!(matches!(encode(&x, &p, Some(&mask), PaddingMode::Zero), Err(Error::Shape(_))));
        let color = Image::zeros(10, 7, 3);
        assert!(matches!(encode(&color, &p, None, PaddingMode::Zero), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_basics() {
        let p = init_params(7, small_dims()).unwrap();
        let zero = decode(&FeatureMaps::zeros(6, 6, 4), &p, PaddingMode::Zero).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        let mut q = init_params(7, ModelDims { maps: 1, ..small_dims() }).unwrap();
        q.d = FilterBank::identity(5, 1).unwrap();
        let z = FeatureMaps::from_vec(6, 6, 1, random_image(8, 6, 6).into_vec()).unwrap();
        assert_eq!(decode(&z, &q, PaddingMode::Zero).unwrap().data(), z.data());
    }

    #[test]
    fn decode_matches_toeplitz() {
        let p = init_params(9, small_dims()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = FeatureMaps::from_vec(7, 6, 4, (0..168).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let dict = toeplitz_from_bank(&p.d, 7, 6, PaddingMode::Zero).unwrap();
        let want = dict.apply(&z.to_map_major());
        let got = decode(&z, &p, PaddingMode::Zero).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn decode_is_linear() {
        let p = init_params(11, small_dims()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rz = || FeatureMaps::from_vec(5, 5, 4, (0..100).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (z1, z2) = (rz(), rz());
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = z1.data().iter().zip(z2.data()).map(|(u, v)| a * u + b * v).collect();
        let lhs = decode(&FeatureMaps::from_vec(5, 5, 4, mix).unwrap(), &p, PaddingMode::Zero).unwrap();
        let d1 = decode(&z1, &p, PaddingMode::Zero).unwrap();
        let d2 = decode(&z2, &p, PaddingMode::Zero).unwrap();
        for k in 0..25 {
            assert!((lhs.data()[k] - (a * d1.data()[k] + b * d2.data()[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_on_zero_and_random() {
        let p = init_params(13, ModelDims::default()).unwrap();
        let out = forward(&Image::zeros(16, 16, 1), &p, None, PaddingMode::Zero).unwrap();
        assert!(out.reconstruction.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.sparsity, 1.0);

        let out = forward(&random_image(14, 24, 24), &p, None, PaddingMode::Zero).unwrap();
        assert!(out.reconstruction.data().iter().all(|v| v.is_finite()));
        assert!(out.sparsity > 0.0);
    }

    #[test]
    fn unregularized_encoder_reproduces_ista_iterates() {
        let x = random_image(15, 8, 8);
        let mut p = init_params(16, ModelDims { unroll: 20, ..small_dims() }).unwrap();
        p.theta = vec![0.0; 4];
        let l = crate::solvers::lipschitz_upper_bound(&p.w_d, 8, 8, 2000, 1e-10, PaddingMode::Zero).unwrap().value;
        p.w_e = p.w_d.transposed().flipped().scaled(1.0 / l);
        let trace = encode_traced(&x, &p, None, PaddingMode::Zero).unwrap();
        // plain Landweber iteration z + (1/L) d ⋆ (x - d * z)
        let adjoint = p.w_d.transposed();
        let mut z = FeatureMaps::zeros(8, 8, 4);
        for zk in &trace {
            let recon = synthesis_transform(&z, &p.w_d, PaddingMode::Zero).unwrap();
            let r: Vec<f64> = x.data().iter().zip(recon.data()).map(|(a, b)| a - b).collect();
            let r = Image::from_vec(8, 8, 1, r).unwrap();
            let g = crate::tensor::analysis_transform(&r, &adjoint, PaddingMode::Zero).unwrap();
            let next: Vec<f64> = z.data().iter().zip(g.data()).map(|(a, b)| a + b / l).collect();
            z = FeatureMaps::from_vec(8, 8, 4, next).unwrap();
            for (a, b) in zk.data().iter().zip(z.data()) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn circular_forward_is_shift_equivariant() {
        let x = random_image(17, 16, 12);
        let p = init_params(18, small_dims()).unwrap();
        let base = forward(&x, &p, None, PaddingMode::Circular).unwrap();
        let moved = forward(&x.shifted(5, 7), &p, None, PaddingMode::Circular).unwrap();
        assert_eq!(moved.code, base.code.shifted(5, 7));
        assert_eq!(moved.reconstruction, base.reconstruction.shifted(5, 7));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init_params(19, small_dims()).unwrap();
        p.theta[2] = 0.037_f64.sqrt();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.acsc");
        save_model(&p, &path).unwrap();
        let q = load_model(&path).unwrap();
        let bits = |b: &FilterBank| b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.w_e), bits(&q.w_e));
        assert_eq!(bits(&p.w_d), bits(&q.w_d));
        assert_eq!(bits(&p.d), bits(&q.d));
        assert_eq!(p.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(p.unroll, q.unroll);
    }

    #[test]
    fn header_layout() {
        let p = init_params(20, small_dims()).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert_eq!(&bytes[..5], b"ACSC\x01");
        assert_eq!(&bytes[5..21], &[5, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 21 + 8 * (3 * 25 * 4 + 4) + 4);
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), p.w_e.data()[0]);
    }

    #[test]
    fn bad_files_are_rejected() {
        let p = init_params(21, ModelDims::default()).unwrap();
        let bytes = to_bytes(&p).unwrap();

        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&magic), Err(Error::Format(_))));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(from_bytes(&version), Err(Error::Format(_))));

        assert!(matches!(from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Corruption(_))));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Corruption(_))));

        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(from_bytes(&flipped), Err(Error::Corruption(_))));
    }

    #[test]
    fn negative_threshold_on_load_is_invariant_error() {
        let mut p = init_params(22, small_dims()).unwrap();
        p.theta[1] = -0.5;
        // bypass validation to forge the file
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ACSC\x01");
        for v in [5u32, 4, 1, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let start = bytes.len();
        for block in [p.w_e.data(), p.w_d.data(), &p.theta, p.d.data()] {
            push_f64s(&mut bytes, block);
        }
        let crc = crc32fast::hash(&bytes[start..]);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Invariant(_))));
    }
}
