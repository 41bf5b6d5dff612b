//! Image, feature-map and filter containers plus the same-size 2-D
//! correlation kernels every other module is assembled from.
//!
//! Layout is row-major and channel-minor everywhere: pixel `(y, x)` of
//! channel `ch` lives at `(y * width + x) * channels + ch`. A filter bank
//! with spatial side `s` stores tap `(u, v)` of the filter from input
//! channel `i` to output channel `j` at `((u * s + v) * in + i) * out + j`.
//!
//! Convolution (`*`) is realised as correlation against a flipped bank, so
//! the analysis/synthesis pair shares one set of loops.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::solvers::DenseDictionary;

/// Out-of-range handling for same-size correlation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    #[default]
    Zero,
    Circular,
}

impl std::str::FromStr for PaddingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "circular" => Ok(PaddingMode::Circular),
            other => Err(format!("unknown padding mode '{other}' (expected zero|circular)")),
        }
    }
}

/// An `height × width × channels` grid of intensities, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric { group: "image".into(), detail: format!("entry {bad} is {}", data[bad]) });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + ch] = value;
    }

    /// Rectangular crop starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err(format!("crop {height}x{width}@({top},{left}) exceeds {}x{}", self.height, self.width)));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image { height, width, channels: c, data })
    }

    /// Circular shift so that output `(y, x)` reads input `(y - dy, x - dx)`.
    pub fn shifted(&self, dy: isize, dx: isize) -> Image {
        Image { data: circular_shift(&self.data, self.height, self.width, self.channels, dy, dx), ..*self }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }
}

/// Sparse code: one `height × width` plane per dictionary atom.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    height: usize,
    width: usize,
    maps: usize,
    data: Vec<f64>,
}

impl FeatureMaps {
    pub fn zeros(height: usize, width: usize, maps: usize) -> Self {
        Self { height, width, maps, data: vec![0.0; height * width * maps] }
    }

    pub fn from_vec(height: usize, width: usize, maps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * maps {
            return Err(shape_err(format!(
                "feature maps {height}x{width}x{maps} need {} values, got {}",
                height * width * maps,
                data.len()
            )));
        }
        Ok(Self { height, width, maps, data })
    }

    /// Build from a map-major vector: entry `i * height * width + p` is pixel
    /// `p` of map `i`. This is the column order of [`toeplitz_from_bank`].
    pub fn from_map_major(height: usize, width: usize, maps: usize, v: &[f64]) -> Result<Self> {
        let hw = height * width;
        if v.len() != hw * maps {
            return Err(shape_err(format!("map-major vector has {} entries, expected {}", v.len(), hw * maps)));
        }
        let mut data = vec![0.0; hw * maps];
        for i in 0..maps {
            for p in 0..hw {
                data[p * maps + i] = v[i * hw + p];
            }
        }
        Ok(Self { height, width, maps, data })
    }

    pub fn to_map_major(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut v = vec![0.0; hw * self.maps];
        for p in 0..hw {
            for i in 0..self.maps {
                v[i * hw + p] = self.data[p * self.maps + i];
            }
        }
        v
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, map: usize) -> f64 {
        self.data[(y * self.width + x) * self.maps + map]
    }

    pub fn shifted(&self, dy: isize, dx: isize) -> FeatureMaps {
        FeatureMaps { data: circular_shift(&self.data, self.height, self.width, self.maps, dy, dx), ..*self }
    }

    /// Fraction of entries that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        if self.data.is_empty() {
            return 1.0;
        }
        self.data.iter().filter(|v| **v == 0.0).count() as f64 / self.data.len() as f64
    }
}

/// `size × size × in_channels × out_channels` filters.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    size: usize,
    in_channels: usize,
    out_channels: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn zeros(size: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::from_vec(size, in_channels, out_channels, vec![0.0; size * size * in_channels * out_channels])
    }

    pub fn from_vec(size: usize, in_channels: usize, out_channels: usize, data: Vec<f64>) -> Result<Self> {
        check_odd(size)?;
        if data.len() != size * size * in_channels * out_channels {
            return Err(shape_err(format!(
                "filter bank {size}x{size}x{in_channels}x{out_channels} needs {} values, got {}",
                size * size * in_channels * out_channels,
                data.len()
            )));
        }
        Ok(Self { size, in_channels, out_channels, data })
    }

    /// Bank whose every filter is the `size × size` delta (1 at the centre).
    pub fn identity(size: usize, channels: usize) -> Result<Self> {
        let mut bank = Self::zeros(size, channels, channels)?;
        let c = size / 2;
        for i in 0..channels {
            bank.set(c, c, i, i, 1.0);
        }
        Ok(bank)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn index(&self, u: usize, v: usize, i: usize, j: usize) -> usize {
        ((u * self.size + v) * self.in_channels + i) * self.out_channels + j
    }

    pub fn get(&self, u: usize, v: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(u, v, i, j)]
    }

    pub fn set(&mut self, u: usize, v: usize, i: usize, j: usize, value: f64) {
        let k = self.index(u, v, i, j);
        self.data[k] = value;
    }

    /// The `size × size` filter from input channel `i` to output channel `j`, row-major.
    pub fn filter(&self, i: usize, j: usize) -> Vec<f64> {
        let s = self.size;
        (0..s * s).map(|t| self.get(t / s, t % s, i, j)).collect()
    }

    pub fn set_filter(&mut self, i: usize, j: usize, taps: &[f64]) -> Result<()> {
        let s = self.size;
        if taps.len() != s * s {
            return Err(shape_err(format!("filter needs {} taps, got {}", s * s, taps.len())));
        }
        for (t, &val) in taps.iter().enumerate() {
            self.set(t / s, t % s, i, j, val);
        }
        Ok(())
    }

    /// Every filter rotated by 180 degrees.
    pub fn flipped(&self) -> FilterBank {
        FilterBank { data: flip_bank_data(&self.data, self.size, self.in_channels, self.out_channels), ..*self }
    }

    /// Swap the input and output channel axes.
    pub fn transposed(&self) -> FilterBank {
        let mut out = FilterBank {
            size: self.size,
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            data: vec![0.0; self.data.len()],
        };
        for u in 0..self.size {
            for v in 0..self.size {
                for i in 0..self.in_channels {
                    for j in 0..self.out_channels {
                        out.set(u, v, j, i, self.get(u, v, i, j));
                    }
                }
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> FilterBank {
        FilterBank { data: self.data.iter().map(|v| v * factor).collect(), ..*self }
    }
}

pub(crate) fn check_odd(size: usize) -> Result<()> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidFilter(format!("filter size {size} must be odd")));
    }
    Ok(())
}

/// `out(u, v) = k(s-1-u, s-1-v)` for a row-major `s × s` kernel.
pub fn flip2d(kernel: &[f64], size: usize) -> Vec<f64> {
    let mut out = kernel.to_vec();
    out.reverse();
    debug_assert_eq!(out.len(), size * size);
    out
}

pub(crate) fn flip_bank_data(data: &[f64], size: usize, cin: usize, cout: usize) -> Vec<f64> {
    let block = cin * cout;
    let taps = size * size;
    let mut out = vec![0.0; data.len()];
    for t in 0..taps {
        let src = taps - 1 - t;
        out[t * block..(t + 1) * block].copy_from_slice(&data[src * block..(src + 1) * block]);
    }
    out
}

fn circular_shift(data: &[f64], h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let dst = (y * w + x) * c;
            let src = (sy * w + sx) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}

/// Same-size correlation of a single-channel image with one `s × s` kernel:
/// `out(y, x) = Σ x(y + u - s/2, x + v - s/2) · k(u, v)`.
pub fn correlate2d_same(x: &Image, kernel: &[f64], size: usize, mode: PaddingMode) -> Result<Image> {
    check_odd(size)?;
    if x.channels() != 1 {
        return Err(shape_err(format!("correlate2d_same takes one plane, got {} channels", x.channels())));
    }
    if kernel.len() != size * size {
        return Err(shape_err(format!("kernel has {} taps, expected {}", kernel.len(), size * size)));
    }
    let data = correlate_forward(x.data(), x.height(), x.width(), 1, kernel, size, 1, mode);
    Image::from_vec(x.height(), x.width(), 1, data)
}

/// `d ⋆ x`: map `i` is `Σ_ch flip2d(bank[ch → i]) * x_ch`, i.e. the
/// correlation of every channel with its filter. For a dictionary `d`
/// (maps → channels) pass `d.transposed()`; the result is then the adjoint
/// of [`synthesis_transform`] under zero padding.
pub fn analysis_transform(x: &Image, bank: &FilterBank, mode: PaddingMode) -> Result<FeatureMaps> {
    if bank.in_channels() != x.channels() {
        return Err(shape_err(format!("analysis bank expects {} channels, image has {}", bank.in_channels(), x.channels())));
    }
    let data = correlate_forward(x.data(), x.height(), x.width(), x.channels(), bank.data(), bank.size(), bank.out_channels(), mode);
    FeatureMaps::from_vec(x.height(), x.width(), bank.out_channels(), data)
}

/// `d * z = Σ_i d_i * z_i` (true convolution), one output plane per bank output channel.
pub fn synthesis_transform(z: &FeatureMaps, bank: &FilterBank, mode: PaddingMode) -> Result<Image> {
    if bank.in_channels() != z.maps() {
        return Err(shape_err(format!("synthesis bank expects {} maps, code has {}", bank.in_channels(), z.maps())));
    }
    let data = convolve(z.data(), z.height(), z.width(), z.maps(), bank, mode);
    Image::from_vec(z.height(), z.width(), bank.out_channels(), data)
}

/// True same-size convolution of an `h × w × bank.in` stack.
pub(crate) fn convolve(input: &[f64], h: usize, w: usize, cin: usize, bank: &FilterBank, mode: PaddingMode) -> Vec<f64> {
    debug_assert_eq!(cin, bank.in_channels());
    let flipped = flip_bank_data(bank.data(), bank.size(), bank.in_channels(), bank.out_channels());
    correlate_forward(input, h, w, cin, &flipped, bank.size(), bank.out_channels(), mode)
}

/// Default entry cap for [`toeplitz_from_bank`].
pub const TOEPLITZ_ENTRY_CAP: usize = 1 << 20;

/// Materialize the synthesis operator of `bank` (maps → channels) on an
/// `height × width` grid. Column `i * height * width + p` is the image made
/// by a unit impulse at pixel `p` of map `i`; rows follow [`Image`] layout.
pub fn toeplitz_from_bank(bank: &FilterBank, height: usize, width: usize, mode: PaddingMode) -> Result<DenseDictionary> {
    toeplitz_from_bank_capped(bank, height, width, mode, TOEPLITZ_ENTRY_CAP)
}

pub fn toeplitz_from_bank_capped(bank: &FilterBank, height: usize, width: usize, mode: PaddingMode, cap: usize) -> Result<DenseDictionary> {
    let hw = height * width;
    let m = bank.in_channels();
    let c = bank.out_channels();
    let rows = hw * c;
    let cols = hw * m;
    let entries = rows.saturating_mul(cols);
    if entries > cap {
        return Err(Error::Resource(format!("{rows}x{cols} dictionary exceeds the {cap}-entry cap")));
    }
    let s = bank.size() as isize;
    let r = s / 2;
    let mut dict = DenseDictionary::zeros(rows, cols);
    for i in 0..m {
        for p in 0..hw {
            let (py, px) = ((p / width) as isize, (p % width) as isize);
            let col = i * hw + p;
            // impulse at p contributes d(t) to output pixel p + t - r
            for tu in 0..s {
                for tv in 0..s {
                    let (mut qy, mut qx) = (py + tu - r, px + tv - r);
                    match mode {
                        PaddingMode::Zero => {
                            if qy < 0 || qx < 0 || qy >= height as isize || qx >= width as isize {
                                continue;
                            }
                        }
                        PaddingMode::Circular => {
                            qy = qy.rem_euclid(height as isize);
                            qx = qx.rem_euclid(width as isize);
                        }
                    }
                    let q = qy as usize * width + qx as usize;
                    for j in 0..c {
                        let row = q * c + j;
                        let val = dict.get(row, col) + bank.get(tu as usize, tv as usize, i, j);
                        dict.set(row, col, val);
                    }
                }
            }
        }
    }
    Ok(dict)
}

// ---------------------------------------------------------------------------
// Raw kernels. Each is a matrix product between an unfolded (im2col) operand
// and the bank, done band by band over image rows. Which side gets unfolded
// depends on whether the input or the output carries fewer channels.
// Unfolded matrices are stored column-major (one column per tap and
// channel), so that every copy below is a contiguous run along a row.

/// Scratch budget, in doubles, for one band's unfolded matrix. Unit tests
/// use a tiny budget so that multi-band paths are exercised.
const BAND_CAP: usize = if cfg!(test) { 1 << 9 } else { 1 << 20 };

fn band_rows(h: usize, w: usize, cols: usize) -> usize {
    (BAND_CAP / (w * cols).max(1)).clamp(1, h.max(1))
}

fn map_coord(p: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    match mode {
        PaddingMode::Zero => (p >= 0 && p < n as isize).then_some(p as usize),
        PaddingMode::Circular => Some(p.rem_euclid(n as isize) as usize),
    }
}

/// Contiguous run of columns `[x0, x1)` whose source column starts at `sx0`.
#[derive(Clone, Copy)]
struct Segment {
    x0: usize,
    x1: usize,
    sx0: usize,
}

/// Column runs for `sx = x + off`.
fn segments(w: usize, off: isize, mode: PaddingMode) -> ([Segment; 2], usize) {
    let empty = Segment { x0: 0, x1: 0, sx0: 0 };
    match mode {
        PaddingMode::Zero => {
            let x0 = (-off).max(0) as usize;
            let x1 = (w as isize - off).clamp(0, w as isize) as usize;
            if x0 >= x1 {
                ([empty, empty], 0)
            } else {
                ([Segment { x0, x1, sx0: (x0 as isize + off) as usize }, empty], 1)
            }
        }
        PaddingMode::Circular => {
            let start = off.rem_euclid(w as isize) as usize;
            let split = w - start;
            let first = Segment { x0: 0, x1: split, sx0: start };
            if start == 0 {
                ([first, empty], 1)
            } else {
                ([first, Segment { x0: split, x1: w, sx0: 0 }], 2)
            }
        }
    }
}

/// Strided matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View {
    rs: usize,
    cs: usize,
}

const ROW_MAJOR: fn(usize) -> View = |n| View { rs: n, cs: 1 };
const COL_MAJOR: fn(usize) -> View = |m| View { rs: 1, cs: m };

/// `c += a · b` with `a: m × k`, `b: k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], va: View, b: &[f64], vb: View, c: &mut [f64], vc: View) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * va.rs + (k - 1) * va.cs < a.len());
    assert!((k - 1) * vb.rs + (n - 1) * vb.cs < b.len());
    assert!((m - 1) * vc.rs + (n - 1) * vc.cs < c.len());
    // SAFETY: the asserts above keep every index the routine touches in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            1.0,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Rows `[y0, y1)` unfolded column-major: entry `((y - y0) w + x, t c + i)`
/// holds `src(y + σ(u - r), x + σ(v - r), i)` for tap `t = u s + v`.
#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f64], h: usize, w: usize, c: usize, s: usize, mode: PaddingMode, sign: isize, y0: usize, y1: usize) -> Vec<f64> {
    let r = (s / 2) as isize;
    let npix = (y1 - y0) * w;
    let mut a = vec![0.0; npix * s * s * c];
    for y in y0..y1 {
        let base = (y - y0) * w;
        for u in 0..s {
            let Some(sy) = map_coord(y as isize + sign * (u as isize - r), h, mode) else { continue };
            let src_row = &src[sy * w * c..(sy + 1) * w * c];
            for v in 0..s {
                let t = u * s + v;
                let (segs, n) = segments(w, sign * (v as isize - r), mode);
                for seg in &segs[..n] {
                    let len = seg.x1 - seg.x0;
                    for i in 0..c {
                        let col = &mut a[(t * c + i) * npix + base + seg.x0..][..len];
                        if c == 1 {
                            col.copy_from_slice(&src_row[seg.sx0..seg.sx0 + len]);
                        } else {
                            for (k, dst) in col.iter_mut().enumerate() {
                                *dst = src_row[(seg.sx0 + k) * c + i];
                            }
                        }
                    }
                }
            }
        }
    }
    a
}

/// Product of source rows `y0 - r .. y1 + r` with the `c × cols` matrix `b`,
/// stored column-major with `(y1 - y0 + 2r) w` rows. Rows that fall outside
/// the image under zero padding stay zero.
#[allow(clippy::too_many_arguments)]
fn rows_times(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    b: &[f64],
    vb: View,
    cols: usize,
    r: usize,
    y0: usize,
    y1: usize,
    mode: PaddingMode,
) -> Vec<f64> {
    let ext = y1 - y0 + 2 * r;
    let rows = ext * w;
    let mut out = vec![0.0; rows * cols];
    let source = |e: usize| map_coord(y0 as isize - r as isize + e as isize, h, mode);
    let mut e = 0;
    while e < ext {
        let Some(sy) = source(e) else {
            e += 1;
            continue;
        };
        let mut run = 1;
        while e + run < ext && source(e + run) == Some(sy + run) {
            run += 1;
        }
        gemm_acc(run * w, c, cols, &src[sy * w * c..], ROW_MAJOR(c), b, vb, &mut out[e * w..], COL_MAJOR(rows));
        e += run;
    }
    out
}

/// `out((y - y0) w + x, j) += Σ_t y_ext(row, x + σ(v - r), (t, j))`, where
/// `row` is the extended-band row holding `y + σ(u - r)`.
#[allow(clippy::too_many_arguments)]
fn shift_add(
    y_ext: &[f64],
    out: &mut [f64],
    w: usize,
    h: usize,
    cout: usize,
    s: usize,
    y0: usize,
    y1: usize,
    sign: isize,
    mode: PaddingMode,
) {
    let r = (s / 2) as isize;
    let rows = (y1 - y0 + 2 * (s / 2)) * w;
    for y in y0..y1 {
        let out_row = &mut out[(y - y0) * w * cout..(y - y0 + 1) * w * cout];
        for u in 0..s {
            let src_y = y as isize + sign * (u as isize - r);
            if map_coord(src_y, h, mode).is_none() {
                continue;
            }
            let e = (src_y - (y0 as isize - r)) as usize;
            for v in 0..s {
                let t = u * s + v;
                let (segs, n) = segments(w, sign * (v as isize - r), mode);
                for seg in &segs[..n] {
                    let len = seg.x1 - seg.x0;
                    for j in 0..cout {
                        let col = &y_ext[(t * cout + j) * rows + e * w + seg.sx0..][..len];
                        if cout == 1 {
                            out_row[seg.x0..seg.x1].iter_mut().zip(col).for_each(|(o, v)| *o += v);
                        } else {
                            for (k, v) in col.iter().enumerate() {
                                out_row[(seg.x0 + k) * cout + j] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out(p, j) = Σ_{u,v,i} k[u,v,i,j] · input(p + (u - r, v - r), i)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    s: usize,
    cout: usize,
    mode: PaddingMode,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), h * w * cin);
    debug_assert_eq!(kernel.len(), s * s * cin * cout);
    let mut out = vec![0.0; h * w * cout];
    if h == 0 || w == 0 || cout == 0 {
        return out;
    }
    let taps = s * s;
    if cin <= cout {
        let band = band_rows(h, w, taps * cin);
        out.par_chunks_mut(band * w * cout).enumerate().for_each(|(b, o)| {
            let (y0, y1) = (b * band, ((b + 1) * band).min(h));
            let npix = (y1 - y0) * w;
            let a = im2col(input, h, w, cin, s, mode, 1, y0, y1);
            gemm_acc(npix, taps * cin, cout, &a, COL_MAJOR(npix), kernel, ROW_MAJOR(cout), o, ROW_MAJOR(cout));
        });
    } else {
        // the bank as a cin × (t, j) matrix
        let mut kp = vec![0.0; kernel.len()];
        for t in 0..taps {
            for i in 0..cin {
                for j in 0..cout {
                    kp[i * taps * cout + t * cout + j] = kernel[(t * cin + i) * cout + j];
                }
            }
        }
        let band = band_rows(h, w, taps * cout);
        out.par_chunks_mut(band * w * cout).enumerate().for_each(|(b, o)| {
            let (y0, y1) = (b * band, ((b + 1) * band).min(h));
            let y_ext = rows_times(input, h, w, cin, &kp, ROW_MAJOR(taps * cout), taps * cout, s / 2, y0, y1, mode);
            shift_add(&y_ext, o, w, h, cout, s, y0, y1, 1, mode);
        });
    }
    out
}

/// Adjoint of [`correlate_forward`] in its input:
/// `g_in(q, i) = Σ_{u,v,j} k[u,v,i,j] · g_out(q - (u - r, v - r), j)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_adjoint(
    grad_out: &[f64],
    h: usize,
    w: usize,
    cout: usize,
    kernel: &[f64],
    s: usize,
    cin: usize,
    mode: PaddingMode,
) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), h * w * cout);
    let mut grad_in = vec![0.0; h * w * cin];
    if h == 0 || w == 0 || cin == 0 {
        return grad_in;
    }
    let taps = s * s;
    if cout <= cin {
        // rows (t, j), columns i
        let mut ka = vec![0.0; kernel.len()];
        for t in 0..taps {
            for i in 0..cin {
                for j in 0..cout {
                    ka[(t * cout + j) * cin + i] = kernel[(t * cin + i) * cout + j];
                }
            }
        }
        let band = band_rows(h, w, taps * cout);
        grad_in.par_chunks_mut(band * w * cin).enumerate().for_each(|(b, g)| {
            let (y0, y1) = (b * band, ((b + 1) * band).min(h));
            let npix = (y1 - y0) * w;
            let a = im2col(grad_out, h, w, cout, s, mode, -1, y0, y1);
            gemm_acc(npix, taps * cout, cin, &a, COL_MAJOR(npix), &ka, ROW_MAJOR(cin), g, ROW_MAJOR(cin));
        });
    } else {
        // the bank read as a cout × (t, i) matrix is its transpose
        let band = band_rows(h, w, taps * cin);
        grad_in.par_chunks_mut(band * w * cin).enumerate().for_each(|(b, g)| {
            let (y0, y1) = (b * band, ((b + 1) * band).min(h));
            let y_ext = rows_times(grad_out, h, w, cout, kernel, COL_MAJOR(cout), taps * cin, s / 2, y0, y1, mode);
            shift_add(&y_ext, g, w, h, cin, s, y0, y1, -1, mode);
        });
    }
    grad_in
}

/// Gradient of `Σ g_out · correlate_forward(input, k)` with respect to `k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_kernel_grad(
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    s: usize,
    mode: PaddingMode,
) -> Vec<f64> {
    let taps = s * s;
    let len = taps * cin * cout;
    if h == 0 || w == 0 || len == 0 {
        return vec![0.0; len];
    }
    let small_in = cin <= cout;
    let band = band_rows(h, w, taps * cin.min(cout));
    let bands = h.div_ceil(band);
    let partials: Vec<Vec<f64>> = (0..bands)
        .into_par_iter()
        .map(|b| {
            let (y0, y1) = (b * band, ((b + 1) * band).min(h));
            let npix = (y1 - y0) * w;
            let mut acc = vec![0.0; len];
            if small_in {
                let a = im2col(input, h, w, cin, s, mode, 1, y0, y1);
                let g = &grad_out[y0 * w * cout..y1 * w * cout];
                gemm_acc(taps * cin, npix, cout, &a, ROW_MAJOR(npix), g, ROW_MAJOR(cout), &mut acc, ROW_MAJOR(cout));
            } else {
                // (i, (t, j)) layout; permuted into the bank order below
                let bm = im2col(grad_out, h, w, cout, s, mode, -1, y0, y1);
                let x = &input[y0 * w * cin..y1 * w * cin];
                gemm_acc(cin, npix, taps * cout, x, COL_MAJOR(cin), &bm, COL_MAJOR(npix), &mut acc, ROW_MAJOR(taps * cout));
            }
            acc
        })
        .collect();
    let mut total = partials[0].clone();
    for p in &partials[1..] {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    if small_in {
        return total;
    }
    let mut grad = vec![0.0; len];
    for i in 0..cin {
        for t in 0..taps {
            for j in 0..cout {
                grad[(t * cin + i) * cout + j] = total[i * taps * cout + t * cout + j];
            }
        }
    }
    grad
}
