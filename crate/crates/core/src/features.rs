//! Feature pyramid `P2..P5`, RoIAlign and per-scale 256-D descriptors.
//!
//! The backbone is a fixed pseudo-backbone: every `stride × stride` cell is
//! summarized by a 10-D statistic (mean, standard deviation and an 8-bin
//! magnitude-weighted gradient-orientation histogram) which is lifted to 256
//! channels by a seeded random projection followed by an absolute value.
//! Anything implementing [`Backbone`] can replace it.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::anchors::RotatedBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::XorShift64Star;

pub const LEVELS: usize = 4;
pub const CHANNELS: usize = 256;
pub const STRIDES: [usize; LEVELS] = [4, 8, 16, 32];
/// Total length of a [`MultiScaleFeature`].
pub const FEATURE_LEN: usize = LEVELS * CHANNELS;

const RAW_DIM: usize = 10;
const ORIENTATION_BINS: usize = 8;

/// RoIAlign output resolution used for region pooling.
pub const POOL_SIZE: usize = 7;
/// RoIAlign samples per bin side used for region pooling.
pub const POOL_SAMPLES: usize = 2;

/// One pyramid level: a `grid × grid` array of 256-channel cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    stride: usize,
    grid: usize,
    /// Row-major cells (`y` then `x`), channels contiguous.
    data: Vec<f64>,
    /// Channel mean of every cell, same layout with one value per cell.
    channel_means: Vec<f64>,
}

impl FeatureLevel {
    pub fn new(stride: usize, grid: usize, data: Vec<f64>) -> Result<Self> {
        if stride == 0 || grid == 0 {
            return Err(Error::InvalidInput("level stride and grid must be non-zero".into()));
        }
        if data.len() != grid * grid * CHANNELS {
            return Err(Error::InvalidInput(format!(
                "level data has {} values, expected {}",
                data.len(),
                grid * grid * CHANNELS
            )));
        }
        if data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("activations must be finite and non-negative".into()));
        }
        let channel_means = data
            .chunks_exact(CHANNELS)
            .map(|c| c.iter().sum::<f64>() / CHANNELS as f64)
            .collect();
        Ok(Self {
            stride,
            grid,
            data,
            channel_means,
        })
    }

    /// Builds a level from `f(x, y, channel)`.
    pub fn from_fn(stride: usize, grid: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(grid * grid * CHANNELS);
        for y in 0..grid {
            for x in 0..grid {
                for c in 0..CHANNELS {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(stride, grid, data)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.grid + x) * CHANNELS;
        &self.data[start..start + CHANNELS]
    }

    pub fn channel_means(&self) -> &[f64] {
        &self.channel_means
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::InvalidInput(format!("pyramid needs {LEVELS} levels, got {}", levels.len())));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &FeatureLevel {
        &self.levels[i]
    }
}

/// Produces a feature pyramid from an image.
pub trait Backbone: Send + Sync {
    fn build_pyramid(&self, img: &GrayImage) -> Result<FeaturePyramid>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoBackbone {
    pub seed: u64,
}

impl Backbone for PseudoBackbone {
    fn build_pyramid(&self, img: &GrayImage) -> Result<FeaturePyramid> {
        build_pyramid(img, self.seed)
    }
}

/// The `256 × 10` row-major projection for `level_index`, entries `(2u - 1) / √10`.
pub fn projection_matrix(seed: u64, level_index: usize) -> Vec<f64> {
    let mut rng = XorShift64Star::for_stream(seed, level_index as u64);
    let scale = 1.0 / (RAW_DIM as f64).sqrt();
    (0..CHANNELS * RAW_DIM).map(|_| (2.0 * rng.next_f64() - 1.0) * scale).collect()
}

struct Gradients {
    magnitude: Vec<f64>,
    bin: Vec<u8>,
}

fn gradients(img: &GrayImage) -> Gradients {
    let (w, h) = (img.width(), img.height());
    let mut magnitude = vec![0.0; w * h];
    let mut bin = vec![0u8; w * h];
    let bin_width = PI / ORIENTATION_BINS as f64;
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (left, right) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = (img.get(right, y) - img.get(left, y)) / 2.0;
            let gy = (img.get(x, down) - img.get(x, up)) / 2.0;
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += PI;
            }
            if angle >= PI {
                angle -= PI;
            }
            let i = y * w + x;
            magnitude[i] = gx.hypot(gy);
            bin[i] = ((angle / bin_width) as usize).min(ORIENTATION_BINS - 1) as u8;
        }
    }
    Gradients { magnitude, bin }
}

fn raw_cell_descriptor(img: &GrayImage, grads: &Gradients, x0: usize, y0: usize, s: usize) -> [f64; RAW_DIM] {
    let w = img.width();
    let n = (s * s) as f64;
    let mut sum = 0.0;
    let mut hist = [0.0; ORIENTATION_BINS];
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            sum += img.get(x, y);
            let i = y * w + x;
            hist[grads.bin[i] as usize] += grads.magnitude[i];
        }
    }
    let mean = sum / n;
    let mut var = 0.0;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let d = img.get(x, y) - mean;
            var += d * d;
        }
    }
    let mut raw = [0.0; RAW_DIM];
    raw[0] = mean;
    raw[1] = (var / n).sqrt();
    for (r, hv) in raw[2..].iter_mut().zip(hist) {
        *r = hv / n;
    }
    raw
}

/// Deterministic pseudo-backbone pyramid for a square image whose side is a multiple of 32.
pub fn build_pyramid(img: &GrayImage, seed: u64) -> Result<FeaturePyramid> {
    let size = img.width();
    if img.height() != size {
        return Err(Error::InvalidInput(format!(
            "image must be square, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::InvalidInput(format!("image side {size} is not a positive multiple of 32")));
    }
    let grads = gradients(img);
    let levels = STRIDES
        .par_iter()
        .enumerate()
        .map(|(level_index, &stride)| {
            let matrix = projection_matrix(seed, level_index);
            let grid = size / stride;
            let mut data = Vec::with_capacity(grid * grid * CHANNELS);
            for cy in 0..grid {
                for cx in 0..grid {
                    let raw = raw_cell_descriptor(img, &grads, cx * stride, cy * stride, stride);
                    data.extend(matrix.chunks_exact(RAW_DIM).map(|row| {
                        row.iter().zip(&raw).map(|(m, r)| m * r).sum::<f64>().abs()
                    }));
                }
            }
            FeatureLevel::new(stride, grid, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FeaturePyramid::new(levels)
}

/// Bilinear sample of a `grid × grid × channels` array at pixel position
/// `(x, y)`, accumulated into `acc` with `weight`. Cells outside the grid read as 0.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_bilinear(values: &[f64], grid: usize, channels: usize, stride: f64, x: f64, y: f64, weight: f64, acc: &mut [f64]) {
    let fx = x / stride - 0.5;
    let fy = y / stride - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let g = grid as i64;
    for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
        let yi = y0 + dy;
        if yi < 0 || yi >= g || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
            let xi = x0 + dx;
            if xi < 0 || xi >= g || wx == 0.0 {
                continue;
            }
            let wgt = weight * wx * wy;
            let start = ((yi * g + xi) as usize) * channels;
            for (a, v) in acc.iter_mut().zip(&values[start..start + channels]) {
                *a += wgt * v;
            }
        }
    }
}

/// RoIAlign over an arbitrary channel count; returns `out_size²` bins
/// (row-major along the box `h` axis, then `w` axis), channels contiguous.
pub(crate) fn roi_align_raw(
    values: &[f64],
    grid: usize,
    channels: usize,
    stride: usize,
    b: &RotatedBox,
    out_size: usize,
    samples_per_bin: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_size * out_size * channels];
    let per_sample = 1.0 / (samples_per_bin * samples_per_bin) as f64;
    let bin_w = b.w / out_size as f64;
    let bin_h = b.h / out_size as f64;
    let stride = stride as f64;
    for by in 0..out_size {
        for bx in 0..out_size {
            let acc = &mut out[(by * out_size + bx) * channels..][..channels];
            for sy in 0..samples_per_bin {
                let v = -b.h / 2.0 + (by as f64 + (sy as f64 + 0.5) / samples_per_bin as f64) * bin_h;
                for sx in 0..samples_per_bin {
                    let u = -b.w / 2.0 + (bx as f64 + (sx as f64 + 0.5) / samples_per_bin as f64) * bin_w;
                    let p = b.local_to_image(u, v);
                    accumulate_bilinear(values, grid, channels, stride, p.x, p.y, per_sample, acc);
                }
            }
        }
    }
    out
}

/// `out_size × out_size` bins of 256-channel values.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrid {
    pub out_size: usize,
    /// Row-major bins, channels contiguous.
    pub values: Vec<f64>,
}

impl RoiGrid {
    pub fn bin(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.out_size + col) * CHANNELS;
        &self.values[start..start + CHANNELS]
    }
}

pub fn roi_align(level: &FeatureLevel, b: &RotatedBox, out_size: usize, samples_per_bin: usize) -> Result<RoiGrid> {
    if out_size == 0 || samples_per_bin == 0 {
        return Err(Error::InvalidParameter("out_size and samples_per_bin must be >= 1".into()));
    }
    Ok(RoiGrid {
        out_size,
        values: roi_align_raw(level.data(), level.grid(), CHANNELS, level.stride(), b, out_size, samples_per_bin),
    })
}

/// Scalars a [`MultiScaleFeature`] can be stored in.
pub trait FeatureScalar: Copy + Default + PartialEq + Into<f64> + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
}

impl FeatureScalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FeatureScalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Four per-scale 256-D descriptors, each unit-norm or all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeature<S = f64> {
    data: Box<[S]>,
}

/// Storage-precision feature as kept in an index.
pub type StoredFeature = MultiScaleFeature<f32>;

impl<S: FeatureScalar> MultiScaleFeature<S> {
    pub fn zeros() -> Self {
        Self {
            data: vec![S::default(); FEATURE_LEN].into_boxed_slice(),
        }
    }

    /// Wraps `LEVELS × CHANNELS` values without renormalizing.
    pub fn from_raw(values: Vec<S>) -> Result<Self> {
        if values.len() != FEATURE_LEN {
            return Err(Error::InvalidInput(format!(
                "feature has {} values, expected {FEATURE_LEN}",
                values.len()
            )));
        }
        Ok(Self {
            data: values.into_boxed_slice(),
        })
    }

    pub fn level(&self, i: usize) -> &[S] {
        &self.data[i * CHANNELS..(i + 1) * CHANNELS]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn level_norm(&self, i: usize) -> f64 {
        self.level(i).iter().map(|&v| v.into() * v.into()).sum::<f64>().sqrt()
    }

    pub fn widen(&self) -> MultiScaleFeature<f64> {
        MultiScaleFeature {
            data: self.data.iter().map(|&v| v.into()).collect(),
        }
    }
}

impl MultiScaleFeature<f64> {
    /// Normalizes each level to unit Euclidean norm; all-zero levels stay zero.
    pub fn from_levels(levels: [Vec<f64>; LEVELS]) -> Self {
        let mut data = Vec::with_capacity(FEATURE_LEN);
        for level in levels {
            assert_eq!(level.len(), CHANNELS, "per-scale descriptors are {CHANNELS}-D");
            let norm = level.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                data.extend(level.iter().map(|v| v / norm));
            } else {
                data.extend(std::iter::repeat_n(0.0, CHANNELS));
            }
        }
        Self {
            data: data.into_boxed_slice(),
        }
    }

    /// Narrows to storage precision.
    pub fn to_stored(&self) -> StoredFeature {
        MultiScaleFeature {
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn channel_max(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; CHANNELS];
    for cell in values.chunks_exact(CHANNELS) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o = o.max(*v);
        }
    }
    out
}

/// Regional descriptor `{R-P2..R-P5}`: 7×7 RoIAlign, channel max, per-level normalization.
pub fn pool_region(pyr: &FeaturePyramid, b: &RotatedBox) -> MultiScaleFeature {
    let levels: [Vec<f64>; LEVELS] = std::array::from_fn(|i| {
        let level = pyr.level(i);
        let bins = roi_align_raw(level.data(), level.grid(), CHANNELS, level.stride(), b, POOL_SIZE, POOL_SAMPLES);
        channel_max(&bins)
    });
    MultiScaleFeature::from_levels(levels)
}

/// Global descriptor `{G-P2..G-P5}`: channel max over every cell, per-level normalization.
pub fn global_feature(pyr: &FeaturePyramid) -> MultiScaleFeature {
    let levels: [Vec<f64>; LEVELS] = std::array::from_fn(|i| channel_max(pyr.level(i).data()));
    MultiScaleFeature::from_levels(levels)
}
