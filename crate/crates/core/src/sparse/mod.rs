//! Generalized sparse convolution machinery.
//!
//! A [`SparseTensor`] is a set of active pixel coordinates at a stride level
//! with per-site feature vectors and a coordinate→row hash index. A
//! [`KernelMap`] precomputes, for every kernel offset, the (input-row,
//! output-row) pairs that drive gather–scatter convolution, so the
//! convolution itself touches active sites only.
//!
//! Determinism: pair lists are ordered by (output row, offset scan order);
//! each output row is accumulated by exactly one task in that fixed order,
//! so multithreaded results are bit-identical to single-threaded ones.

mod coord;

pub use coord::{Coord, CoordMap};

use crate::error::{Error, Result};
use crate::par;
use std::sync::atomic::{AtomicU64, Ordering};

/// Floating scalar the engine is generic over (f32 or f64).
pub trait Scalar:
    num_traits::Float + std::ops::AddAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Exact fused multiply–add counter shared across engine calls.
#[derive(Debug, Default)]
pub struct MaddCounter(AtomicU64);

impl MaddCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Active sites at one stride level with N×C features.
#[derive(Debug, Clone)]
pub struct SparseTensor<T: Scalar> {
    coords: Vec<Coord>,
    feats: Vec<T>,
    channels: usize,
    stride: u32,
    index: CoordMap,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(coords: Vec<Coord>, feats: Vec<T>, channels: usize, stride: u32) -> Result<Self> {
        if !stride.is_power_of_two() {
            return Err(Error::invalid_argument(format!(
                "stride must be a power of two, got {stride}"
            )));
        }
        if channels == 0 || feats.len() != coords.len() * channels {
            return Err(Error::invalid_argument(format!(
                "feature buffer has {} entries, expected {} sites x {} channels",
                feats.len(),
                coords.len(),
                channels
            )));
        }
        let s = stride as i32;
        if let Some(bad) = coords.iter().find(|c| c.0 % s != 0 || c.1 % s != 0) {
            return Err(Error::invalid_argument(format!(
                "coordinate {bad:?} is not divisible by stride {stride}"
            )));
        }
        let index = CoordMap::build(&coords).map_err(|i| {
            Error::invalid_argument(format!("duplicate coordinate {:?} at row {i}", coords[i]))
        })?;
        Ok(SparseTensor {
            coords,
            feats,
            channels,
            stride,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn feats(&self) -> &[T] {
        &self.feats
    }

    pub fn feats_mut(&mut self) -> &mut [T] {
        &mut self.feats
    }

    pub fn index(&self) -> &CoordMap {
        &self.index
    }

    pub fn row_of(&self, coord: Coord) -> Option<usize> {
        self.index.get(coord).map(|r| r as usize)
    }

    /// Feature vector of one site.
    pub fn site(&self, row: usize) -> &[T] {
        &self.feats[row * self.channels..(row + 1) * self.channels]
    }

    /// Same coordinates and stride, new feature buffer.
    pub fn with_feats(&self, feats: Vec<T>, channels: usize) -> Result<SparseTensor<T>> {
        if feats.len() != self.len() * channels {
            return Err(Error::invalid_argument(
                "replacement features disagree with site count".to_string(),
            ));
        }
        Ok(SparseTensor {
            coords: self.coords.clone(),
            feats,
            channels,
            stride: self.stride,
            index: self.index.clone(),
        })
    }

    /// Concatenate the channels of two tensors over identical rows.
    pub fn concat_channels(&self, other: &SparseTensor<T>) -> Result<SparseTensor<T>> {
        if self.len() != other.len() {
            return Err(Error::invalid_argument(
                "channel concat needs identical site counts".to_string(),
            ));
        }
        let c = self.channels + other.channels;
        let mut feats = vec![T::zero(); self.len() * c];
        par::for_each_chunk_mut(&mut feats, c, |i, out| {
            out[..self.channels].copy_from_slice(self.site(i));
            out[self.channels..].copy_from_slice(other.site(i));
        });
        self.with_feats(feats, c)
    }
}

/// Learnable parameters of one sparse convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    kernel_size: usize,
    c_in: usize,
    c_out: usize,
    /// Layout: `weights[(offset * c_in + ci) * c_out + co]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel_size: usize, c_in: usize, c_out: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid_argument(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if weights.len() != kernel_size * kernel_size * c_in * c_out || bias.len() != c_out {
            return Err(Error::invalid_argument(
                "convolution parameter shapes are inconsistent".to_string(),
            ));
        }
        if weights.iter().chain(bias.iter()).any(|w| !w.is_finite()) {
            return Err(Error::invalid_input(
                "convolution parameters must be finite".to_string(),
            ));
        }
        Ok(ConvParams {
            kernel_size,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(
            kernel_size,
            c_in,
            c_out,
            vec![T::zero(); kernel_size * kernel_size * c_in * c_out],
            vec![T::zero(); c_out],
        )
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
}

/// Per-offset gather–scatter pair lists plus a per-output-row view.
#[derive(Debug, Clone)]
pub struct KernelMap {
    kernel_size: usize,
    conv_stride: u32,
    in_stride: u32,
    out_stride: u32,
    offset_scale: u32,
    n_in: usize,
    n_out: usize,
    /// `pairs[offset]` = (input_row, output_row), ordered by output row.
    pairs: Vec<Vec<(u32, u32)>>,
    /// CSR over output rows; entries are (offset_idx, input_row) in offset
    /// scan order. This fixes each row's accumulation order.
    row_starts: Vec<u32>,
    row_entries: Vec<(u32, u32)>,
}

impl KernelMap {
    /// Kernel offsets in scan order for size k: (dy, dx) over [-k/2, k/2]².
    pub fn offsets(kernel_size: usize) -> Vec<(i32, i32)> {
        let r = (kernel_size / 2) as i32;
        let mut out = Vec::with_capacity(kernel_size * kernel_size);
        for dy in -r..=r {
            for dx in -r..=r {
                out.push((dy, dx));
            }
        }
        out
    }

    pub(crate) fn build_impl(
        input_index: &CoordMap,
        n_in: usize,
        out_coords: &[Coord],
        kernel_size: usize,
        conv_stride: u32,
        in_stride: u32,
        out_stride: u32,
        offset_scale: u32,
    ) -> KernelMap {
        let offsets = Self::offsets(kernel_size);
        let scale = offset_scale as i32;
        let n_out = out_coords.len();

        let pairs: Vec<Vec<(u32, u32)>> = par::map_indexed(offsets.len(), |o| {
            let (dy, dx) = offsets[o];
            let mut list = Vec::new();
            for (u_row, u) in out_coords.iter().enumerate() {
                let probe = (u.0 + dy * scale, u.1 + dx * scale);
                if let Some(in_row) = input_index.get(probe) {
                    list.push((in_row, u_row as u32));
                }
            }
            list
        });

        // Counting sort into per-row entries; iterating offsets in ascending
        // scan order keeps each row's entries in offset order.
        let total: usize = pairs.iter().map(|p| p.len()).sum();
        let mut row_starts = vec![0u32; n_out + 1];
        for list in &pairs {
            for &(_, u_row) in list {
                row_starts[u_row as usize + 1] += 1;
            }
        }
        for i in 0..n_out {
            row_starts[i + 1] += row_starts[i];
        }
        let mut fill = row_starts.clone();
        let mut row_entries = vec![(0u32, 0u32); total];
        for (o, list) in pairs.iter().enumerate() {
            for &(in_row, u_row) in list {
                let slot = fill[u_row as usize];
                row_entries[slot as usize] = (o as u32, in_row);
                fill[u_row as usize] = slot + 1;
            }
        }

        KernelMap {
            kernel_size,
            conv_stride,
            in_stride,
            out_stride,
            offset_scale,
            n_in,
            n_out,
            pairs,
            row_starts,
            row_entries,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn conv_stride(&self) -> u32 {
        self.conv_stride
    }

    pub fn in_stride(&self) -> u32 {
        self.in_stride
    }

    pub fn out_stride(&self) -> u32 {
        self.out_stride
    }

    /// The stride the kernel offsets are multiplied by (the input stride for
    /// forward maps, the output stride for transposed maps).
    pub fn offset_scale(&self) -> u32 {
        self.offset_scale
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn pairs(&self, offset: usize) -> &[(u32, u32)] {
        &self.pairs[offset]
    }

    pub fn total_pairs(&self) -> usize {
        self.row_entries.len()
    }

    /// Exact multiply–adds a convolution through this map performs:
    /// Σ_offsets |pairs(offset)| · C_in · C_out.
    pub fn madd_count(&self, c_in: usize, c_out: usize) -> u64 {
        self.pairs
            .iter()
            .map(|p| p.len() as u64 * c_in as u64 * c_out as u64)
            .sum()
    }
}

/// Kernel map for a stride-preserving or downsampling convolution.
///
/// A pair exists under offset `o` iff the input index contains
/// `out_coord + o · in_stride`.
pub fn build_kernel_map<T: Scalar>(
    input: &SparseTensor<T>,
    out_coords: &[Coord],
    kernel_size: usize,
    conv_stride: u32,
) -> Result<KernelMap> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::invalid_argument(format!(
            "kernel size must be odd, got {kernel_size}"
        )));
    }
    if conv_stride == 0 || !conv_stride.is_power_of_two() {
        return Err(Error::invalid_argument(format!(
            "convolution stride must be a power of two, got {conv_stride}"
        )));
    }
    let out_stride = input.stride() * conv_stride;
    let s = out_stride as i32;
    if let Some(bad) = out_coords.iter().find(|c| c.0 % s != 0 || c.1 % s != 0) {
        return Err(Error::invalid_argument(format!(
            "output coordinate {bad:?} is not divisible by output stride {out_stride}"
        )));
    }
    Ok(KernelMap::build_impl(
        input.index(),
        input.len(),
        out_coords,
        kernel_size,
        conv_stride,
        input.stride(),
        out_stride,
        input.stride(),
    ))
}

/// Kernel map for an upsampling (transposed) convolution: output stride is
/// half the input stride, offsets are scaled by the output stride, i.e. the
/// adjoint connectivity of the matching downsampling map.
pub fn build_kernel_map_transposed<T: Scalar>(
    input: &SparseTensor<T>,
    out_coords: &[Coord],
    kernel_size: usize,
) -> Result<KernelMap> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::invalid_argument(format!(
            "kernel size must be odd, got {kernel_size}"
        )));
    }
    if input.stride() < 2 {
        return Err(Error::invalid_argument(
            "transposed map needs input stride >= 2".to_string(),
        ));
    }
    let out_stride = input.stride() / 2;
    let s = out_stride as i32;
    if let Some(bad) = out_coords.iter().find(|c| c.0 % s != 0 || c.1 % s != 0) {
        return Err(Error::invalid_argument(format!(
            "output coordinate {bad:?} is not divisible by output stride {out_stride}"
        )));
    }
    Ok(KernelMap::build_impl(
        input.index(),
        input.len(),
        out_coords,
        kernel_size,
        1,
        input.stride(),
        out_stride,
        out_stride,
    ))
}

/// Convolution on raw feature buffers; the kernel map supplies all
/// coordinate structure.
pub(crate) fn conv_feats<T: Scalar>(
    x_feats: &[T],
    p: &ConvParams<T>,
    km: &KernelMap,
    counter: &MaddCounter,
) -> Result<Vec<T>> {
    if x_feats.len() != km.n_in * p.c_in {
        return Err(Error::invalid_argument(format!(
            "conv input has {} values, kernel map expects {} sites x {} channels",
            x_feats.len(),
            km.n_in,
            p.c_in
        )));
    }
    if km.kernel_size != p.kernel_size {
        return Err(Error::invalid_argument(
            "kernel map size disagrees with parameters".to_string(),
        ));
    }
    let (c_in, c_out) = (p.c_in, p.c_out);
    let mut feats = vec![T::zero(); km.n_out * c_out];
    par::for_each_chunk_mut(&mut feats, c_out, |u_row, out| {
        out.copy_from_slice(&p.bias);
        let lo = km.row_starts[u_row] as usize;
        let hi = km.row_starts[u_row + 1] as usize;
        for &(off, in_row) in &km.row_entries[lo..hi] {
            let xs = &x_feats[in_row as usize * c_in..(in_row as usize + 1) * c_in];
            let wbase = off as usize * c_in * c_out;
            for (ci, &xv) in xs.iter().enumerate() {
                let ws = &p.weights[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                for (co, &w) in ws.iter().enumerate() {
                    out[co] += w * xv;
                }
            }
        }
    });
    counter.add(km.row_entries.len() as u64 * c_in as u64 * c_out as u64);
    Ok(feats)
}

/// Gather–scatter sparse convolution: `y_u = bias + Σ_o W_o · x_{u+o·s}`
/// over existing inputs only.
pub fn sparse_conv<T: Scalar>(
    x: &SparseTensor<T>,
    p: &ConvParams<T>,
    km: &KernelMap,
    out_coords: &[Coord],
    counter: &MaddCounter,
) -> Result<SparseTensor<T>> {
    if p.c_in != x.channels() {
        return Err(Error::invalid_argument(format!(
            "conv expects {} input channels, tensor has {}",
            p.c_in,
            x.channels()
        )));
    }
    if km.n_in != x.len() || km.n_out != out_coords.len() {
        return Err(Error::invalid_argument(
            "kernel map was not built for these tensors".to_string(),
        ));
    }
    let feats = conv_feats(x.feats(), p, km, counter)?;
    SparseTensor::new(out_coords.to_vec(), feats, p.c_out, km.out_stride)
}

/// Conv gradients on raw feature buffers: (dWeights, dBias, dInputFeats).
pub(crate) fn conv_feats_backward<T: Scalar>(
    x_feats: &[T],
    p: &ConvParams<T>,
    km: &KernelMap,
    g_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (c_in, c_out) = (p.c_in, p.c_out);
    if g_out.len() != km.n_out * c_out || x_feats.len() != km.n_in * c_in {
        return Err(Error::invalid_argument(
            "upstream gradient shape mismatch in conv backward".to_string(),
        ));
    }
    let mut d_w = vec![T::zero(); p.weights.len()];
    let mut d_b = vec![T::zero(); c_out];
    let mut d_x = vec![T::zero(); x_feats.len()];
    for g_row in g_out.chunks_exact(c_out) {
        for (co, &g) in g_row.iter().enumerate() {
            d_b[co] += g;
        }
    }
    for (o, list) in km.pairs.iter().enumerate() {
        let wbase = o * c_in * c_out;
        for &(in_row, u_row) in list {
            let xs = &x_feats[in_row as usize * c_in..(in_row as usize + 1) * c_in];
            let gs = &g_out[u_row as usize * c_out..(u_row as usize + 1) * c_out];
            let dxs = &mut d_x[in_row as usize * c_in..(in_row as usize + 1) * c_in];
            for ci in 0..c_in {
                let ws = &p.weights[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                let dws = &mut d_w[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                let xv = xs[ci];
                let mut acc = T::zero();
                for co in 0..c_out {
                    dws[co] += xv * gs[co];
                    acc += ws[co] * gs[co];
                }
                dxs[ci] += acc;
            }
        }
    }
    Ok((d_w, d_b, d_x))
}

/// Gradients of [`sparse_conv`]: (dWeights, dBias, dInputFeats).
pub fn sparse_conv_backward<T: Scalar>(
    x: &SparseTensor<T>,
    p: &ConvParams<T>,
    km: &KernelMap,
    g_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if km.n_in != x.len() || p.c_in != x.channels() {
        return Err(Error::invalid_argument(
            "kernel map was not built for this tensor".to_string(),
        ));
    }
    conv_feats_backward(x.feats(), p, km, g_out)
}

/// Floor-snap every coordinate to the 2× coarser grid; sorted unique result.
pub fn downsample_coords<T: Scalar>(x: &SparseTensor<T>) -> Vec<Coord> {
    downsample_coords_raw(x.coords(), x.stride())
}

pub(crate) fn downsample_coords_raw(coords: &[Coord], stride: u32) -> Vec<Coord> {
    let cell = (stride * 2) as i32;
    let mut out: Vec<Coord> = coords
        .iter()
        .map(|c| (c.0 - c.0.rem_euclid(cell), c.1 - c.1.rem_euclid(cell)))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Per-forward-pass statistics cached for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T: Scalar> {
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
}

const NORM_EPS: f64 = 1e-5;

/// Feature-buffer form of site normalization.
pub(crate) fn norm_feats<T: Scalar>(
    feats: &[T],
    c: usize,
    scale: &[T],
    shift: &[T],
) -> Result<(Vec<T>, NormCache<T>)> {
    if scale.len() != c || shift.len() != c {
        return Err(Error::invalid_argument(
            "site_norm affine length must equal channel count".to_string(),
        ));
    }
    if feats.is_empty() || feats.len() % c != 0 {
        return Err(Error::invalid_argument(
            "site_norm needs at least one active site".to_string(),
        ));
    }
    let n = feats.len() / c;
    let inv_n = T::from_f64(1.0 / n as f64);
    // Sequential per-channel statistics keep the accumulation order fixed.
    let mut mean = vec![T::zero(); c];
    for row in feats.chunks_exact(c) {
        for (ch, &v) in row.iter().enumerate() {
            mean[ch] += v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m * inv_n;
    }
    let mut var = vec![T::zero(); c];
    for row in feats.chunks_exact(c) {
        for (ch, &v) in row.iter().enumerate() {
            let d = v - mean[ch];
            var[ch] += d * d;
        }
    }
    let eps = T::from_f64(NORM_EPS);
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| (v * inv_n + eps).sqrt().recip())
        .collect();
    let mut xhat = vec![T::zero(); feats.len()];
    par::for_each_chunk_mut(&mut xhat, c, |i, o| {
        let row = &feats[i * c..(i + 1) * c];
        for ch in 0..c {
            o[ch] = (row[ch] - mean[ch]) * inv_std[ch];
        }
    });
    let mut out = vec![T::zero(); feats.len()];
    par::for_each_chunk_mut(&mut out, c, |i, o| {
        let row = &xhat[i * c..(i + 1) * c];
        for ch in 0..c {
            o[ch] = row[ch] * scale[ch] + shift[ch];
        }
    });
    Ok((out, NormCache { inv_std, xhat }))
}

/// Normalize each channel over the active sites of this forward pass, then
/// apply a learned affine. Statistics use the biased (1/N) variance.
pub fn site_norm_with_cache<T: Scalar>(
    x: &SparseTensor<T>,
    scale: &[T],
    shift: &[T],
) -> Result<(SparseTensor<T>, NormCache<T>)> {
    let (out, cache) = norm_feats(x.feats(), x.channels(), scale, shift)?;
    Ok((x.with_feats(out, x.channels())?, cache))
}

/// [`site_norm_with_cache`] without the cache.
pub fn site_norm<T: Scalar>(
    x: &SparseTensor<T>,
    scale: &[T],
    shift: &[T],
) -> Result<SparseTensor<T>> {
    site_norm_with_cache(x, scale, shift).map(|(t, _)| t)
}

/// Gradients of site_norm: (dScale, dShift, dInputFeats).
pub fn site_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    scale: &[T],
    g_out: &[T],
    channels: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = channels;
    let n = g_out.len() / c;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let g = g_out[i * c + ch];
            sum_g[ch] += g;
            sum_gx[ch] += g * cache.xhat[i * c + ch];
        }
    }
    let mut d_x = vec![T::zero(); g_out.len()];
    for i in 0..n {
        for ch in 0..c {
            let g = g_out[i * c + ch];
            let xh = cache.xhat[i * c + ch];
            d_x[i * c + ch] = scale[ch]
                * cache.inv_std[ch]
                * (g - sum_g[ch] * inv_n - xh * (sum_gx[ch] * inv_n));
        }
    }
    (sum_gx, sum_g, d_x)
}

/// Elementwise rectifier.
pub fn relu<T: Scalar>(feats: &[T]) -> Vec<T> {
    feats.iter().map(|&v| v.max(T::zero())).collect()
}

/// Rectifier gradient gated by the pre-activation values.
pub fn relu_backward<T: Scalar>(pre: &[T], g_out: &[T]) -> Vec<T> {
    pre.iter()
        .zip(g_out.iter())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect()
}
