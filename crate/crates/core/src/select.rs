//! Pixel selection for sparse refinement: entropy thresholding, top-fraction
//! ranking (with random and edge-based baselines), halo dilation, and
//! per-site feature assembly.

use crate::dense::{DenseMap, MapKind};
use crate::error::{Error, Result};
use crate::sparse::SparseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;

/// How a selection was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectPolicy {
    EntropyThreshold,
    TopFraction,
    Random,
    Edge,
}

/// The sparse set of refinement pixels. Core pixels were chosen by the
/// policy; halo pixels are context added around them so convolutions keep
/// local support. Coordinates are sorted lexicographically and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSelection {
    height: usize,
    width: usize,
    coords: Vec<(u32, u32)>,
    is_core: Vec<bool>,
    pub source_policy: SelectPolicy,
    pub alpha_used: Option<f64>,
}

impl PixelSelection {
    fn from_parts(
        height: usize,
        width: usize,
        mut entries: Vec<((u32, u32), bool)>,
        policy: SelectPolicy,
        alpha: Option<f64>,
    ) -> Self {
        entries.sort_unstable_by_key(|e| e.0);
        let coords: Vec<(u32, u32)> = entries.iter().map(|e| e.0).collect();
        let is_core: Vec<bool> = entries.iter().map(|e| e.1).collect();
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        PixelSelection {
            height,
            width,
            coords,
            is_core,
            source_policy: policy,
            alpha_used: alpha,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn is_core(&self) -> &[bool] {
        &self.is_core
    }

    pub fn core_count(&self) -> usize {
        self.is_core.iter().filter(|b| **b).count()
    }

    pub fn core_coords(&self) -> Vec<(u32, u32)> {
        self.coords
            .iter()
            .zip(self.is_core.iter())
            .filter(|(_, core)| **core)
            .map(|(c, _)| *c)
            .collect()
    }

    /// Fraction of the image that is core / core+halo.
    pub fn core_fraction(&self) -> f64 {
        self.core_count() as f64 / (self.height * self.width) as f64
    }

    pub fn total_fraction(&self) -> f64 {
        self.len() as f64 / (self.height * self.width) as f64
    }
}

/// Core set = { p : entropy(p) > alpha }, strict inequality; halo empty.
pub fn select_entropy(entropy: &DenseMap, alpha: f64) -> Result<PixelSelection> {
    if entropy.kind() != MapKind::Entropy {
        return Err(Error::invalid_argument(format!(
            "select_entropy expects an entropy map, got {:?}",
            entropy.kind()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid_argument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let mut entries = Vec::new();
    for row in 0..entropy.height() {
        for col in 0..entropy.width() {
            if entropy.get(row, col, 0) > alpha {
                entries.push(((row as u32, col as u32), true));
            }
        }
    }
    Ok(PixelSelection::from_parts(
        entropy.height(),
        entropy.width(),
        entries,
        SelectPolicy::EntropyThreshold,
        Some(alpha),
    ))
}

/// Select exactly `round(fraction · H · W)` pixels with the highest scores.
/// Ties break by descending score then ascending (row, col).
pub fn select_top_fraction(
    score: &DenseMap,
    fraction: f64,
    policy: SelectPolicy,
) -> Result<PixelSelection> {
    if score.channels() != 1 {
        return Err(Error::invalid_argument(
            "top-fraction selection needs a 1-channel score map".to_string(),
        ));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let (h, w) = (score.height(), score.width());
    let k = ((fraction * (h * w) as f64).round() as usize).min(h * w);
    let mut order: Vec<u32> = (0..(h * w) as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        let sa = score.values()[a as usize];
        let sb = score.values()[b as usize];
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let entries: Vec<((u32, u32), bool)> = order[..k]
        .iter()
        .map(|&i| ((i / w as u32, i % w as u32), true))
        .collect();
    Ok(PixelSelection::from_parts(h, w, entries, policy, None))
}

/// Uniform per-pixel scores drawn from `seed`; reproducible across runs and
/// platforms.
pub fn random_score_map(height: usize, width: usize, seed: u64) -> DenseMap {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..height * width).map(|_| rng.gen::<f64>()).collect();
    DenseMap::new(height, width, 1, MapKind::Logits, values)
        .expect("positive dimensions")
}

/// Sobel gradient magnitude of ITU-R luminance (0.299R + 0.587G + 0.114B),
/// border pixels replicated.
pub fn edge_score_map(rgb: &DenseMap) -> Result<DenseMap> {
    if rgb.kind() != MapKind::Rgb {
        return Err(Error::invalid_argument(
            "edge scores need an RGB map".to_string(),
        ));
    }
    let (h, w) = (rgb.height(), rgb.width());
    let luma = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        let p = rgb.pixel(r, c);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut values = vec![0.0f64; h * w];
    crate::par::for_each_chunk_mut(&mut values, w, |row, out| {
        let r = row as isize;
        for col in 0..w {
            let c = col as isize;
            let gx = (luma(r - 1, c + 1) + 2.0 * luma(r, c + 1) + luma(r + 1, c + 1))
                - (luma(r - 1, c - 1) + 2.0 * luma(r, c - 1) + luma(r + 1, c - 1));
            let gy = (luma(r + 1, c - 1) + 2.0 * luma(r + 1, c) + luma(r + 1, c + 1))
                - (luma(r - 1, c - 1) + 2.0 * luma(r - 1, c) + luma(r - 1, c + 1));
            out[col] = (gx * gx + gy * gy).sqrt();
        }
    });
    DenseMap::new(h, w, 1, MapKind::Logits, values)
}

/// Add all in-bounds pixels within Chebyshev distance `radius` of any core
/// pixel, flagged as halo. Never removes pixels; idempotent for a fixed
/// radius.
pub fn dilate_halo(sel: &PixelSelection, radius: usize) -> PixelSelection {
    if radius == 0 {
        return sel.clone();
    }
    let r = radius as i64;
    let (h, w) = (sel.height as i64, sel.width as i64);
    let mut all: BTreeSet<(u32, u32)> = sel.coords.iter().copied().collect();
    let core: BTreeSet<(u32, u32)> = sel.core_coords().into_iter().collect();
    for &(cr, cc) in &core {
        for dy in -r..=r {
            for dx in -r..=r {
                let ny = cr as i64 + dy;
                let nx = cc as i64 + dx;
                if ny >= 0 && nx >= 0 && ny < h && nx < w {
                    all.insert((ny as u32, nx as u32));
                }
            }
        }
    }
    // `all` starts from the input coords, so pre-existing halo entries
    // survive; core flags are decided solely by the input's core set.
    let entries: Vec<((u32, u32), bool)> = all
        .into_iter()
        .map(|c| (c, core.contains(&c)))
        .collect();
    PixelSelection::from_parts(sel.height, sel.width, entries, sel.source_policy, sel.alpha_used)
}

/// One row per selected pixel (core and halo): features
/// `[rgb(3) | coarse geometry(C) | normalized entropy(1)]`, rows in selection
/// order, stride 1.
pub fn assemble_sparse_input(
    sel: &PixelSelection,
    rgb: &DenseMap,
    coarse: &DenseMap,
    entropy: &DenseMap,
) -> Result<SparseTensor<f64>> {
    if sel.is_empty() {
        return Err(Error::invalid_argument(
            "cannot assemble features for an empty selection".to_string(),
        ));
    }
    let (h, w) = (sel.height, sel.width);
    let same = |m: &DenseMap| m.height() == h && m.width() == w;
    if !same(rgb) || !same(coarse) || !same(entropy) {
        return Err(Error::invalid_argument(
            "assemble_sparse_input maps must share the selection resolution".to_string(),
        ));
    }
    if rgb.kind() != MapKind::Rgb || entropy.kind() != MapKind::Entropy {
        return Err(Error::invalid_argument(
            "assemble_sparse_input needs rgb + geometry + entropy maps".to_string(),
        ));
    }
    let c_geo = coarse.channels();
    let c_in = 3 + c_geo + 1;
    let mut feats = vec![0.0f64; sel.len() * c_in];
    crate::par::for_each_chunk_mut(&mut feats, c_in, |i, out| {
        let (r, c) = sel.coords[i];
        let (r, c) = (r as usize, c as usize);
        out[..3].copy_from_slice(rgb.pixel(r, c));
        out[3..3 + c_geo].copy_from_slice(coarse.pixel(r, c));
        out[3 + c_geo] = entropy.get(r, c, 0);
    });
    let coords: Vec<(i32, i32)> = sel
        .coords
        .iter()
        .map(|&(r, c)| (r as i32, c as i32))
        .collect();
    SparseTensor::new(coords, feats, c_in, 1)
}
