//! Dense rasters: the `DenseMap` type, a validity mask, area-average
//! downsampling, nearest-neighbor upsampling, and per-pixel softmax entropy.

use crate::error::{Error, Result};
use crate::par;

/// What a `DenseMap` holds. Constrains the channel count and value range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Rgb,
    Depth,
    Pointmap,
    Logits,
    Entropy,
}

/// Storage precision tag. In-memory values are always f64; the tag records
/// the source/export width so file round trips stay bit-exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// A row-major H×W×C raster.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    height: usize,
    width: usize,
    channels: usize,
    kind: MapKind,
    precision: Precision,
    values: Vec<f64>,
}

impl DenseMap {
    /// Build a map, validating the kind-dependent invariants.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        kind: MapKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid_argument(format!(
                "map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::invalid_argument(format!(
                "value buffer has {} entries, expected {}",
                values.len(),
                height * width * channels
            )));
        }
        let channel_req = match kind {
            MapKind::Depth | MapKind::Entropy => Some(1),
            MapKind::Pointmap => Some(3),
            MapKind::Rgb => Some(3),
            MapKind::Logits => None,
        };
        if let Some(req) = channel_req {
            if channels != req {
                return Err(Error::invalid_argument(format!(
                    "{kind:?} maps must have {req} channel(s), got {channels}"
                )));
            }
        }
        if kind == MapKind::Entropy && !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid_argument(
                "entropy maps must hold normalized values in [0, 1]".to_string(),
            ));
        }
        Ok(DenseMap {
            height,
            width,
            channels,
            kind,
            precision: Precision::Double,
            values,
        })
    }

    /// Constant-valued map.
    pub fn constant(
        height: usize,
        width: usize,
        channels: usize,
        kind: MapKind,
        value: f64,
    ) -> Result<Self> {
        Self::new(height, width, channels, kind, vec![value; height * width * channels])
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

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        self.values[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        self.values[(row * self.width + col) * self.channels + ch] = v;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.values[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &DenseMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-pixel validity companion to a `DenseMap` (sensors have holes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid_argument(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(ValidityMask { height, width, bits })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        ValidityMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, valid: bool) {
        self.bits[row * self.width + col] = valid;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Area-average downsampling to `long_side` pixels on the longer side.
///
/// Each output pixel is the area-weighted mean of the source rectangle it
/// covers, which preserves constants exactly and anti-aliases edges.
pub fn downsample_area(img: &DenseMap, long_side: usize) -> Result<DenseMap> {
    let (h, w) = (img.height, img.width);
    let long = h.max(w);
    if long_side == 0 || long_side > long {
        return Err(Error::invalid_argument(format!(
            "long_side must be in 1..={long}, got {long_side}"
        )));
    }
    let (out_h, out_w) = if h >= w {
        let short = ((w as f64) * (long_side as f64) / (h as f64)).round() as usize;
        (long_side, short.max(1))
    } else {
        let short = ((h as f64) * (long_side as f64) / (w as f64)).round() as usize;
        (short.max(1), long_side)
    };

    let c = img.channels;
    let mut out = vec![0.0f64; out_h * out_w * c];
    let row_scale = h as f64 / out_h as f64;
    let col_scale = w as f64 / out_w as f64;
    par::for_each_chunk_mut(&mut out, out_w * c, |oy, out_row| {
        let y0 = oy as f64 * row_scale;
        let y1 = (oy + 1) as f64 * row_scale;
        for ox in 0..out_w {
            let x0 = ox as f64 * col_scale;
            let x1 = (ox + 1) as f64 * col_scale;
            let mut acc = vec![0.0f64; c];
            let mut area = 0.0f64;
            let sy0 = y0.floor() as usize;
            let sy1 = (y1.ceil() as usize).min(h);
            let sx0 = x0.floor() as usize;
            let sx1 = (x1.ceil() as usize).min(w);
            for sy in sy0..sy1 {
                let oy_len = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                if oy_len == 0.0 {
                    continue;
                }
                for sx in sx0..sx1 {
                    let ox_len = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                    if ox_len == 0.0 {
                        continue;
                    }
                    let wgt = oy_len * ox_len;
                    let px = img.pixel(sy, sx);
                    for ch in 0..c {
                        acc[ch] += wgt * px[ch];
                    }
                    area += wgt;
                }
            }
            for ch in 0..c {
                out_row[ox * c + ch] = acc[ch] / area;
            }
        }
    });
    DenseMap::new(out_h, out_w, c, img.kind, out)
}

/// Nearest-neighbor upsampling: `output(r, c) = input(⌊r·H/out_h⌋, ⌊c·W/out_w⌋)`.
pub fn upsample_nearest(map: &DenseMap, out_h: usize, out_w: usize) -> Result<DenseMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid_argument(
            "output dimensions must be positive".to_string(),
        ));
    }
    if out_h < map.height || out_w < map.width {
        return Err(Error::invalid_argument(format!(
            "upsample target {out_h}x{out_w} smaller than source {}x{}",
            map.height, map.width
        )));
    }
    let (h, w, c) = (map.height, map.width, map.channels);
    let mut out = vec![0.0f64; out_h * out_w * c];
    par::for_each_chunk_mut(&mut out, out_w * c, |oy, out_row| {
        let sy = oy * h / out_h;
        for ox in 0..out_w {
            let sx = ox * w / out_w;
            let px = map.pixel(sy, sx);
            out_row[ox * c..(ox + 1) * c].copy_from_slice(px);
        }
    });
    DenseMap::new(out_h, out_w, c, map.kind, out)
}

/// Softmax entropy of one logit vector, normalized by log C into [0, 1].
///
/// Uses max-subtraction so large logits cannot overflow.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    debug_assert!(logits.len() >= 2);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for &l in logits {
        sum += (l - m).exp();
    }
    let ln_sum = sum.ln();
    // H = -Σ q ln q with ln q = (l - m) - ln_sum.
    let mut h = 0.0f64;
    for &l in logits {
        let lnq = (l - m) - ln_sum;
        h -= lnq.exp() * lnq;
    }
    (h / (logits.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Gradient of [`entropy_of_logits`] with respect to the logits, scaled by
/// `upstream`.
pub fn entropy_of_logits_backward(logits: &[f64], upstream: f64) -> Vec<f64> {
    let k = logits.len();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for &l in logits {
        sum += (l - m).exp();
    }
    let ln_sum = sum.ln();
    let mut h_raw = 0.0f64;
    let mut q = vec![0.0f64; k];
    let mut lnq = vec![0.0f64; k];
    for i in 0..k {
        lnq[i] = (logits[i] - m) - ln_sum;
        q[i] = lnq[i].exp();
        h_raw -= q[i] * lnq[i];
    }
    let scale = upstream / (k as f64).ln();
    (0..k).map(|i| -q[i] * (lnq[i] + h_raw) * scale).collect()
}

/// Per-pixel normalized softmax entropy of a logits map.
pub fn compute_entropy(logits: &DenseMap) -> Result<DenseMap> {
    if logits.kind != MapKind::Logits {
        return Err(Error::invalid_argument(format!(
            "compute_entropy expects a logits map, got {:?}",
            logits.kind
        )));
    }
    if logits.channels < 2 {
        return Err(Error::invalid_argument(format!(
            "entropy needs at least 2 logit channels, got {}",
            logits.channels
        )));
    }
    // Validate finiteness up front so the error can name the pixel.
    for row in 0..logits.height {
        for col in 0..logits.width {
            if logits.pixel(row, col).iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!(
                    "non-finite logit at pixel ({row}, {col})"
                )));
            }
        }
    }
    let (h, w) = (logits.height, logits.width);
    let mut out = vec![0.0f64; h * w];
    par::for_each_chunk_mut(&mut out, w, |row, out_row| {
        for col in 0..w {
            out_row[col] = entropy_of_logits(logits.pixel(row, col));
        }
    });
    DenseMap::new(h, w, 1, MapKind::Entropy, out)
}

/// Check the depth-positivity invariant at valid pixels.
pub fn validate_depth(depth: &DenseMap, mask: &ValidityMask) -> Result<()> {
    if depth.kind != MapKind::Depth {
        return Err(Error::invalid_argument(format!(
            "expected a depth map, got {:?}",
            depth.kind
        )));
    }
    if depth.height != mask.height() || depth.width != mask.width() {
        return Err(Error::invalid_argument(
            "mask dimensions do not match map".to_string(),
        ));
    }
    for row in 0..depth.height {
        for col in 0..depth.width {
            if mask.get(row, col) && depth.get(row, col, 0) <= 0.0 {
                return Err(Error::invalid_input(format!(
                    "non-positive depth {} at valid pixel ({row}, {col})",
                    depth.get(row, col, 0)
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_map(h: usize, w: usize) -> DenseMap {
        let values: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        DenseMap::new(h, w, 1, MapKind::Depth, values).unwrap()
    }

    /// Brute-force area-overlap oracle: integrates every source pixel
    /// against every output cell.
    fn area_overlap_oracle(img: &DenseMap, out_h: usize, out_w: usize) -> Vec<f64> {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut acc = vec![0.0f64; out_h * out_w * c];
        let mut area = vec![0.0f64; out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y0 = oy as f64 * h as f64 / out_h as f64;
                let y1 = (oy + 1) as f64 * h as f64 / out_h as f64;
                let x0 = ox as f64 * w as f64 / out_w as f64;
                let x1 = (ox + 1) as f64 * w as f64 / out_w as f64;
                for sy in 0..h {
                    for sx in 0..w {
                        let dy = (y1.min(sy as f64 + 1.0) - y0.max(sy as f64)).max(0.0);
                        let dx = (x1.min(sx as f64 + 1.0) - x0.max(sx as f64)).max(0.0);
                        let wgt = dy * dx;
                        if wgt > 0.0 {
                            area[oy * out_w + ox] += wgt;
                            for ch in 0..c {
                                acc[(oy * out_w + ox) * c + ch] += wgt * img.get(sy, sx, ch);
                            }
                        }
                    }
                }
            }
        }
        for i in 0..out_h * out_w {
            for ch in 0..c {
                acc[i * c + ch] /= area[i];
            }
        }
        acc
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(DenseMap::new(0, 4, 1, MapKind::Depth, vec![]).is_err());
        assert!(DenseMap::new(2, 2, 1, MapKind::Depth, vec![1.0; 3]).is_err());
        assert!(DenseMap::new(2, 2, 2, MapKind::Depth, vec![1.0; 8]).is_err());
        assert!(DenseMap::new(2, 2, 1, MapKind::Pointmap, vec![1.0; 4]).is_err());
        assert!(DenseMap::new(1, 1, 1, MapKind::Entropy, vec![1.5]).is_err());
    }

    #[test]
    fn downsample_preserves_constants() {
        let img = DenseMap::constant(7, 5, 1, MapKind::Depth, 7.0).unwrap();
        let out = downsample_area(&img, 4).unwrap();
        assert_eq!(out.height(), 4);
        assert_eq!(out.width(), 3); // round(5*4/7) = 3
        assert!(out.values().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn downsample_checkerboard_averages_to_half() {
        let values: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let img = DenseMap::new(4, 4, 1, MapKind::Depth, values).unwrap();
        let out = downsample_area(&img, 2).unwrap();
        assert_eq!((out.height(), out.width()), (2, 2));
        assert!(out.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn downsample_ramp_matches_area_overlap_oracle() {
        let img = ramp_map(5, 3);
        let out = downsample_area(&img, 2).unwrap();
        assert_eq!((out.height(), out.width()), (2, 1)); // round(3*2/5) = 1
        let expect = area_overlap_oracle(&img, 2, 1);
        // Frozen from the oracle: rows cover source rows [0,2.5) and [2.5,5),
        // all columns; means are 3.4 and 10.6 over the ramp 0..14.
        assert!((expect[0] - 3.4).abs() < 1e-12);
        assert!((expect[1] - 10.6).abs() < 1e-12);
        for (got, want) in out.values().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn downsample_rejects_bad_long_side() {
        let img = ramp_map(4, 4);
        assert!(downsample_area(&img, 0).is_err());
        assert!(downsample_area(&img, 5).is_err());
    }

    #[test]
    fn upsample_single_pixel_broadcasts() {
        let img = DenseMap::new(1, 1, 1, MapKind::Depth, vec![5.0]).unwrap();
        let out = upsample_nearest(&img, 2, 2).unwrap();
        assert_eq!(out.values(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn upsample_identity_is_bitwise_copy() {
        let img = ramp_map(3, 4);
        let out = upsample_nearest(&img, 3, 4).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn upsample_2x2_to_3x3_matches_floor_formula() {
        let img = DenseMap::new(2, 2, 1, MapKind::Depth, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = upsample_nearest(&img, 3, 3).unwrap();
        // Enumerated by hand: source index = floor(r*2/3), floor(c*2/3).
        // r=0->0, r=1->0, r=2->1; same for columns.
        assert_eq!(
            out.values(),
            &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]
        );
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let img = ramp_map(3, 4);
        assert!(upsample_nearest(&img, 2, 4).is_err());
        assert!(upsample_nearest(&img, 0, 4).is_err());
    }

    #[test]
    fn entropy_uniform_logits_is_one() {
        let logits = DenseMap::new(1, 1, 4, MapKind::Logits, vec![0.0; 4]).unwrap();
        let h = compute_entropy(&logits).unwrap();
        assert!((h.get(0, 0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_near_one_hot_is_tiny() {
        let logits = DenseMap::new(1, 1, 2, MapKind::Logits, vec![50.0, 0.0]).unwrap();
        let h = compute_entropy(&logits).unwrap();
        assert!(h.get(0, 0, 0) < 1e-9);
    }

    #[test]
    fn entropy_of_logits_one_zero_matches_high_precision_value() {
        // Frozen from a 50-digit evaluation of -Σ q ln q / ln 2 for
        // q = softmax(1, 0): 0.83994153798316921727...
        let logits = DenseMap::new(1, 1, 2, MapKind::Logits, vec![1.0, 0.0]).unwrap();
        let h = compute_entropy(&logits).unwrap();
        assert!((h.get(0, 0, 0) - 0.8399415379831692).abs() < 1e-14);
    }

    #[test]
    fn entropy_rejects_non_finite_and_names_pixel() {
        let logits =
            DenseMap::new(1, 2, 2, MapKind::Logits, vec![0.0, 1.0, f64::NAN, 0.0]).unwrap();
        let err = compute_entropy(&logits).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    #[test]
    fn entropy_shift_invariance_and_bounds() {
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 20.0 - 10.0
        };
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| next()).collect();
            let shift = next();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let h0 = entropy_of_logits(&logits);
            let h1 = entropy_of_logits(&shifted);
            assert!((0.0..=1.0).contains(&h0));
            assert!((h0 - h1).abs() <= 1e-12, "shift broke entropy: {h0} vs {h1}");
        }
    }

    #[test]
    fn entropy_monotone_under_concentration() {
        let mut prev = f64::INFINITY;
        for step in 0..40 {
            let t = step as f64 * 0.25;
            let h = entropy_of_logits(&[t, 0.0, 0.0, 0.0]);
            assert!(h <= prev + 1e-15, "entropy increased at t={t}");
            prev = h;
        }
    }

    #[test]
    fn resample_round_trip_preserves_constant_maps() {
        let img = DenseMap::constant(6, 9, 3, MapKind::Rgb, 0.25).unwrap();
        let down = downsample_area(&img, 3).unwrap();
        let up = upsample_nearest(&down, 6, 9).unwrap();
        assert_eq!(up.values(), img.values());
    }

    #[test]
    fn entropy_backward_matches_finite_differences() {
        let logits = vec![0.3, -0.7, 1.1, 0.2];
        let grad = entropy_of_logits_backward(&logits, 1.0);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp[i] += h;
            lm[i] -= h;
            let fd = (entropy_of_logits(&lp) - entropy_of_logits(&lm)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-8,
                "channel {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn validate_depth_flags_bad_pixels() {
        let depth = DenseMap::new(1, 2, 1, MapKind::Depth, vec![1.0, -2.0]).unwrap();
        let mut mask = ValidityMask::all_valid(1, 2);
        assert!(validate_depth(&depth, &mask).is_err());
        mask.set(0, 1, false);
        assert!(validate_depth(&depth, &mask).is_ok());
    }
}
