//! Merging coarse and refined estimates at the selected pixels: a learned
//! gate (two-layer perceptron over values and entropies), plus direct and
//! entropy-weighted baselines, and the write-back into the dense map.
//!
//! The refined operand carries residual semantics, so every strategy blends
//! as `value = coarse + (1 − w) · delta`: w = 1 keeps the coarse estimate,
//! w = 0 applies the full correction.

use crate::dense::{entropy_of_logits, DenseMap};
use crate::error::{Error, Result};
use crate::par;
use crate::select::PixelSelection;
use crate::sparse::SparseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Which fuser merges coarse and refined values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Gated,
    Direct,
    Entropy,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(FusionStrategy::Gated),
            "direct" => Ok(FusionStrategy::Direct),
            "entropy" => Ok(FusionStrategy::Entropy),
            other => Err(Error::invalid_argument(format!(
                "unknown fusion strategy `{other}` (gated|direct|entropy)"
            ))),
        }
    }
}

/// Two-layer gate: input `[coarse(C); delta(C); H(coarse); H(delta)]`,
/// hidden rectifier layer, sigmoid output weight.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub geo_channels: usize,
    pub hidden: usize,
    /// (2C+2) × hidden, layout `w1[i * hidden + j]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// hidden × 1.
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FusionParams {
    pub fn input_width(&self) -> usize {
        2 * self.geo_channels + 2
    }

    /// Fan-in-scaled uniform init with hidden width 16 by default.
    pub fn init(geo_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let input = 2 * geo_channels + 2;
        let bound1 = 1.0 / (input as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        FusionParams {
            geo_channels,
            hidden,
            w1: (0..input * hidden).map(|_| rng.gen_range(-bound1..bound1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.gen_range(-bound2..bound2)).collect(),
            b2: 0.0,
        }
    }

    pub fn zeros(geo_channels: usize, hidden: usize) -> Self {
        FusionParams {
            geo_channels,
            hidden,
            w1: vec![0.0; (2 * geo_channels + 2) * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != self.input_width() * self.hidden
            || self.b1.len() != self.hidden
            || self.w2.len() != self.hidden
        {
            return Err(Error::invalid_argument(
                "fusion parameter shapes are inconsistent".to_string(),
            ));
        }
        if self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.b2))
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid_input(
                "fusion parameters must be finite".to_string(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid_argument(
                "fusion flat buffer length mismatch".to_string(),
            ));
        }
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
        Ok(())
    }

    /// Named tensors for the weight manifest.
    pub fn tensor_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            (
                "fuse.layer1.weight".to_string(),
                vec![self.input_width(), self.hidden],
                self.w1.clone(),
            ),
            ("fuse.layer1.bias".to_string(), vec![self.hidden], self.b1.clone()),
            ("fuse.layer2.weight".to_string(), vec![self.hidden], self.w2.clone()),
            ("fuse.layer2.bias".to_string(), vec![1], vec![self.b2]),
        ]
    }

    pub fn from_tensor_entries(
        geo_channels: usize,
        lookup: &dyn Fn(&str) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        let w1 = lookup("fuse.layer1.weight")
            .ok_or_else(|| Error::Format("manifest is missing fuse.layer1.weight".to_string()))?;
        let b1 = lookup("fuse.layer1.bias")
            .ok_or_else(|| Error::Format("manifest is missing fuse.layer1.bias".to_string()))?;
        let w2 = lookup("fuse.layer2.weight")
            .ok_or_else(|| Error::Format("manifest is missing fuse.layer2.weight".to_string()))?;
        let b2 = lookup("fuse.layer2.bias")
            .ok_or_else(|| Error::Format("manifest is missing fuse.layer2.bias".to_string()))?;
        let hidden = b1.len();
        let params = FusionParams {
            geo_channels,
            hidden,
            w1,
            b1,
            w2,
            b2: *b2
                .first()
                .ok_or_else(|| Error::Format("fuse.layer2.bias is empty".to_string()))?,
        };
        params.validate()?;
        Ok(params)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(coarse: &[f64], delta: &[f64], h_coarse: f64, h_delta: f64) -> Result<()> {
    if coarse.iter().chain(delta.iter()).any(|v| !v.is_finite())
        || !h_coarse.is_finite()
        || !h_delta.is_finite()
    {
        return Err(Error::invalid_input(
            "fusion inputs must be finite".to_string(),
        ));
    }
    Ok(())
}

/// Hidden activations and gate of one pixel.
fn gate_forward(
    coarse: &[f64],
    delta: &[f64],
    h_coarse: f64,
    h_delta: f64,
    params: &FusionParams,
) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let h = params.hidden;
    let mut z = Vec::with_capacity(params.input_width());
    z.extend_from_slice(coarse);
    z.extend_from_slice(delta);
    z.push(h_coarse);
    z.push(h_delta);
    let mut pre = params.b1.clone();
    for (i, &zi) in z.iter().enumerate() {
        let row = &params.w1[i * h..(i + 1) * h];
        for (j, &w) in row.iter().enumerate() {
            pre[j] += w * zi;
        }
    }
    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let mut s = params.b2;
    for (j, &a) in act.iter().enumerate() {
        s += params.w2[j] * a;
    }
    (z, pre, s, sigmoid(s))
}

/// Learned gated fusion of one pixel: returns the fused value and the gate
/// weight w ∈ (0, 1).
pub fn gated_fuse(
    coarse: &[f64],
    delta: &[f64],
    h_coarse: f64,
    h_delta: f64,
    params: &FusionParams,
) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    if coarse.len() != params.geo_channels || delta.len() != params.geo_channels {
        return Err(Error::invalid_argument(format!(
            "gate expects {} geometry channels",
            params.geo_channels
        )));
    }
    check_finite(coarse, delta, h_coarse, h_delta)?;
    let (_, _, _, w) = gate_forward(coarse, delta, h_coarse, h_delta, params);
    let value = coarse
        .iter()
        .zip(delta.iter())
        .map(|(&c, &d)| c + (1.0 - w) * d)
        .collect();
    Ok((value, w))
}

/// Full overwrite by the refined estimate: `coarse + delta`.
pub fn direct_replace(coarse: &[f64], delta: &[f64]) -> Vec<f64> {
    coarse.iter().zip(delta.iter()).map(|(&c, &d)| c + d).collect()
}

/// Entropy-ratio baseline: `w = H(delta) / (H(coarse) + H(delta) + 1e-8)`;
/// higher coarse uncertainty shifts weight toward the refinement.
pub fn entropy_weight_fuse(
    coarse: &[f64],
    delta: &[f64],
    h_coarse: f64,
    h_delta: f64,
) -> Vec<f64> {
    let w = h_delta / (h_coarse + h_delta + 1e-8);
    coarse
        .iter()
        .zip(delta.iter())
        .map(|(&c, &d)| c + (1.0 - w) * d)
        .collect()
}

/// Gradients of [`gated_fuse`] with respect to everything.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub params: FusionParams,
    pub d_coarse: Vec<f64>,
    pub d_delta: Vec<f64>,
    pub d_h_coarse: f64,
    pub d_h_delta: f64,
}

/// Exact reverse-mode gradients of the gated fusion of one pixel.
pub fn fusion_backward(
    coarse: &[f64],
    delta: &[f64],
    h_coarse: f64,
    h_delta: f64,
    params: &FusionParams,
    upstream: &[f64],
) -> Result<FusionGrads> {
    let c = params.geo_channels;
    if coarse.len() != c || delta.len() != c || upstream.len() != c {
        return Err(Error::invalid_argument(
            "fusion backward shape mismatch".to_string(),
        ));
    }
    check_finite(coarse, delta, h_coarse, h_delta)?;
    let h = params.hidden;
    let (z, pre, _, w) = gate_forward(coarse, delta, h_coarse, h_delta, params);
    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();

    let mut grads = FusionGrads {
        params: FusionParams::zeros(c, h),
        d_coarse: vec![0.0; c],
        d_delta: vec![0.0; c],
        d_h_coarse: 0.0,
        d_h_delta: 0.0,
    };
    // Direct paths.
    let mut d_w_total = 0.0;
    for k in 0..c {
        grads.d_coarse[k] += upstream[k];
        grads.d_delta[k] += (1.0 - w) * upstream[k];
        d_w_total -= upstream[k] * delta[k];
    }
    // Through the sigmoid and the perceptron.
    let ds = d_w_total * w * (1.0 - w);
    grads.params.b2 = ds;
    let mut d_pre = vec![0.0; h];
    for j in 0..h {
        grads.params.w2[j] = ds * act[j];
        let da = ds * params.w2[j];
        d_pre[j] = if pre[j] > 0.0 { da } else { 0.0 };
        grads.params.b1[j] = d_pre[j];
    }
    let mut d_z = vec![0.0; z.len()];
    for (i, &zi) in z.iter().enumerate() {
        let row = &params.w1[i * h..(i + 1) * h];
        let g_row = &mut grads.params.w1[i * h..(i + 1) * h];
        let mut acc = 0.0;
        for j in 0..h {
            g_row[j] = zi * d_pre[j];
            acc += row[j] * d_pre[j];
        }
        d_z[i] = acc;
    }
    for k in 0..c {
        grads.d_coarse[k] += d_z[k];
        grads.d_delta[k] += d_z[c + k];
    }
    grads.d_h_coarse = d_z[2 * c];
    grads.d_h_delta = d_z[2 * c + 1];
    Ok(grads)
}

/// Fused values and gate weights for every core pixel of a selection.
#[derive(Debug, Clone)]
pub struct FusedResult {
    pub geo_channels: usize,
    /// Core-pixel coordinates in selection order.
    pub pixels: Vec<(u32, u32)>,
    /// `pixels.len() × geo_channels` fused values.
    pub values: Vec<f64>,
    /// Per-pixel effective blend weight (sigmoid output for the gated path).
    pub weights: Vec<f64>,
}

/// Fuse every core pixel of `sel`. `refined` must cover all core pixels and
/// carry `C + K` channels: residual then confidence logits; per-site
/// H(ΔY) comes from those logits.
pub fn fuse_selection(
    coarse_hr: &DenseMap,
    sel: &PixelSelection,
    refined: &SparseTensor<f64>,
    h_map: &DenseMap,
    params: &FusionParams,
    strategy: FusionStrategy,
) -> Result<FusedResult> {
    let c = coarse_hr.channels();
    if refined.channels() < c + 2 {
        return Err(Error::invalid_argument(format!(
            "refined tensor has {} channels; need {} geometry + >=2 confidence logits",
            refined.channels(),
            c
        )));
    }
    if params.geo_channels != c {
        return Err(Error::invalid_argument(
            "fusion parameters were built for a different geometry width".to_string(),
        ));
    }
    if coarse_hr.height() != sel.height()
        || coarse_hr.width() != sel.width()
        || h_map.height() != sel.height()
        || h_map.width() != sel.width()
    {
        return Err(Error::invalid_argument(
            "fusion maps must share the selection resolution".to_string(),
        ));
    }
    let pixels = sel.core_coords();
    let rows: Vec<Result<usize>> = pixels
        .iter()
        .map(|&(r, col)| {
            refined.row_of((r as i32, col as i32)).ok_or_else(|| {
                Error::Inconsistency(format!(
                    "no refined row for core pixel ({r}, {col})"
                ))
            })
        })
        .collect();
    let mut row_ids = Vec::with_capacity(rows.len());
    for r in rows {
        row_ids.push(r?);
    }
    let per_pixel: Vec<Result<(Vec<f64>, f64)>> = par::map_indexed(pixels.len(), |i| {
        let (r, col) = pixels[i];
        let site = refined.site(row_ids[i]);
        let delta = &site[..c];
        let conf = &site[c..];
        let h_delta = entropy_of_logits(conf);
        let h_coarse = h_map.get(r as usize, col as usize, 0);
        let coarse = coarse_hr.pixel(r as usize, col as usize);
        match strategy {
            FusionStrategy::Gated => gated_fuse(coarse, delta, h_coarse, h_delta, params),
            FusionStrategy::Direct => Ok((direct_replace(coarse, delta), 0.0)),
            FusionStrategy::Entropy => {
                let w = h_delta / (h_coarse + h_delta + 1e-8);
                Ok((entropy_weight_fuse(coarse, delta, h_coarse, h_delta), w))
            }
        }
    });
    let mut values = Vec::with_capacity(pixels.len() * c);
    let mut weights = Vec::with_capacity(pixels.len());
    for r in per_pixel {
        let (v, w) = r?;
        values.extend_from_slice(&v);
        weights.push(w);
    }
    Ok(FusedResult {
        geo_channels: c,
        pixels,
        values,
        weights,
    })
}

/// Copy the coarse map, then overwrite each core pixel with its fused value.
/// Halo pixels are context only and never written.
pub fn apply_fusion_to_map(
    coarse_hr: &DenseMap,
    sel: &PixelSelection,
    refined: &SparseTensor<f64>,
    h_map: &DenseMap,
    params: &FusionParams,
    strategy: FusionStrategy,
) -> Result<DenseMap> {
    let mut out = coarse_hr.clone();
    if sel.core_count() == 0 {
        return Ok(out);
    }
    let fused = fuse_selection(coarse_hr, sel, refined, h_map, params, strategy)?;
    let c = fused.geo_channels;
    for (i, &(r, col)) in fused.pixels.iter().enumerate() {
        for ch in 0..c {
            out.set(r as usize, col as usize, ch, fused.values[i * c + ch]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::MapKind;
    use crate::select::select_entropy;

    fn small_params() -> FusionParams {
        // Fixed small weights for the reproducible oracle test (C = 1).
        FusionParams {
            geo_channels: 1,
            hidden: 2,
            w1: vec![
                0.2, -0.1, // coarse row
                0.4, 0.3, // delta row
                -0.5, 0.6, // H(coarse) row
                0.1, -0.2, // H(delta) row
            ],
            b1: vec![0.05, -0.05],
            w2: vec![0.7, -0.3],
            b2: 0.1,
        }
    }

    #[test]
    fn saturated_gate_keeps_coarse() {
        let mut p = FusionParams::zeros(1, 4);
        p.b2 = 30.0;
        let (v, w) = gated_fuse(&[2.0], &[-0.5], 0.1, 0.9, &p).unwrap();
        assert!(w > 1.0 - 1e-12);
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn neutral_gate_blends_half() {
        let p = FusionParams::zeros(1, 4);
        let (v, w) = gated_fuse(&[2.0], &[-0.5], 0.1, 0.9, &p).unwrap();
        assert_eq!(w, 0.5);
        assert_eq!(v[0], 2.0 + 0.5 * -0.5);
    }

    #[test]
    fn gated_fuse_matches_matrix_oracle() {
        let p = small_params();
        let (coarse, delta, hc, hd) = ([2.0], [-0.5], 0.7, 0.2);
        // Independent evaluation of the perceptron then the blend.
        let z = [coarse[0], delta[0], hc, hd];
        let mut pre = [p.b1[0], p.b1[1]];
        for i in 0..4 {
            pre[0] += p.w1[i * 2] * z[i];
            pre[1] += p.w1[i * 2 + 1] * z[i];
        }
        let act = [pre[0].max(0.0), pre[1].max(0.0)];
        let s = p.b2 + p.w2[0] * act[0] + p.w2[1] * act[1];
        let w_expect = 1.0 / (1.0 + (-s).exp());
        let v_expect = coarse[0] + (1.0 - w_expect) * delta[0];
        let (v, w) = gated_fuse(&coarse, &delta, hc, hd, &p).unwrap();
        assert!((w - w_expect).abs() < 1e-15);
        assert!((v[0] - v_expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = FusionParams::zeros(1, 2);
        assert!(gated_fuse(&[f64::NAN], &[0.0], 0.0, 0.0, &p).is_err());
        assert!(gated_fuse(&[1.0], &[0.0], f64::INFINITY, 0.0, &p).is_err());
    }

    #[test]
    fn direct_replace_cases() {
        assert_eq!(direct_replace(&[1.0, 2.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(direct_replace(&[1.0], &[0.25]), vec![1.25]);
        // Equals the gated formula with w forced to 0.
        let coarse = [0.3, -1.7, 2.2];
        let delta = [0.9, 0.1, -0.4];
        let via_w0: Vec<f64> = coarse
            .iter()
            .zip(delta.iter())
            .map(|(&c, &d)| c + (1.0 - 0.0) * d)
            .collect();
        assert_eq!(direct_replace(&coarse, &delta), via_w0);
    }

    #[test]
    fn entropy_fuse_cases() {
        // Symmetric entropies give w = 0.5 up to the regularizer.
        let v = entropy_weight_fuse(&[2.0], &[1.0], 0.4, 0.4);
        assert!((v[0] - 2.5).abs() < 1e-8);
        // Fully uncertain coarse applies the whole correction.
        let v = entropy_weight_fuse(&[2.0], &[1.0], 1.0, 0.0);
        assert!((v[0] - 3.0).abs() < 1e-7);
        // Scalar formula oracle: w = 0.3/(0.9 + 1e-8).
        let w = 0.3 / (0.9 + 1e-8);
        let expect = 2.0 + (1.0 - w) * 1.0;
        let v = entropy_weight_fuse(&[2.0], &[1.0], 0.6, 0.3);
        assert!((v[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn gate_weight_stays_in_open_unit_interval() {
        let p = small_params();
        let mut state = 77u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 6.0 - 3.0
        };
        for _ in 0..300 {
            let coarse = [next()];
            let delta = [next()];
            let hc = (next().abs() / 3.0).min(1.0);
            let hd = (next().abs() / 3.0).min(1.0);
            let (v, w) = gated_fuse(&coarse, &delta, hc, hd, &p).unwrap();
            assert!(w > 0.0 && w < 1.0);
            // Convexity: fused lies between coarse and coarse + delta.
            let lo = coarse[0].min(coarse[0] + delta[0]);
            let hi = coarse[0].max(coarse[0] + delta[0]);
            assert!(v[0] >= lo - 1e-12 && v[0] <= hi + 1e-12);
            assert!((v[0] - coarse[0]).abs() <= delta[0].abs() + 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let p = small_params();
        let g = fusion_backward(&[2.0], &[-0.5], 0.7, 0.2, &p, &[0.0]).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(g.d_delta, vec![0.0]);
        assert_eq!(g.d_h_coarse, 0.0);
    }

    #[test]
    fn backward_neutral_gate_scalar_chain() {
        // Zero perceptron => w = 1/2 constant in all inputs; only the direct
        // paths remain: dvalue/dcoarse = 1, dvalue/ddelta = 1 - w.
        let p = FusionParams::zeros(1, 2);
        let g = fusion_backward(&[2.0], &[-0.5], 0.7, 0.2, &p, &[1.0]).unwrap();
        assert_eq!(g.d_coarse, vec![1.0]);
        assert_eq!(g.d_delta, vec![0.5]);
        assert_eq!(g.d_h_delta, 0.0);
        // b2 moves the gate: dvalue/db2 = -delta * w(1-w) = 0.5*0.25.
        assert!((g.params.b2 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences_c3() {
        let mut p = FusionParams::init(3, 5, 42);
        p.b1.iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f64 + 0.02);
        let coarse = [1.0, -0.5, 2.0];
        let delta = [0.3, 0.8, -0.2];
        let (hc, hd) = (0.6, 0.3);
        let upstream = [0.7, -0.4, 0.2];
        let g = fusion_backward(&coarse, &delta, hc, hd, &p, &upstream).unwrap();

        let loss = |p: &FusionParams, coarse: &[f64], delta: &[f64], hc: f64, hd: f64| -> f64 {
            let (v, _) = gated_fuse(coarse, delta, hc, hd, p).unwrap();
            v.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let flat = p.flatten();
        let analytic = g.params.flatten();
        for i in 0..flat.len() {
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[i] += h;
            fm[i] -= h;
            let mut pp = p.clone();
            pp.assign_flat(&fp).unwrap();
            let mut pm = p.clone();
            pm.assign_flat(&fm).unwrap();
            let fd = (loss(&pp, &coarse, &delta, hc, hd) - loss(&pm, &coarse, &delta, hc, hd))
                / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-7,
                "param {i}: fd {fd} vs {}",
                analytic[i]
            );
        }
        for k in 0..3 {
            let mut dp = delta;
            let mut dm = delta;
            dp[k] += h;
            dm[k] -= h;
            let fd = (loss(&p, &coarse, &dp, hc, hd) - loss(&p, &coarse, &dm, hc, hd)) / (2.0 * h);
            assert!((fd - g.d_delta[k]).abs() < 1e-7);
        }
        let fd = (loss(&p, &coarse, &delta, hc + h, hd) - loss(&p, &coarse, &delta, hc - h, hd))
            / (2.0 * h);
        assert!((fd - g.d_h_coarse).abs() < 1e-7);
        let fd = (loss(&p, &coarse, &delta, hc, hd + h) - loss(&p, &coarse, &delta, hc, hd - h))
            / (2.0 * h);
        assert!((fd - g.d_h_delta).abs() < 1e-7);
    }

    fn fusion_fixture() -> (DenseMap, PixelSelection, SparseTensor<f64>, DenseMap) {
        let coarse = DenseMap::new(2, 2, 1, MapKind::Depth, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h_vals = vec![0.9, 0.8, 0.1, 0.85];
        let h_map = DenseMap::new(2, 2, 1, MapKind::Entropy, h_vals).unwrap();
        let sel = select_entropy(&h_map, 0.5).unwrap(); // (0,0) (0,1) (1,1)
        let coords = vec![(0, 0), (0, 1), (1, 1)];
        let mut feats = Vec::new();
        for (i, _) in coords.iter().enumerate() {
            feats.extend_from_slice(&[0.5 * (i as f64 + 1.0), 0.3, -0.2, 0.6]); // delta + 3 logits
        }
        let refined = SparseTensor::new(coords, feats, 4, 1).unwrap();
        (coarse, sel, refined, h_map)
    }

    #[test]
    fn apply_fusion_empty_selection_is_identity() {
        let coarse = DenseMap::new(2, 2, 1, MapKind::Depth, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h_map = DenseMap::constant(2, 2, 1, MapKind::Entropy, 0.0).unwrap();
        let sel = select_entropy(&h_map, 0.5).unwrap();
        let refined = SparseTensor::new(vec![(0, 0)], vec![0.0; 4], 4, 1).unwrap();
        let p = FusionParams::init(1, 4, 3);
        let out =
            apply_fusion_to_map(&coarse, &sel, &refined, &h_map, &p, FusionStrategy::Gated)
                .unwrap();
        assert_eq!(out.values(), coarse.values());
    }

    #[test]
    fn apply_fusion_zero_delta_reproduces_coarse_bitwise() {
        let (coarse, sel, refined, h_map) = fusion_fixture();
        // Zero out the residual channel, keep arbitrary confidence logits.
        let mut feats = refined.feats().to_vec();
        for i in 0..refined.len() {
            feats[i * 4] = 0.0;
        }
        let refined = refined.with_feats(feats, 4).unwrap();
        let p = FusionParams::init(1, 4, 9);
        let out =
            apply_fusion_to_map(&coarse, &sel, &refined, &h_map, &p, FusionStrategy::Gated)
                .unwrap();
        assert_eq!(out.values(), coarse.values());
    }

    #[test]
    fn apply_fusion_touches_exactly_core_pixels() {
        let (coarse, sel, refined, h_map) = fusion_fixture();
        let p = FusionParams::init(1, 4, 5);
        let out =
            apply_fusion_to_map(&coarse, &sel, &refined, &h_map, &p, FusionStrategy::Gated)
                .unwrap();
        let mut diff_pixels = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                if out.get(r, c, 0) != coarse.get(r, c, 0) {
                    diff_pixels.push((r as u32, c as u32));
                }
            }
        }
        assert_eq!(diff_pixels, sel.core_coords());
        // Per-pixel recomputation oracle.
        for &(r, c) in &diff_pixels {
            let row = refined.row_of((r as i32, c as i32)).unwrap();
            let site = refined.site(row);
            let h_delta = entropy_of_logits(&site[1..]);
            let (v, _) = gated_fuse(
                &[coarse.get(r as usize, c as usize, 0)],
                &[site[0]],
                h_map.get(r as usize, c as usize, 0),
                h_delta,
                &p,
            )
            .unwrap();
            assert_eq!(out.get(r as usize, c as usize, 0), v[0]);
        }
    }

    #[test]
    fn missing_refined_row_names_the_pixel() {
        let (coarse, sel, _, h_map) = fusion_fixture();
        let refined = SparseTensor::new(vec![(0, 0)], vec![0.0; 4], 4, 1).unwrap();
        let p = FusionParams::init(1, 4, 5);
        let err = apply_fusion_to_map(&coarse, &sel, &refined, &h_map, &p, FusionStrategy::Gated)
            .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    #[test]
    fn strategy_consistency_direct_equals_forced_w0() {
        let (coarse, sel, refined, h_map) = fusion_fixture();
        let p = FusionParams::zeros(1, 4);
        let direct =
            apply_fusion_to_map(&coarse, &sel, &refined, &h_map, &p, FusionStrategy::Direct)
                .unwrap();
        for &(r, c) in &sel.core_coords() {
            let row = refined.row_of((r as i32, c as i32)).unwrap();
            let expect = coarse.get(r as usize, c as usize, 0) + refined.site(row)[0];
            assert_eq!(direct.get(r as usize, c as usize, 0), expect);
        }
    }
}
